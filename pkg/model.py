"""
ReadLens encoder model.

Word-level vocabulary, input layout, a post-norm transformer encoder whose
per-head attention matrices are kept in the gradient graph, an answer head
and an auxiliary group-probe head, plus the binary checkpoint container.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

import tensor as T
from errors import ValidationError
from storage import atomic_write_bytes, sha256_text
from tensor import TensorNode

if TYPE_CHECKING:
    from data import Instance

PAD_ID, CLS_ID, SEP_ID, UNK_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"]
MAX_SEQUENCE_LENGTH = 512
INIT_RANGE = 0.08
LAYER_NORM_EPS = 1e-5

CHECKPOINT_MAGIC = b"RDLNSCKP"
# 2: token embeddings scaled by sqrt(d_model) in the forward pass
CHECKPOINT_VERSION = 2
_PREAMBLE = struct.Struct("<8sII")


class ConfigError(ValidationError):
    """A model setting violates its invariants."""


class InvalidTokenIdError(ValidationError):
    """An input id falls outside the vocabulary."""


class SequenceTooLongError(ValidationError):
    """The fixed part of the layout does not fit max_len."""


class CheckpointError(ValidationError):
    """Base class for checkpoint container problems."""


class CheckpointFormatError(CheckpointError):
    """Not a ReadLens checkpoint, or an inconsistent header."""


class CheckpointVersionError(CheckpointError):
    """The container was written by an unsupported format version."""


class TruncatedCheckpointError(CheckpointError):
    """The file ends before the declared parameter data."""


class CheckpointShapeError(CheckpointError):
    """Stored parameter shapes disagree with the stored config."""


class CheckpointDataMismatchError(ValidationError):
    """A checkpoint cannot be applied to a dataset (options, vocabulary or length)."""


# ---------------------------------------------------------------------------
# Vocabulary and input layout
# ---------------------------------------------------------------------------

class Vocabulary:
    """Dense token ids; 0-3 are reserved for PAD, CLS, SEP and UNK."""

    def __init__(self, tokens: Iterable[str]):
        self._id_to_token: List[str] = list(SPECIAL_TOKENS)
        self._token_to_id: Dict[str, int] = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        for token in tokens:
            if token not in self._token_to_id:
                self._token_to_id[token] = len(self._id_to_token)
                self._id_to_token.append(token)

    @classmethod
    def from_instances(cls, instances: Sequence["Instance"]) -> "Vocabulary":
        words = set()
        for inst in instances:
            words.update(inst.passage)
            words.update(inst.question)
            for option in inst.options:
                words.update(option)
        return cls(sorted(words))

    def __len__(self) -> int:
        return len(self._id_to_token)

    @property
    def words(self) -> List[str]:
        """Non-reserved tokens in id order."""
        return self._id_to_token[len(SPECIAL_TOKENS):]

    def token_to_id(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def id_to_token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._id_to_token):
            raise InvalidTokenIdError(f"token id {token_id} outside vocabulary of {len(self)}")
        return self._id_to_token[token_id]

    def digest(self) -> str:
        return sha256_text("\n".join(self.words))


@dataclass
class EncodedInput:
    """One laid-out sequence. passage_span is [start, stop) in sequence positions."""

    ids: np.ndarray
    valid: np.ndarray
    passage_span: Tuple[int, int]
    tokens: List[str]

    @property
    def passage_length(self) -> int:
        return self.passage_span[1] - self.passage_span[0]


def encode(instance: "Instance", vocab: Vocabulary, max_len: int,
           include_options: bool = True) -> EncodedInput:
    """Lay out [CLS] question ([SEP] option)* [SEP] passage [SEP] and pad to max_len.

    The passage tail is truncated first. Raises SequenceTooLongError when not
    even one passage token fits.
    """
    if not instance.question or not instance.passage:
        raise ValidationError(f"instance '{instance.id}' has an empty question or passage")
    prefix = ["[CLS]"] + list(instance.question)
    if include_options:
        for option in instance.options:
            prefix += ["[SEP]"] + list(option)
    prefix.append("[SEP]")
    room = max_len - len(prefix) - 1
    if room < 1:
        raise SequenceTooLongError(
            f"instance '{instance.id}': question segment of {len(prefix)} tokens leaves no room "
            f"for the passage within max_len {max_len}")
    passage = list(instance.passage[:room])
    tokens = prefix + passage + ["[SEP]"]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[:len(tokens)] = [CLS_ID if t == "[CLS]" else SEP_ID if t == "[SEP]" else vocab.token_to_id(t)
                         for t in tokens]
    valid = np.zeros(max_len, dtype=bool)
    valid[:len(tokens)] = True
    start = len(prefix)
    return EncodedInput(ids=ids, valid=valid, passage_span=(start, start + len(passage)),
                        tokens=tokens + ["[PAD]"] * (max_len - len(tokens)))


def encode_batch(instances: Sequence["Instance"], vocab: Vocabulary,
                 max_len: int) -> Tuple[np.ndarray, np.ndarray, List[EncodedInput]]:
    encoded = [encode(inst, vocab, max_len) for inst in instances]
    return (np.stack([e.ids for e in encoded]), np.stack([e.valid for e in encoded]), encoded)


def build_attention_mask(valid: np.ndarray, causal: bool = False) -> np.ndarray:
    """Additive mask of shape (B, 1, N, N): PAD columns (and the future, if causal) masked."""
    valid = np.atleast_2d(valid)
    n = valid.shape[-1]
    allowed = np.repeat(valid[:, None, None, :], n, axis=2)
    if causal:
        allowed = allowed & np.tril(np.ones((n, n), dtype=bool))[None, None]
    return np.where(allowed, 0.0, T.MASK_VALUE)


# ---------------------------------------------------------------------------
# Configuration and parameters
# ---------------------------------------------------------------------------

@dataclass
class ModelConfig:
    vocab_size: int = 128
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 64
    n_options: int = 4
    max_len: int = 40
    dropout: float = 0.0
    seed: int = 7
    causal: bool = False

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.vocab_size <= len(SPECIAL_TOKENS):
            raise ConfigError(f"vocab_size must exceed the {len(SPECIAL_TOKENS)} reserved ids")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.max_len > MAX_SEQUENCE_LENGTH:
            raise ConfigError(f"max_len {self.max_len} exceeds the {MAX_SEQUENCE_LENGTH}-token cap")
        if self.n_options < 2:
            raise ConfigError(f"n_options must be at least 2, got {self.n_options}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, object]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(sorted(unknown))}")
        config = cls(**payload)
        config.validate()
        return config


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Declared parameter order and shapes; checkpoints follow this order."""
    d, f = config.d_model, config.d_ff
    shapes: Dict[str, Tuple[int, ...]] = {
        "embed.tokens": (config.vocab_size, d),
        "embed.positions": (config.max_len, d),
    }
    for layer in range(config.n_layers):
        p = f"layer{layer}."
        for proj in ("q", "k", "v", "o"):
            shapes[f"{p}attn.w_{proj}"] = (d, d)
            shapes[f"{p}attn.b_{proj}"] = (d,)
        shapes[f"{p}ln1.gain"] = (d,)
        shapes[f"{p}ln1.shift"] = (d,)
        shapes[f"{p}ff.w_in"] = (d, f)
        shapes[f"{p}ff.b_in"] = (f,)
        shapes[f"{p}ff.w_out"] = (f, d)
        shapes[f"{p}ff.b_out"] = (d,)
        shapes[f"{p}ln2.gain"] = (d,)
        shapes[f"{p}ln2.shift"] = (d,)
    shapes["answer.w"] = (d, config.n_options)
    shapes["answer.b"] = (config.n_options,)
    shapes["probe.w"] = (d, 2)
    shapes["probe.b"] = (2,)
    return shapes


def init_range(name: str, shape: Tuple[int, ...]) -> float:
    """Half-width of the uniform draw: INIT_RANGE for embeddings, fan-scaled for matrices."""
    if name.startswith("embed."):
        return INIT_RANGE
    return math.sqrt(6.0 / (shape[0] + shape[1]))


def init_params(config: ModelConfig) -> Dict[str, TensorNode]:
    """Uniform weights (see init_range), zero biases, unit layer-norm gains."""
    config.validate()
    rng = np.random.Generator(np.random.Philox(config.seed))
    params: Dict[str, TensorNode] = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            values = np.ones(shape)
        elif leaf == "shift" or leaf.startswith("b"):
            values = np.zeros(shape)
        else:
            limit = init_range(name, shape)
            values = rng.uniform(-limit, limit, size=shape)
        params[name] = T.parameter(values, name)
    return params


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

@dataclass
class ModelOutput:
    answer_logits: TensorNode          # (B, K)
    group_logits: TensorNode           # (B, 2)
    pooled: TensorNode                 # (B, d_model), CLS position
    attention: List[TensorNode]        # L tensors of shape (B, H, N, N), gradients retained
    embeddings: TensorNode             # (B, N, d_model), gradients retained

    def attention_values(self, index: int = 0) -> np.ndarray:
        """(L, H, N, N) attention stack of one batch element."""
        return np.stack([a.values[index] for a in self.attention])


class TransformerEncoder:
    """Masked multi-head attention encoder with answer and group-probe heads."""

    def __init__(self, config: ModelConfig, params: Optional[Dict[str, TensorNode]] = None):
        config.validate()
        self.config = config
        self.params = params if params is not None else init_params(config)

    def __getitem__(self, name: str) -> TensorNode:
        return self.params[name]

    def embed(self, ids: np.ndarray, rng: Optional[np.random.Generator] = None) -> TensorNode:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        if ids.shape[1] > self.config.max_len:
            raise SequenceTooLongError(f"sequence of {ids.shape[1]} exceeds max_len {self.config.max_len}")
        bad = (ids < 0) | (ids >= self.config.vocab_size)
        if bad.any():
            where = tuple(int(i) for i in np.argwhere(bad)[0])
            raise InvalidTokenIdError(
                f"token id {int(ids[where])} at {list(where)} outside vocabulary of {self.config.vocab_size}")
        tokens = T.scale(T.take_rows(self["embed.tokens"], ids), math.sqrt(self.config.d_model))
        positions = self["embed.positions"][0:ids.shape[1]]
        return T.dropout(tokens + positions, self.config.dropout, rng)

    def attention_layer(self, x: TensorNode, layer: int, mask: np.ndarray,
                        attention_override: Optional[np.ndarray] = None,
                        rng: Optional[np.random.Generator] = None) -> Tuple[TensorNode, TensorNode]:
        """One encoder block. Returns the block output and its (B, H, N, N) attention."""
        p = f"layer{layer}."
        batch, n, d = x.shape
        heads, d_k = self.config.n_heads, self.config.d_k

        def split_heads(t: TensorNode) -> TensorNode:
            return T.permute(T.reshape(t, (batch, n, heads, d_k)), (0, 2, 1, 3))

        q = split_heads(x @ self[p + "attn.w_q"] + self[p + "attn.b_q"])
        k = split_heads(x @ self[p + "attn.w_k"] + self[p + "attn.b_k"])
        v = split_heads(x @ self[p + "attn.w_v"] + self[p + "attn.b_v"])
        if attention_override is not None:
            attention = TensorNode(np.broadcast_to(attention_override, (batch, heads, n, n)))
        else:
            scores = T.scale(q @ T.swap_last(k), 1.0 / math.sqrt(d_k))
            attention = T.softmax_rows(scores, mask).retain_grad()
        context = T.reshape(T.permute(attention @ v, (0, 2, 1, 3)), (batch, n, d))
        attended = context @ self[p + "attn.w_o"] + self[p + "attn.b_o"]
        x = T.layer_norm(x + T.dropout(attended, self.config.dropout, rng),
                         self[p + "ln1.gain"], self[p + "ln1.shift"], LAYER_NORM_EPS)
        hidden = T.relu(x @ self[p + "ff.w_in"] + self[p + "ff.b_in"])
        ff = hidden @ self[p + "ff.w_out"] + self[p + "ff.b_out"]
        x = T.layer_norm(x + T.dropout(ff, self.config.dropout, rng),
                         self[p + "ln2.gain"], self[p + "ln2.shift"], LAYER_NORM_EPS)
        return x, attention

    def answer_head(self, pooled: TensorNode) -> TensorNode:
        return pooled @ self["answer.w"] + self["answer.b"]

    def group_probe(self, pooled: TensorNode) -> TensorNode:
        return pooled @ self["probe.w"] + self["probe.b"]

    def forward_embeddings(self, embeddings: TensorNode, valid: np.ndarray,
                           attention_override: Optional[Dict[int, np.ndarray]] = None,
                           rng: Optional[np.random.Generator] = None) -> ModelOutput:
        """Run the encoder from (possibly perturbed) input embeddings."""
        valid = np.atleast_2d(valid)
        mask = build_attention_mask(valid, self.config.causal)
        override = attention_override or {}
        x = embeddings
        stack = []
        for layer in range(self.config.n_layers):
            x, attention = self.attention_layer(x, layer, mask, override.get(layer), rng)
            stack.append(attention)
        pooled = x[:, 0, :]
        return ModelOutput(answer_logits=self.answer_head(pooled),
                           group_logits=self.group_probe(pooled),
                           pooled=pooled, attention=stack, embeddings=embeddings)

    def forward(self, ids: np.ndarray, valid: np.ndarray,
                attention_override: Optional[Dict[int, np.ndarray]] = None,
                rng: Optional[np.random.Generator] = None) -> ModelOutput:
        embeddings = self.embed(ids, rng).retain_grad()
        return self.forward_embeddings(embeddings, valid, attention_override, rng)

    def predict(self, ids: np.ndarray, valid: np.ndarray, chunk: int = 128) -> np.ndarray:
        """Argmax answers, evaluated in chunks."""
        ids, valid = np.atleast_2d(ids), np.atleast_2d(valid)
        predictions = []
        for start in range(0, ids.shape[0], chunk):
            logits = self.forward(ids[start:start + chunk], valid[start:start + chunk]).answer_logits
            predictions.append(np.argmax(logits.values, axis=-1))
        return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)

    def copy(self) -> "TransformerEncoder":
        return TransformerEncoder(self.config, {name: T.parameter(p.values, name)
                                                for name, p in self.params.items()})


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------
# magic (8 bytes) | version u32 | header length u32 | header JSON (utf-8)
# | parameters in declared order as little-endian float64

def save_checkpoint(model: TransformerEncoder, vocab: Vocabulary, path) -> Path:
    header = {
        "config": model.config.to_dict(),
        "vocabulary": vocab.words,
        "parameters": [{"name": name, "shape": list(p.shape)} for name, p in model.params.items()],
    }
    header_bytes = json.dumps(header, ensure_ascii=False).encode("utf-8")
    body = b"".join(np.ascontiguousarray(p.values, dtype="<f8").tobytes()
                    for p in model.params.values())
    payload = _PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)) + header_bytes + body
    return atomic_write_bytes(path, payload)


def load_checkpoint(path) -> Tuple[TransformerEncoder, Vocabulary]:
    try:
        with open(path, "rb") as handle:
            payload = handle.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    if len(payload) < _PREAMBLE.size:
        raise TruncatedCheckpointError(f"{path}: file ends inside the preamble")
    magic, version, header_len = _PREAMBLE.unpack_from(payload)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a ReadLens checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, this build reads version {CHECKPOINT_VERSION}")
    offset = _PREAMBLE.size
    if len(payload) < offset + header_len:
        raise TruncatedCheckpointError(f"{path}: file ends inside the header")
    try:
        header = json.loads(payload[offset:offset + header_len].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        vocab = Vocabulary(header["vocabulary"])
        declared = [(entry["name"], tuple(entry["shape"])) for entry in header["parameters"]]
    except (ValueError, KeyError, TypeError) as e:
        if isinstance(e, ValidationError):
            raise
        raise CheckpointFormatError(f"{path}: malformed header: {e}")
    if len(vocab) != config.vocab_size:
        raise CheckpointFormatError(
            f"{path}: vocabulary has {len(vocab)} ids but config says {config.vocab_size}")

    expected = parameter_shapes(config)
    if [name for name, _ in declared] != list(expected):
        raise CheckpointShapeError(f"{path}: parameter list does not match the stored config")
    for name, shape in declared:
        if shape != expected[name]:
            raise CheckpointShapeError(
                f"{path}: parameter '{name}' stored as {list(shape)}, config implies {list(expected[name])}")

    offset += header_len
    params: Dict[str, TensorNode] = {}
    for name, shape in declared:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(payload):
            raise TruncatedCheckpointError(f"{path}: file ends inside parameter '{name}'")
        values = np.frombuffer(payload[offset:end], dtype="<f8").reshape(shape)
        params[name] = T.parameter(values, name)
        offset = end
    if offset != len(payload):
        raise CheckpointFormatError(f"{path}: {len(payload) - offset} unexpected trailing bytes")
    return TransformerEncoder(config, params), vocab
