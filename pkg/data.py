"""
ReadLens synthetic reading-comprehension data.

Each generated item asks which value a passage assigns to a subject. The
passage hides one fact clause ("<subject> is <value>") among filler words;
the clause's content tokens are the gold rationale. A group marker token is
planted in every passage. In the train split that marker points at the gold
class with probability bias_strength, a spurious cue a model can lean on; in
dev and test it points at a uniformly random class.
"""

import json
import math
import re
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Set

import numpy as np

from errors import ValidationError
from storage import atomic_write_text, dumps_json, sha256_file, sha256_text, write_json

SPLITS = ("train", "dev", "test")
MANIFEST_NAME = "manifest.json"
DATASET_FORMAT = "readlens-dataset"
DATASET_VERSION = 1

FUNCTION_WORDS = ["what", "is", "the"]
TOPIC_VALUES = {
    "color": ["red", "blue", "green", "gold", "gray", "pink", "teal", "white"],
    "shape": ["round", "square", "flat", "tall", "oval", "long", "thin", "wide"],
    "mood": ["happy", "sad", "calm", "angry", "proud", "shy", "bold", "tired"],
}
SUBJECTS = ["kite", "boat", "lamp", "coat", "drum", "vase"]
REGIONS = ("north", "south")
VARIANT_SUFFIX = "ish"
MIN_FILLERS = 8
MARKER_PATTERN = re.compile(r"^(north|south)(\d+)$")


class DatasetError(ValidationError):
    """Base class for dataset file problems."""


class MalformedLineError(DatasetError):
    """A line of a JSONL file is not valid JSON."""


class InstanceValidationError(DatasetError):
    """A record violates an Instance invariant."""


class DuplicateIdError(DatasetError):
    """Two records share an id."""


class MissingSplitError(DatasetError):
    """A split file is absent from the dataset directory."""


class VocabularyTooSmallError(ValidationError):
    """The requested vocabulary cannot hold the template's tokens."""


class GeneratorSpecError(ValidationError):
    """A generator setting is out of range."""


@dataclass
class Instance:
    """One multiple-choice reading item with its group attribute and gold rationale."""

    id: str
    passage: List[str]
    question: List[str]
    options: List[List[str]]
    answer: int
    group: int
    rationale: List[int]

    def to_record(self) -> Dict[str, Any]:
        # key order is part of the file format
        return {
            "id": self.id,
            "passage": list(self.passage),
            "question": list(self.question),
            "options": [list(option) for option in self.options],
            "answer": self.answer,
            "group": self.group,
            "rationale": list(self.rationale),
        }

    def validate(self) -> None:
        problem = _instance_problem(self.to_record())
        if problem:
            field_name, message = problem
            raise InstanceValidationError(f"field '{field_name}': {message}")


@dataclass
class GeneratorSpec:
    n_train: int = 2000
    n_dev: int = 500
    n_test: int = 500
    vocab_size: int = 96
    passage_len: int = 24
    n_options: int = 4
    bias_strength: float = 0.9
    minority_share: float = 0.3
    seed: int = 42

    def split_sizes(self) -> Dict[str, int]:
        return {"train": self.n_train, "dev": self.n_dev, "test": self.n_test}

    def validate(self) -> None:
        if not 0.0 <= self.bias_strength <= 1.0:
            raise GeneratorSpecError(f"bias_strength must lie in [0, 1], got {self.bias_strength}")
        if not 0.0 <= self.minority_share <= 1.0:
            raise GeneratorSpecError(f"minority_share must lie in [0, 1], got {self.minority_share}")
        if self.n_options < 2:
            raise GeneratorSpecError(f"n_options must be at least 2, got {self.n_options}")
        if self.passage_len < 4:
            raise GeneratorSpecError(f"passage_len must be at least 4, got {self.passage_len}")
        for split, size in self.split_sizes().items():
            if size < 1:
                raise GeneratorSpecError(f"n_{split} must be at least 1, got {size}")
        needed = template_vocabulary_size(self.n_options) + MIN_FILLERS
        if self.vocab_size < needed:
            raise VocabularyTooSmallError(
                f"vocab_size {self.vocab_size} is too small for the template with "
                f"{self.n_options} options; need at least {needed}")


# ---------------------------------------------------------------------------
# Token inventory
# ---------------------------------------------------------------------------

def value_word(topic: str, cls: int) -> str:
    words = TOPIC_VALUES[topic]
    return words[cls] if cls < len(words) else f"{topic}{cls}"


def variant_word(topic: str, cls: int) -> str:
    return value_word(topic, cls) + VARIANT_SUFFIX


def marker_word(group: int, cls: int) -> str:
    return f"{REGIONS[group]}{cls}"


def template_vocabulary_size(n_options: int) -> int:
    return (len(FUNCTION_WORDS) + len(TOPIC_VALUES) + len(SUBJECTS)
            + 2 * len(TOPIC_VALUES) * n_options + len(REGIONS) * n_options)


def token_inventory(spec: GeneratorSpec) -> List[str]:
    """Every word the generator may emit, in a fixed order."""
    tokens = list(FUNCTION_WORDS) + list(TOPIC_VALUES) + list(SUBJECTS)
    for topic in TOPIC_VALUES:
        tokens += [value_word(topic, c) for c in range(spec.n_options)]
        tokens += [variant_word(topic, c) for c in range(spec.n_options)]
    for group in range(len(REGIONS)):
        tokens += [marker_word(group, c) for c in range(spec.n_options)]
    n_fillers = spec.vocab_size - len(tokens)
    width = max(3, len(str(n_fillers - 1)))
    tokens += [f"w{n:0{width}d}" for n in range(n_fillers)]
    return tokens


def filler_words(inventory: Sequence[str], spec: GeneratorSpec) -> List[str]:
    return list(inventory[template_vocabulary_size(spec.n_options):])


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _split_stream(seed: int, split_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, split_index])))


def _generate_split(spec: GeneratorSpec, split: str, fillers: List[str]) -> List[Instance]:
    rng = _split_stream(spec.seed, SPLITS.index(split))
    size = spec.split_sizes()[split]
    k = spec.n_options
    topics = list(TOPIC_VALUES)
    answers = rng.permutation(np.arange(size) % k)
    instances = []
    for index in range(size):
        answer = int(answers[index])
        topic = topics[int(rng.integers(len(topics)))]
        subject = SUBJECTS[int(rng.integers(len(SUBJECTS)))]
        group = 1 if rng.random() < spec.minority_share else 0
        value = value_word(topic, answer) if group == 0 else variant_word(topic, answer)

        if split == "train":
            if rng.random() < spec.bias_strength:
                cue = answer
            else:
                cue = int(rng.integers(k - 1))
                cue = cue + 1 if cue >= answer else cue
        else:
            cue = int(rng.integers(k))

        passage = [fillers[int(i)] for i in rng.integers(len(fillers), size=spec.passage_len)]
        start = int(rng.integers(spec.passage_len - 2))
        passage[start:start + 3] = [subject, "is", value]
        free = [pos for pos in range(spec.passage_len) if not start <= pos <= start + 2]
        passage[free[int(rng.integers(len(free)))]] = marker_word(group, cue)

        instances.append(Instance(
            id=f"{split}-{index:05d}",
            passage=passage,
            question=["what", topic, "is", "the", subject],
            options=[[value_word(topic, c)] for c in range(k)],
            answer=answer,
            group=group,
            rationale=[start, start + 2],
        ))
    return instances


def generate(spec: GeneratorSpec, out_dir, debug: bool = False) -> Dict[str, Any]:
    """Write train/dev/test JSONL files and a manifest; return the manifest."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inventory = token_inventory(spec)
    fillers = filler_words(inventory, spec)

    files: Dict[str, Dict[str, Any]] = {}
    for split in SPLITS:
        instances = _generate_split(spec, split, fillers)
        path = out / f"{split}.jsonl"
        atomic_write_text(path, "".join(dumps_json(inst.to_record()) + "\n" for inst in instances))
        files[split] = {"path": path.name, "sha256": sha256_file(path), "instances": len(instances)}
        if debug:
            print(f"Generated {len(instances)} {split} instances -> {path}", file=sys.stderr)

    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "spec": asdict(spec),
        "files": files,
        "vocabulary": inventory,
        "vocabulary_sha256": sha256_text("\n".join(inventory)),
    }
    write_json(out / MANIFEST_NAME, manifest)
    return manifest


# ---------------------------------------------------------------------------
# Loading and validation
# ---------------------------------------------------------------------------

def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_token_list(value: Any) -> bool:
    return isinstance(value, list) and len(value) > 0 and all(
        isinstance(token, str) and token for token in value)


def _instance_problem(record: Dict[str, Any]):
    """Return (field, message) for the first violated invariant, or None."""
    for key in ("id", "passage", "question", "options", "answer", "group", "rationale"):
        if key not in record:
            return key, "missing"
    if not isinstance(record["id"], str) or not record["id"]:
        return "id", "must be a non-empty string"
    if not _is_token_list(record["passage"]):
        return "passage", "must be a non-empty list of tokens"
    if not _is_token_list(record["question"]):
        return "question", "must be a non-empty list of tokens"
    options = record["options"]
    if not isinstance(options, list) or len(options) < 2 or not all(_is_token_list(o) for o in options):
        return "options", "must be at least two non-empty token lists"
    if not _is_int(record["answer"]) or not 0 <= record["answer"] < len(options):
        return "answer", f"must be an option index in [0, {len(options)})"
    if not _is_int(record["group"]) or record["group"] not in (0, 1):
        return "group", "must be 0 or 1"
    rationale = record["rationale"]
    if not isinstance(rationale, list) or not rationale or not all(_is_int(i) for i in rationale):
        return "rationale", "must be a non-empty list of integers"
    if rationale != sorted(set(rationale)):
        return "rationale", "must be sorted and free of duplicates"
    if rationale[0] < 0 or rationale[-1] >= len(record["passage"]):
        return "rationale", f"indices must lie in [0, {len(record['passage'])})"
    return None


def load(path) -> List[Instance]:
    """Read and validate a JSONL split file."""
    instances: List[Instance] = []
    seen: Dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedLineError(f"{path}:{line_no}: malformed JSON: {e}")
            if not isinstance(record, dict):
                raise MalformedLineError(f"{path}:{line_no}: expected a JSON object")
            problem = _instance_problem(record)
            if problem:
                field_name, message = problem
                raise InstanceValidationError(f"{path}:{line_no}: field '{field_name}' {message}")
            if record["id"] in seen:
                raise DuplicateIdError(
                    f"{path}:{line_no}: duplicate id '{record['id']}' (first seen on line {seen[record['id']]})")
            seen[record["id"]] = line_no
            instances.append(Instance(**{key: record[key] for key in
                                         ("id", "passage", "question", "options",
                                          "answer", "group", "rationale")}))
    return instances


def split_path(data_dir, split: str) -> Path:
    if split not in SPLITS:
        raise ValidationError(f"unknown split '{split}'; expected one of {', '.join(SPLITS)}")
    return Path(data_dir) / f"{split}.jsonl"


def load_split(data_dir, split: str) -> List[Instance]:
    path = split_path(data_dir, split)
    if not path.exists():
        raise MissingSplitError(f"split '{split}' not found: {path}")
    instances = load(path)
    if not instances:
        raise MissingSplitError(f"split '{split}' is empty: {path}")
    return instances


def read_manifest(data_dir) -> Optional[Dict[str, Any]]:
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        return None
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


# ---------------------------------------------------------------------------
# Dataset diagnostics
# ---------------------------------------------------------------------------

def marker_cue(instance: Instance) -> Optional[int]:
    """Class the planted marker points at, or None when no marker is present."""
    for token in instance.passage:
        match = MARKER_PATTERN.match(token)
        if match:
            return int(match.group(2))
    return None


def marker_label_mutual_information(instances: Sequence[Instance], n_options: int) -> float:
    """Empirical mutual information (nats) between marker cue and gold answer."""
    joint = np.zeros((n_options, n_options))
    for inst in instances:
        cue = marker_cue(inst)
        if cue is not None:
            joint[cue, inst.answer] += 1
    total = joint.sum()
    if total == 0:
        return 0.0
    joint /= total
    cue_marginal = joint.sum(axis=1, keepdims=True)
    answer_marginal = joint.sum(axis=0, keepdims=True)
    present = joint > 0
    return float(np.sum(joint[present] * np.log(joint[present] / (cue_marginal @ answer_marginal)[present])))


def label_balance(instances: Sequence[Instance], n_options: int) -> List[float]:
    counts = np.bincount([inst.answer for inst in instances], minlength=n_options)
    return (counts / max(1, len(instances))).tolist()


def answer_flip_oracle(instance: Instance, model, vocab) -> Set[int]:
    """Passage tokens whose replacement by UNK changes the predicted answer.

    Indices are passage-relative. Tokens cut off by truncation are never tested.
    """
    from model import UNK_ID, encode

    encoded = encode(instance, vocab, model.config.max_len)
    start, stop = encoded.passage_span
    batch = np.repeat(encoded.ids[None, :], 1 + (stop - start), axis=0)
    for row, position in enumerate(range(start, stop), start=1):
        batch[row, position] = UNK_ID
    valid = np.repeat(encoded.valid[None, :], batch.shape[0], axis=0)
    predictions = model.predict(batch, valid)
    return {position - start for row, position in enumerate(range(start, stop), start=1)
            if predictions[row] != predictions[0]}


def chi_square_independence(instances: Sequence[Instance], n_options: int) -> float:
    """Pearson chi-square statistic of the marker-cue x answer table."""
    table = np.zeros((n_options, n_options))
    for inst in instances:
        cue = marker_cue(inst)
        if cue is not None:
            table[cue, inst.answer] += 1
    total = table.sum()
    if total == 0:
        return 0.0
    expected = table.sum(axis=1, keepdims=True) @ table.sum(axis=0, keepdims=True) / total
    nonzero = expected > 0
    return float(np.sum((table[nonzero] - expected[nonzero]) ** 2 / expected[nonzero]))


def cramers_v(instances: Sequence[Instance], n_options: int) -> float:
    """Association strength in [0, 1] between marker cue and answer."""
    n = sum(1 for inst in instances if marker_cue(inst) is not None)
    if n == 0:
        return 0.0
    return math.sqrt(chi_square_independence(instances, n_options) / (n * (n_options - 1)))
