"""
ReadLens training loop and evaluation metrics.

Plain SGD (no momentum, no weight decay) over shuffled mini-batches, with the
debiasing objective switched in after its warm-up epochs. Every step appends a
loss record to log.jsonl; dev evaluations append report records. The test
split is never opened here.
"""

import itertools
import math
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np

import tensor as T
from data import Instance, load_split, read_manifest
from debias import DebiasConfig, NonFiniteLossError, debias_objective, fairness_penalty
from errors import ComputationError, ValidationError
from interpret import attention_highlights, attribute_batch, extract_highlights, normalize_attribution
from model import (CheckpointDataMismatchError, ModelConfig, SequenceTooLongError, TransformerEncoder,
                   Vocabulary, encode_batch, save_checkpoint)
from storage import append_jsonl, atomic_write_text

DEFAULT_ZETA = 1e-8
EVAL_CHUNK = 64
MAX_ENUMERATION = 2_000_000


class TrainConfigError(ValidationError):
    """A training hyperparameter is out of range."""


class MetricInputError(ValidationError):
    """Metric inputs are empty, misaligned or out of range."""


class MissingGroupError(MetricInputError):
    """A group needed for a per-group comparison has no instances."""


class NonFiniteGradientError(ComputationError):
    """A gradient buffer holds NaN or Inf."""


class TrainingDivergedError(ComputationError):
    """The training loss became non-finite."""


@dataclass
class TrainConfig:
    eta: float = 0.1
    batch_size: int = 16
    epochs: int = 20
    seed: int = 1234
    debias: bool = False
    eval_every: int = 0
    debias_cfg: DebiasConfig = field(default_factory=DebiasConfig)

    def validate(self) -> None:
        if not (math.isfinite(self.eta) and self.eta > 0):
            raise TrainConfigError(f"eta must be positive, got {self.eta}")
        if self.batch_size < 1:
            raise TrainConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 0:
            raise TrainConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.eval_every < 0:
            raise TrainConfigError(f"eval_every must be >= 0, got {self.eval_every}")
        if not 0 <= self.seed < 2 ** 64:
            raise TrainConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        self.debias_cfg.validate()


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def sgd_step(params: Mapping[str, T.TensorNode], eta: float,
             grads: Optional[Mapping[str, np.ndarray]] = None) -> None:
    """theta <- theta - eta * grad for every parameter; nothing moves if any grad is bad."""
    resolved = {}
    for name, param in params.items():
        grad = grads[name] if grads is not None else param.grad
        if grad is None:
            raise ComputationError(f"parameter '{name}' has no gradient; run backward first")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter '{name}'")
        resolved[name] = grad
    if eta == 0:
        return
    for name, param in params.items():
        param.assign(param.values - eta * resolved[name])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffled instance order for one epoch from a counter-based stream."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch])))
    return rng.permutation(n)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _paired(preds: Sequence[int], refs: Sequence[int]):
    preds, refs = np.asarray(preds, dtype=np.int64), np.asarray(refs, dtype=np.int64)
    if preds.shape != refs.shape:
        raise MetricInputError(f"{len(preds)} predictions for {len(refs)} references")
    if preds.size == 0:
        raise MetricInputError("metrics need at least one instance")
    return preds, refs


def accuracy(preds: Sequence[int], refs: Sequence[int]) -> float:
    preds, refs = _paired(preds, refs)
    return float(np.mean(preds == refs))


def macro_f1(preds: Sequence[int], refs: Sequence[int], n_classes: int,
             zeta: float = DEFAULT_ZETA) -> float:
    """(2/C) * sum_c P_c R_c / (P_c + R_c + zeta); empty denominators count as 0."""
    preds, refs = _paired(preds, refs)
    if zeta < 0:
        raise MetricInputError(f"zeta must be >= 0, got {zeta}")
    for label_set, name in ((preds, "prediction"), (refs, "reference")):
        if np.any(label_set < 0) or np.any(label_set >= n_classes):
            raise MetricInputError(f"{name} label outside [0, {n_classes})")
    total = 0.0
    for c in range(n_classes):
        hit = int(np.sum((preds == c) & (refs == c)))
        predicted, actual = int(np.sum(preds == c)), int(np.sum(refs == c))
        precision = hit / predicted if predicted else 0.0
        recall = hit / actual if actual else 0.0
        denominator = precision + recall + zeta
        if denominator > 0:
            total += precision * recall / denominator
    return 2.0 * total / n_classes


def jaccard(highlighted, rationale) -> float:
    h, r = set(highlighted), set(rationale)
    if not h and not r:
        return 1.0
    return len(h & r) / len(h | r)


def attention_alignment(highlight_sets: Sequence[Sequence[int]],
                        rationale_sets: Sequence[Sequence[int]]) -> float:
    """Mean Jaccard overlap between highlight and rationale sets."""
    if len(highlight_sets) != len(rationale_sets):
        raise MetricInputError(f"{len(highlight_sets)} highlight sets for {len(rationale_sets)} rationales")
    if not highlight_sets:
        raise MetricInputError("alignment needs at least one pair")
    return float(np.mean([jaccard(h, r) for h, r in zip(highlight_sets, rationale_sets)]))


@dataclass
class GroupAccuracy:
    acc_g0: float
    acc_g1: float
    gap: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def group_accuracy_gap(preds: Sequence[int], refs: Sequence[int],
                       groups: Sequence[int]) -> GroupAccuracy:
    preds, refs = _paired(preds, refs)
    groups = np.asarray(groups, dtype=np.int64)
    if groups.shape != preds.shape:
        raise MetricInputError(f"{len(groups)} group labels for {len(preds)} predictions")
    per_group = []
    for g in (0, 1):
        members = groups == g
        if not members.any():
            raise MissingGroupError(f"group {g} has no instances")
        per_group.append(float(np.mean(preds[members] == refs[members])))
    return GroupAccuracy(per_group[0], per_group[1], abs(per_group[0] - per_group[1]))


@dataclass
class BaselineStats:
    mean: float
    std: float
    trials: int


def permutation_baseline(passage_lengths: Sequence[int], rationale_sets: Sequence[Sequence[int]],
                         trials: int = 1000, seed: int = 0,
                         ks: Optional[Sequence[int]] = None) -> BaselineStats:
    """S_AA of uniformly random k-subsets per instance (k defaults to |R|)."""
    if trials < 100:
        raise MetricInputError(f"permutation baseline needs at least 100 trials, got {trials}")
    if len(passage_lengths) != len(rationale_sets):
        raise MetricInputError("one passage length per rationale set is required")
    ks = [len(r) for r in rationale_sets] if ks is None else list(ks)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))
    scores = np.empty(trials)
    for t in range(trials):
        drawn = [rng.choice(length, size=min(k, length), replace=False)
                 for length, k in zip(passage_lengths, ks)]
        scores[t] = attention_alignment(drawn, rationale_sets)
    return BaselineStats(float(scores.mean()), float(scores.std()), trials)


def exhaustive_alignment_baseline(passage_len: int, rationale: Sequence[int], k: int) -> float:
    """Exact expected Jaccard of a uniform random k-subset of the passage."""
    if not 1 <= k <= passage_len:
        raise MetricInputError(f"k must lie in [1, {passage_len}], got {k}")
    if math.comb(passage_len, k) > MAX_ENUMERATION:
        raise MetricInputError(f"C({passage_len}, {k}) subsets is too many to enumerate")
    values = [jaccard(subset, rationale) for subset in itertools.combinations(range(passage_len), k)]
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    alignment: float
    per_group_accuracy: Dict[str, float]
    group_gap: Optional[float]
    n_instances: int
    highlight_source: str
    alignment_by_source: Dict[str, float] = field(default_factory=dict)
    fairness_penalty: float = 0.0
    alignment_correct_only: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "alignment": self.alignment,
            "alignment_by_source": dict(self.alignment_by_source),
            "alignment_correct_only": self.alignment_correct_only,
            "per_group_accuracy": dict(self.per_group_accuracy),
            "group_gap": self.group_gap,
            "fairness_penalty": self.fairness_penalty,
            "n_instances": self.n_instances,
            "highlight_source": self.highlight_source,
        }


def visible_rationale(instance: Instance, passage_length: int) -> List[int]:
    """Rationale indices that survived passage truncation."""
    return [i for i in instance.rationale if i < passage_length]


def evaluate(model: TransformerEncoder, vocab: Vocabulary, instances: Sequence[Instance],
             attribution: bool = True, zeta: float = DEFAULT_ZETA) -> EvalReport:
    """Accuracy, macro-F1, alignment from both highlight sources, per-group accuracy.

    attribution=False skips the backward pass and reports attention alignment only.
    """
    if not instances:
        raise MetricInputError("cannot evaluate an empty split")
    n_classes = model.config.n_options
    mismatched = [inst for inst in instances if len(inst.options) != n_classes]
    if mismatched:
        raise CheckpointDataMismatchError(
            f"instance '{mismatched[0].id}' has {len(mismatched[0].options)} options, "
            f"the model was built for {n_classes}")
    ids, valid, encoded = encode_batch(instances, vocab, model.config.max_len)

    predictions, probabilities = [], []
    by_source: Dict[str, List[List[int]]] = {"attention": []}
    if attribution:
        by_source["attribution"] = []
    for start in range(0, len(instances), EVAL_CHUNK):
        chunk = slice(start, start + EVAL_CHUNK)
        if attribution:
            attr, preds, output = attribute_batch(model, ids[chunk], valid[chunk])
        else:
            output = model.forward(ids[chunk], valid[chunk])
            preds = np.argmax(output.answer_logits.values, axis=-1)
        predictions.append(preds)
        probabilities.append(T.softmax(output.answer_logits.values).values)
        for row, enc in enumerate(encoded[chunk]):
            k = max(1, len(visible_rationale(instances[start + row], enc.passage_length)))
            by_source["attention"].append(attention_highlights(output.attention_values(row),
                                                               enc.passage_span, k))
            if attribution:
                scores, _ = normalize_attribution(attr[row])
                by_source["attribution"].append(extract_highlights(scores, enc.passage_span, k))

    preds = np.concatenate(predictions)
    refs = np.array([inst.answer for inst in instances])
    groups = np.array([inst.group for inst in instances])
    rationales = [visible_rationale(inst, enc.passage_length) for inst, enc in zip(instances, encoded)]
    alignment_by_source = {source: attention_alignment(sets, rationales) for source, sets in by_source.items()}
    source = "attribution" if attribution else "attention"

    correct = np.flatnonzero(preds == refs)
    correct_only = None
    if correct.size:
        correct_only = attention_alignment([by_source[source][i] for i in correct],
                                           [rationales[i] for i in correct])

    per_group = {str(g): float(np.mean(preds[groups == g] == refs[groups == g]))
                 for g in (0, 1) if np.any(groups == g)}
    gap = abs(per_group["0"] - per_group["1"]) if len(per_group) == 2 else None
    penalty, _ = fairness_penalty(np.concatenate(probabilities), groups)

    return EvalReport(accuracy=accuracy(preds, refs), macro_f1=macro_f1(preds, refs, n_classes, zeta),
                      alignment=alignment_by_source[source], per_group_accuracy=per_group,
                      group_gap=gap, n_instances=len(instances), highlight_source=source,
                      alignment_by_source=alignment_by_source, fairness_penalty=penalty.item(),
                      alignment_correct_only=correct_only)


def _flatten(report: Mapping[str, Any], prefix: str = "") -> Dict[str, float]:
    flat = {}
    for key, value in report.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(_flatten(value, name + "."))
        elif isinstance(value, (int, float)) and not isinstance(value, bool):
            flat[name] = float(value)
    return flat


def aggregate_reports(reports: Sequence[Mapping[str, Any]]) -> Dict[str, Dict[str, float]]:
    """Mean and population std of every numeric report field across runs."""
    if not reports:
        raise MetricInputError("nothing to aggregate")
    columns: Dict[str, List[float]] = {}
    for report in reports:
        for name, value in _flatten(report).items():
            if name != "n_instances":
                columns.setdefault(name, []).append(value)
    return {name: {"mean": float(np.mean(values)), "std": float(np.std(values)), "n": len(values)}
            for name, values in sorted(columns.items())}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def dataset_vocabulary(data_dir, instances: Sequence[Instance]) -> Vocabulary:
    """Vocabulary from the manifest inventory, or from the given instances without one."""
    manifest = read_manifest(data_dir)
    if manifest and manifest.get("vocabulary"):
        vocab = Vocabulary(manifest["vocabulary"])
        expected = manifest.get("vocabulary_sha256")
        if expected and vocab.digest() != expected:
            raise CheckpointDataMismatchError(f"{data_dir}: manifest vocabulary does not match its digest")
        return vocab
    return Vocabulary.from_instances(instances)


@dataclass
class TrainResult:
    steps: int
    best_dev_accuracy: Optional[float]
    best_path: Path
    final_path: Path
    log_path: Path
    model: TransformerEncoder = field(repr=False)


class Trainer:
    """Deterministic training run writing checkpoints and a JSON-lines log into out_dir."""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, data_dir, out_dir,
                 debug: bool = False):
        train_cfg.validate()
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.data_dir = Path(data_dir)
        self.out_dir = Path(out_dir)
        self.debug = debug
        self.log_path = self.out_dir / "log.jsonl"
        self.best_accuracy: Optional[float] = None

    def _log(self, record: Dict[str, Any]) -> None:
        append_jsonl(self.log_path, record)

    def _evaluate_dev(self, model, vocab, dev, step: int, epoch: int) -> None:
        report = evaluate(model, vocab, dev, attribution=False)
        self._log({"step": step, "epoch": epoch, "eval": "dev", **report.to_dict()})
        if self.best_accuracy is None or report.accuracy > self.best_accuracy:
            self.best_accuracy = report.accuracy
            save_checkpoint(model, vocab, self.out_dir / "best.ckpt")
        if self.debug:
            print(f"[train] step {step}: dev accuracy {report.accuracy:.4f}, "
                  f"gap {report.group_gap}", file=sys.stderr)

    def _diverged(self, model, vocab, good: Dict[str, np.ndarray], message: str,
                  cause: Optional[Exception] = None):
        restored = TransformerEncoder(model.config, {name: T.parameter(values, name)
                                                     for name, values in good.items()})
        save_checkpoint(restored, vocab, self.out_dir / "last_good.ckpt")
        raise TrainingDivergedError(f"{message}; last good parameters saved to "
                                    f"{self.out_dir / 'last_good.ckpt'}") from cause

    def run(self) -> TrainResult:
        train = load_split(self.data_dir, "train")
        dev = load_split(self.data_dir, "dev")
        vocab = dataset_vocabulary(self.data_dir, list(train) + list(dev))
        n_options = len(train[0].options)
        model_cfg = replace(self.model_cfg, vocab_size=len(vocab), n_options=n_options)
        model = TransformerEncoder(model_cfg)
        ids, valid, _ = encode_batch(train, vocab, model_cfg.max_len)
        answers = np.array([inst.answer for inst in train], dtype=np.int64)
        groups = np.array([inst.group for inst in train], dtype=np.int64)

        self.out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_text(self.log_path, "")
        self.best_accuracy = None
        # parameter arrays are replaced, never mutated, so holding references is a snapshot
        good = {name: p.values for name, p in model.params.items()}
        step = 0
        for epoch in range(self.cfg.epochs):
            order = epoch_order(len(train), self.cfg.seed, epoch)
            dropout_rng = (np.random.Generator(np.random.Philox(np.random.SeedSequence([self.cfg.seed, epoch, 1])))
                           if model_cfg.dropout > 0 else None)
            for start in range(0, len(order), self.cfg.batch_size):
                batch = order[start:start + self.cfg.batch_size]
                T.zero_grad(model.params)
                record: Dict[str, Any] = {"step": step, "epoch": epoch}
                if self.cfg.debias:
                    active = epoch >= self.cfg.debias_cfg.warmup_epochs
                    try:
                        objective, breakdown = debias_objective(model, ids[batch], valid[batch], answers[batch],
                                                                groups[batch], self.cfg.debias_cfg, active,
                                                                dropout_rng)
                    except NonFiniteLossError as e:
                        self._diverged(model, vocab, good, f"step {step}: {e}", e)
                    record.update(breakdown.to_log())
                else:
                    output = model.forward(ids[batch], valid[batch], rng=dropout_rng)
                    objective = T.cross_entropy(output.answer_logits, answers[batch])
                    record.update(comp=objective.item(), total=objective.item())
                if not math.isfinite(objective.item()):
                    self._diverged(model, vocab, good, f"loss became {objective.item()} at step {step}")
                good = {name: p.values for name, p in model.params.items()}
                T.backward(objective)
                try:
                    sgd_step(model.params, self.cfg.eta)
                except NonFiniteGradientError as e:
                    self._diverged(model, vocab, good, f"step {step}: {e}", e)
                self._log(record)
                step += 1
                if self.cfg.eval_every and step % self.cfg.eval_every == 0:
                    self._evaluate_dev(model, vocab, dev, step, epoch)
            if not self.cfg.eval_every:
                self._evaluate_dev(model, vocab, dev, step, epoch)
            if self.debug:
                print(f"[train] epoch {epoch + 1}/{self.cfg.epochs} done ({step} steps)", file=sys.stderr)
        if self.cfg.eval_every and step % self.cfg.eval_every:
            self._evaluate_dev(model, vocab, dev, step, self.cfg.epochs - 1)

        final_path = save_checkpoint(model, vocab, self.out_dir / "final.ckpt")
        best_path = self.out_dir / "best.ckpt"
        if self.best_accuracy is None:
            save_checkpoint(model, vocab, best_path)
        return TrainResult(steps=step, best_dev_accuracy=self.best_accuracy, best_path=best_path,
                           final_path=final_path, log_path=self.log_path, model=model)


def check_checkpoint_data(model: TransformerEncoder, vocab: Vocabulary, data_dir,
                          instances: Sequence[Instance]) -> None:
    """Refuse to score a split the checkpoint was not built for."""
    manifest = read_manifest(data_dir)
    expected = (manifest or {}).get("vocabulary_sha256")
    if expected and expected != vocab.digest():
        raise CheckpointDataMismatchError(
            f"{data_dir}: dataset vocabulary differs from the checkpoint's "
            f"(digest {expected[:12]} vs {vocab.digest()[:12]})")
    for inst in instances:
        if len(inst.options) != model.config.n_options:
            raise CheckpointDataMismatchError(
                f"instance '{inst.id}' has {len(inst.options)} options, "
                f"the checkpoint expects {model.config.n_options}")
    try:
        encode_batch(instances, vocab, model.config.max_len)
    except SequenceTooLongError as e:
        raise CheckpointDataMismatchError(str(e))
