"""
ReadLens debiasing objective.

The bias loss is the cross-entropy of an auxiliary group probe on the pooled
representation. Its input gradient gives the direction that makes the group
most detectable; the embeddings are pushed lambda along its sign, and a KL
term asks the answer distribution to stay put. A soft demographic-parity
penalty on per-class mean probabilities is added on top.
"""

import math
from dataclasses import dataclass, replace
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

import tensor as T
from errors import ComputationError, ValidationError
from tensor import TensorNode

PERTURBATION_TARGETS = ("probe", "task")
IDENTITY_TOLERANCE = 1e-9
NEGATIVE_SLACK = 1e-12

Scalar = Union[TensorNode, float]


class DebiasConfigError(ValidationError):
    """A debias weight is negative, non-finite or unknown."""


class InvalidGroupLabelError(ValidationError):
    """Group labels must be 0 or 1."""


class NegativeLossComponentError(ValidationError):
    """A loss term that must be non-negative came out negative."""


class NonFiniteLossError(ComputationError):
    """A loss term came out NaN or infinite."""


@dataclass
class DebiasConfig:
    lam: float = 0.05
    alpha: float = 1.0
    beta: float = 0.5
    warmup_epochs: int = 1
    perturbation_target: str = "probe"

    def validate(self) -> None:
        for name in ("lam", "alpha", "beta"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise DebiasConfigError(f"{name} must be finite and >= 0, got {value}")
        if self.warmup_epochs < 0:
            raise DebiasConfigError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.perturbation_target not in PERTURBATION_TARGETS:
            raise DebiasConfigError(
                f"perturbation_target must be one of {PERTURBATION_TARGETS}, got {self.perturbation_target!r}")

    def inactive(self) -> "DebiasConfig":
        """Same config with the adversarial and fairness weights switched off (warm-up)."""
        return replace(self, alpha=0.0, beta=0.0)


@dataclass
class LossBreakdown:
    comp: float
    kl: float
    fair: float
    bias: float
    total: float
    total_node: Optional[TensorNode] = None
    single_group: bool = False

    def to_log(self) -> Dict[str, float]:
        return {"comp": self.comp, "kl": self.kl, "fair": self.fair,
                "bias": self.bias, "total": self.total}


def _check_groups(groups: Sequence[int]) -> np.ndarray:
    groups = np.atleast_1d(np.asarray(groups))
    bad = ~np.isin(groups, (0, 1))
    if bad.any():
        index = int(np.argmax(bad))
        raise InvalidGroupLabelError(f"group label {groups[index]!r} at position {index} is not 0 or 1")
    return groups.astype(np.int64)


def bias_loss(group_logits, group_label) -> TensorNode:
    """Cross-entropy of the group probe against the group label(s)."""
    return T.cross_entropy(group_logits, _check_groups(group_label))


def perturbation_offsets(grad_bias: np.ndarray, lam: float,
                         valid: Optional[np.ndarray] = None) -> np.ndarray:
    """lam * sign(grad); rows that are PAD (valid == False) get no offset."""
    if lam < 0:
        raise DebiasConfigError(f"lambda must be >= 0, got {lam}")
    offsets = lam * np.sign(np.asarray(grad_bias, dtype=np.float64))
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != offsets.shape[:-1]:
            raise T.ShapeMismatchError(
                f"valid mask {list(valid.shape)} does not match embeddings {list(offsets.shape)}")
        offsets = offsets * valid[..., None]
    return offsets


def perturb_embeddings(x_emb, grad_bias, lam: float, valid: Optional[np.ndarray] = None):
    """x + lam * sign(grad_bias).

    A TensorNode input yields a node whose gradient flows back into x while
    the offset stays constant; a plain array yields an array.
    """
    x_shape = x_emb.shape if isinstance(x_emb, TensorNode) else np.shape(x_emb)
    if tuple(x_shape) != tuple(np.shape(grad_bias)):
        raise T.ShapeMismatchError(
            f"embeddings {list(x_shape)} and bias gradient {list(np.shape(grad_bias))} differ")
    offsets = perturbation_offsets(grad_bias, lam, valid)
    if isinstance(x_emb, TensorNode):
        return x_emb + TensorNode(offsets)
    return np.asarray(x_emb, dtype=np.float64) + offsets


def fairness_penalty(answer_probs, groups: Sequence[int]) -> Tuple[TensorNode, bool]:
    """Sum over classes of the squared gap between group mean probabilities.

    Returns (penalty, single_group); a batch holding one group scores 0.
    """
    answer_probs = T.as_node(answer_probs)
    groups = _check_groups(groups)
    if answer_probs.values.ndim != 2 or answer_probs.shape[0] != groups.shape[0]:
        raise T.ShapeMismatchError(
            f"{groups.shape[0]} group labels for probabilities of shape {list(answer_probs.shape)}")
    sums = answer_probs.values.sum(axis=-1)
    off = np.abs(sums - 1.0) > T.PROBABILITY_TOLERANCE
    if off.any():
        row = int(np.argmax(off))
        raise T.InvalidDistributionError(f"probability row {row} sums to {sums[row]!r}, not 1")
    n0, n1 = int((groups == 0).sum()), int((groups == 1).sum())
    if n0 == 0 or n1 == 0:
        return TensorNode(0.0), True
    weights = np.where(groups == 0, 1.0 / n0, -1.0 / n1)[None, :]
    gap = TensorNode(weights) @ answer_probs
    return T.sum(T.square(gap)), False


def _scalar_value(x: Scalar) -> float:
    return x.item() if isinstance(x, TensorNode) else float(x)


def assemble_total(comp: Scalar, kl: Scalar, fair: Scalar, cfg: DebiasConfig) -> Scalar:
    """comp + beta * kl + alpha * fair, as a node when any input is a node."""
    if any(isinstance(x, TensorNode) for x in (comp, kl, fair)):
        return T.as_node(comp) + T.scale(T.as_node(kl), cfg.beta) + T.scale(T.as_node(fair), cfg.alpha)
    return float(comp) + cfg.beta * float(kl) + cfg.alpha * float(fair)


def composite_loss(comp: Scalar, p_clean, p_adv, fair: Scalar, cfg: DebiasConfig,
                   bias: Scalar = 0.0, single_group: bool = False) -> LossBreakdown:
    cfg.validate()
    kl = T.kl_divergence(p_clean, p_adv)
    values = {"comp": _scalar_value(comp), "kl": kl.item(), "fair": _scalar_value(fair),
              "bias": _scalar_value(bias)}
    for name, value in values.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(f"{name} is not finite: {value!r}")
        if value < -NEGATIVE_SLACK:
            raise NegativeLossComponentError(f"{name} must be non-negative, got {value!r}")
    total = assemble_total(comp, kl, fair, cfg)
    total_value = _scalar_value(total)
    expected = values["comp"] + cfg.beta * values["kl"] + cfg.alpha * values["fair"]
    if abs(total_value - expected) > IDENTITY_TOLERANCE * max(1.0, abs(expected)):
        raise ComputationError(f"total {total_value!r} != comp + beta*kl + alpha*fair = {expected!r}")
    return LossBreakdown(total=total_value, total_node=total if isinstance(total, TensorNode) else None,
                         single_group=single_group, **values)


def _sensitive_gradient(model, clean, comp: TensorNode, groups: np.ndarray,
                        cfg: DebiasConfig) -> np.ndarray:
    """Input-embedding gradient of the perturbation target; leaf grads are restored."""
    sensitive = bias_loss(clean.group_logits, groups) if cfg.perturbation_target == "probe" else comp
    saved = {name: p.grad for name, p in model.params.items()}
    T.backward(sensitive)
    grad_emb = clean.embeddings.grad.copy()
    for name, p in model.params.items():
        p.grad = saved[name]
    return grad_emb


def perturbation_direction(model, ids: np.ndarray, valid: np.ndarray, answers: Sequence[int],
                           groups: Sequence[int], cfg: DebiasConfig,
                           rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """lam * sign(grad) offsets at the current parameters, for holding the direction fixed."""
    clean = model.forward(ids, valid, rng=rng)
    comp = T.cross_entropy(clean.answer_logits, answers)
    grad_emb = _sensitive_gradient(model, clean, comp, _check_groups(groups), cfg)
    return perturbation_offsets(grad_emb, cfg.lam, valid)


def debias_objective(model, ids: np.ndarray, valid: np.ndarray, answers: Sequence[int],
                     groups: Sequence[int], cfg: DebiasConfig, active: bool = True,
                     rng: Optional[np.random.Generator] = None,
                     offsets: Optional[np.ndarray] = None) -> Tuple[TensorNode, LossBreakdown]:
    """Build the training objective for one batch.

    Returns (objective, breakdown) where objective = total + probe loss. The
    probe is trained on the detached pooled vector, so only the probe's own
    weights learn from it. Leaf gradient buffers are left as they were found.
    Precomputed offsets (see perturbation_direction) replace the per-call
    sign of the sensitive gradient.
    """
    cfg = cfg if active else cfg.inactive()
    groups = _check_groups(groups)
    clean = model.forward(ids, valid, rng=rng)
    comp = T.cross_entropy(clean.answer_logits, answers)
    probe_loss = bias_loss(model.group_probe(clean.pooled.detach()), groups)

    if offsets is None:
        grad_emb = _sensitive_gradient(model, clean, comp, groups, cfg)
        adversarial_input = perturb_embeddings(clean.embeddings, grad_emb, cfg.lam, valid)
    else:
        if tuple(np.shape(offsets)) != clean.embeddings.shape:
            raise T.ShapeMismatchError(
                f"offsets {list(np.shape(offsets))} do not match embeddings {list(clean.embeddings.shape)}")
        adversarial_input = clean.embeddings + TensorNode(offsets)
    adversarial = model.forward_embeddings(adversarial_input, valid, rng=rng)
    p_clean = T.softmax(clean.answer_logits)
    p_adv = T.softmax(adversarial.answer_logits)
    fair, single = fairness_penalty(p_clean, groups)
    breakdown = composite_loss(comp, p_clean, p_adv, fair, cfg, bias=probe_loss.item(),
                               single_group=single)
    return breakdown.total_node + probe_loss, breakdown
