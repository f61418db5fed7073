"""
ReadLens tensor engine.

A small reverse-mode differentiation layer over float64 numpy arrays. Every
operation returns a TensorNode that remembers the operation that produced it
(an OpRecord); backward() walks those records from a scalar loss and fills in
gradient buffers for leaf parameters and for any intermediate flagged with
retain_grad() (attention matrices are the reason this flag exists).

The graph is rebuilt on every forward pass. Values are read-only once computed.
"""

import sys
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ComputationError, ValidationError

MASK_VALUE = -1e9
PROBABILITY_TOLERANCE = 1e-6
KL_CLAMP = 1e-12


class NonScalarLossError(ValidationError):
    """backward() was called on a tensor with more than one element."""


class GraphReuseError(ComputationError):
    """backward() was called twice on the same loss without reset()."""


class FullyMaskedRowError(ValidationError):
    """An attention row has no valid position left after masking."""


class InvalidMaskError(ValidationError):
    """Mask entries must be 0 or a large negative constant."""


class ShapeMismatchError(ValidationError):
    """Operands do not have compatible shapes."""


class InvalidDistributionError(ValidationError):
    """A probability vector is negative or does not sum to one."""


class GradientCheckError(ComputationError):
    """Analytic and finite-difference gradients disagree."""


ArrayLike = Union[float, int, Sequence, np.ndarray]


@dataclass
class OpRecord:
    """Provenance of a computed tensor: op name, inputs and the local backward rule."""

    name: str
    parents: Tuple["TensorNode", ...]
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class TensorNode:
    """Dense float64 value participating in a reverse-mode gradient graph."""

    def __init__(self, values: ArrayLike, requires_grad: bool = False,
                 name: Optional[str] = None, op: Optional[OpRecord] = None):
        data = np.array(values, dtype=np.float64)
        data.setflags(write=False)
        self.values = data
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self.grad: Optional[np.ndarray] = None
        self.retain = False
        self._backward_done = False

    def __repr__(self):
        label = self.name or (self.op.name if self.op else "leaf")
        return f"<TensorNode {label} shape={list(self.shape)}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def item(self) -> float:
        if self.values.size != 1:
            raise NonScalarLossError(f"item() needs a single element, got shape {list(self.shape)}")
        return float(self.values.reshape(()))

    def retain_grad(self) -> "TensorNode":
        """Keep this intermediate's gradient after backward()."""
        self.retain = True
        return self

    def detach(self) -> "TensorNode":
        return TensorNode(self.values, requires_grad=False, name=self.name)

    def assign(self, values: ArrayLike) -> None:
        """Replace a leaf's values (parameter update). Shape must not change."""
        if self.op is not None:
            raise ValidationError(f"assign() is only valid on leaf tensors, not {self!r}")
        data = np.array(values, dtype=np.float64)
        if data.shape != self.values.shape:
            raise ShapeMismatchError(
                f"cannot assign shape {list(data.shape)} to {self.name or 'tensor'} "
                f"of shape {list(self.shape)}")
        data.setflags(write=False)
        self.values = data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def reset(self) -> None:
        """Forget a completed backward() so the graph can be differentiated again."""
        for node in _topological_order(self):
            if node.op is not None:
                node.grad = None
        self._backward_done = False

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return select(self, index)

    def __truediv__(self, other):
        if isinstance(other, TensorNode):
            raise ValidationError("division by a tensor is not supported; divide by a constant")
        return scale(self, 1.0 / float(other))


def as_node(value: Union[TensorNode, ArrayLike]) -> TensorNode:
    return value if isinstance(value, TensorNode) else TensorNode(value)


def parameter(values: ArrayLike, name: str) -> TensorNode:
    return TensorNode(values, requires_grad=True, name=name)


def _result(values: np.ndarray, parents: Sequence[TensorNode], name: str,
            backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]) -> TensorNode:
    requires = any(p.requires_grad for p in parents)
    op = OpRecord(name, tuple(parents), backward) if requires else None
    return TensorNode(values, requires_grad=requires, op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and structural operations
# ---------------------------------------------------------------------------

def add(a, b) -> TensorNode:
    a, b = as_node(a), as_node(b)
    return _result(a.values + b.values, (a, b), "add",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> TensorNode:
    a, b = as_node(a), as_node(b)
    return _result(a.values - b.values, (a, b), "sub",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> TensorNode:
    a, b = as_node(a), as_node(b)
    return _result(a.values * b.values, (a, b), "mul",
                   lambda g: (_unbroadcast(g * b.values, a.shape),
                              _unbroadcast(g * a.values, b.shape)))


def scale(a, factor: float) -> TensorNode:
    a = as_node(a)
    factor = float(factor)
    return _result(a.values * factor, (a,), "scale", lambda g: (g * factor,))


def matmul(a, b) -> TensorNode:
    a, b = as_node(a), as_node(b)
    if a.shape[-1] != b.shape[-2 if b.values.ndim > 1 else 0]:
        raise ShapeMismatchError(f"matmul: {list(a.shape)} @ {list(b.shape)}")

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.values, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result(np.matmul(a.values, b.values), (a, b), "matmul", backward)


def swap_last(a) -> TensorNode:
    a = as_node(a)
    return _result(np.swapaxes(a.values, -1, -2), (a,), "swap_last",
                   lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape: Sequence[int]) -> TensorNode:
    a = as_node(a)
    return _result(a.values.reshape(tuple(shape)), (a,), "reshape",
                   lambda g: (g.reshape(a.shape),))


def permute(a, axes: Sequence[int]) -> TensorNode:
    a = as_node(a)
    inverse = tuple(int(i) for i in np.argsort(axes))
    return _result(np.transpose(a.values, tuple(axes)), (a,), "permute",
                   lambda g: (np.transpose(g, inverse),))


def select(a, index) -> TensorNode:
    """Basic (slice / integer) indexing."""
    a = as_node(a)

    def backward(g):
        full = np.zeros_like(a.values)
        full[index] += g
        return (full,)

    return _result(a.values[index], (a,), "select", backward)


def gather(a, rows: Sequence[int], cols: Sequence[int]) -> TensorNode:
    """Pick a[rows[i], cols[i]] from a 2-D tensor."""
    a = as_node(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.values)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _result(a.values[rows, cols], (a,), "gather", backward)


def take_rows(weight, ids: np.ndarray) -> TensorNode:
    """Embedding lookup: weight[ids] with scatter-add backward."""
    weight = as_node(weight)
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(weight.values)
        np.add.at(full, ids, g)
        return (full,)

    return _result(weight.values[ids], (weight,), "take_rows", backward)


def relu(a) -> TensorNode:
    a = as_node(a)
    active = a.values > 0
    return _result(np.where(active, a.values, 0.0), (a,), "relu", lambda g: (g * active,))


def exp(a) -> TensorNode:
    a = as_node(a)
    out = np.exp(a.values)
    return _result(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> TensorNode:
    a = as_node(a)
    return _result(np.log(a.values), (a,), "log", lambda g: (g / a.values,))


def square(a) -> TensorNode:
    a = as_node(a)
    return _result(a.values * a.values, (a,), "square", lambda g: (2.0 * g * a.values,))


def sum(a, axis=None, keepdims: bool = False) -> TensorNode:  # noqa: A001 - mirrors numpy
    a = as_node(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.sum(a.values, axis=axis, keepdims=keepdims), (a,), "sum", backward)


def mean(a, axis=None, keepdims: bool = False) -> TensorNode:
    a = as_node(a)
    count = a.values.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def dropout(a, rate: float, rng: Optional[np.random.Generator]) -> TensorNode:
    """Inverted dropout; identity when rate is 0 or no generator is supplied."""
    a = as_node(a)
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _result(a.values * keep, (a,), "dropout", lambda g: (g * keep,))


def layer_norm(x, gain, shift, eps: float = 1e-5) -> TensorNode:
    """Normalize over the last axis with learned gain and shift."""
    x, gain, shift = as_node(x), as_node(gain), as_node(shift)
    centered = x.values - x.values.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std

    def backward(g):
        g_normed = g * gain.values
        g_x = inv_std * (g_normed
                         - g_normed.mean(axis=-1, keepdims=True)
                         - normed * (g_normed * normed).mean(axis=-1, keepdims=True))
        return (g_x,
                _unbroadcast(g * normed, gain.shape),
                _unbroadcast(g, shift.shape))

    return _result(normed * gain.values + shift.values, (x, gain, shift), "layer_norm", backward)


# ---------------------------------------------------------------------------
# Softmax family and losses
# ---------------------------------------------------------------------------

def _softmax_values(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=-1, keepdims=True)


def _softmax_backward(out: np.ndarray):
    return lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def softmax(a) -> TensorNode:
    a = as_node(a)
    out = _softmax_values(a.values)
    return _result(out, (a,), "softmax", _softmax_backward(out))


def softmax_rows(scores, mask: Optional[np.ndarray] = None) -> TensorNode:
    """Row-wise softmax of scores + additive mask (0 = valid, MASK_VALUE = masked)."""
    scores = as_node(scores)
    if mask is None:
        masked = scores.values
    else:
        mask = np.asarray(mask, dtype=np.float64)
        try:
            full_mask = np.broadcast_to(mask, scores.shape)
        except ValueError:
            raise ShapeMismatchError(
                f"mask shape {list(mask.shape)} does not fit scores {list(scores.shape)}")
        valid = full_mask > MASK_VALUE / 2
        if np.any(valid & (full_mask != 0.0)):
            raise InvalidMaskError("mask entries must be 0 (valid) or a large negative constant")
        empty_rows = ~valid.any(axis=-1)
        if empty_rows.any():
            where = tuple(int(i) for i in np.argwhere(empty_rows)[0])
            raise FullyMaskedRowError(
                f"attention row {where[-1]} is fully masked (index {list(where)})")
        masked = scores.values + full_mask
    out = _softmax_values(masked)
    return _result(out, (scores,), "softmax_rows", _softmax_backward(out))


def log_softmax(a) -> TensorNode:
    a = as_node(a)
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - log_norm
    probs = np.exp(out)
    return _result(out, (a,), "log_softmax",
                   lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits, targets: Sequence[int]) -> TensorNode:
    """Mean negative log-likelihood of integer targets under softmax(logits)."""
    logits = as_node(logits)
    values = logits.values if logits.values.ndim == 2 else logits.values.reshape(1, -1)
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if targets.shape[0] != values.shape[0]:
        raise ShapeMismatchError(f"{targets.shape[0]} targets for {values.shape[0]} rows of logits")
    if np.any(targets < 0) or np.any(targets >= values.shape[1]):
        raise ValidationError(f"targets must lie in [0, {values.shape[1]})")
    rows = np.arange(values.shape[0])
    shifted = values - values.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    loss = -log_probs[rows, targets].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return ((grad * (g / values.shape[0])).reshape(logits.shape),)

    return _result(loss, (logits,), "cross_entropy", backward)


def _check_distribution(values: np.ndarray, label: str) -> None:
    if np.any(values < 0):
        raise InvalidDistributionError(f"{label} has negative entries")
    sums = values.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > PROBABILITY_TOLERANCE):
        raise InvalidDistributionError(
            f"{label} rows must sum to 1 within {PROBABILITY_TOLERANCE}, got {sums.tolist()}")


def kl_divergence(p, q) -> TensorNode:
    """KL(p || q) in nats over the last axis, averaged over any leading rows."""
    p, q = as_node(p), as_node(q)
    if p.shape != q.shape:
        raise ShapeMismatchError(f"kl_divergence: p {list(p.shape)} vs q {list(q.shape)}")
    _check_distribution(p.values, "p")
    _check_distribution(q.values, "q")
    rows = p.values.size // p.shape[-1]
    present = p.values > 0
    q_safe = np.maximum(q.values, KL_CLAMP)
    p_safe = np.where(present, p.values, 1.0)
    terms = np.where(present, p.values * np.log(p_safe / q_safe), 0.0)
    value = terms.sum() / rows

    def backward(g):
        g = float(np.asarray(g).reshape(())) / rows
        grad_p = np.where(present, np.log(p_safe / q_safe) + 1.0, 0.0) * g
        grad_q = np.where(q.values >= KL_CLAMP, -p.values / q_safe, 0.0) * g
        return grad_p, grad_q

    return _result(value, (p, q), "kl_divergence", backward)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: TensorNode) -> List[TensorNode]:
    """Parents before children, restricted to nodes that require gradients."""
    order: List[TensorNode] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.op is not None:
            for parent in node.op.parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: TensorNode) -> Dict[TensorNode, np.ndarray]:
    """Populate gradients of a scalar loss.

    Leaf gradients accumulate into existing buffers (call zero_grad between
    steps). Interior gradients are recomputed on every call and kept only for
    nodes flagged with retain_grad(). Returns the map of leaf and retained
    gradients.
    """
    if loss.values.size != 1:
        raise NonScalarLossError(f"backward() needs a scalar loss, got shape {list(loss.shape)}")
    if loss._backward_done:
        raise GraphReuseError("backward() already ran on this loss; call reset() first")
    gradients: Dict[TensorNode, np.ndarray] = {}
    if not loss.requires_grad:
        loss._backward_done = True
        return gradients

    order = _topological_order(loss)
    for node in order:
        if node.op is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.values)

    for node in reversed(order):
        if node.op is None or node.grad is None:
            continue
        for parent, grad in zip(node.op.parents, node.op.backward(node.grad)):
            if grad is None or not parent.requires_grad:
                continue
            parent.grad = grad if parent.grad is None else parent.grad + grad

    for node in order:
        if node.op is None:
            if node.grad is not None:
                gradients[node] = node.grad
        elif node.retain or node is loss:
            gradients[node] = node.grad
        else:
            node.grad = None
    loss._backward_done = True
    return gradients


def zero_grad(params: Mapping[str, TensorNode]) -> None:
    for param in params.values():
        param.zero_grad()


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradReport:
    """Analytic vs central-difference gradients for a set of parameters."""

    suite: str
    analytic: Dict[str, np.ndarray]
    numeric: Dict[str, np.ndarray]
    per_parameter: Dict[str, float]
    max_rel_error: float
    worst_parameter: Optional[str]
    n_checked: int
    n_below_resolution: int
    max_abs_error_below_resolution: float = 0.0
    tolerance: float = 1e-4
    absolute_tolerance: float = 1e-8
    step: float = 1e-5
    checked_entries: Dict[str, List[int]] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return (self.max_rel_error <= self.tolerance
                and self.max_abs_error_below_resolution <= self.absolute_tolerance)

    def to_dict(self) -> Dict[str, object]:
        return {
            "suite": self.suite,
            "passed": self.passed,
            "max_rel_error": self.max_rel_error,
            "worst_parameter": self.worst_parameter,
            "tolerance": self.tolerance,
            "step": self.step,
            "n_checked": self.n_checked,
            "n_below_resolution": self.n_below_resolution,
            "max_abs_error_below_resolution": self.max_abs_error_below_resolution,
            "absolute_tolerance": self.absolute_tolerance,
            "per_parameter": dict(self.per_parameter),
        }


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(
        np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)


def gradient_check(loss_fn: Callable[[], TensorNode], params: Mapping[str, TensorNode],
                   seed: int = 0, step: float = 1e-5, entries_per_param: int = 16,
                   resolution: float = 1e-6, tolerance: float = 1e-4, absolute_tolerance: float = 1e-8,
                   corrupt: Optional[str] = None, suite: str = "custom",
                   debug: bool = False) -> GradReport:
    """Compare backward() against central finite differences.

    loss_fn must rebuild the graph from the current parameter values on every
    call. Each parameter array is probed on a seeded sample of entries
    (entries_per_param=0 probes all of them). Entries whose analytic and
    numeric gradients both fall below resolution are left out of the relative
    maximum; they must instead agree to within absolute_tolerance.
    """
    if corrupt is not None and corrupt not in params:
        raise ValidationError(f"cannot corrupt unknown parameter '{corrupt}'")
    rng = np.random.Generator(np.random.Philox(seed))

    for param in params.values():
        param.zero_grad()
    backward(loss_fn())
    analytic_full = {name: param.grad.copy() for name, param in params.items()}
    if corrupt is not None:
        flat = analytic_full[corrupt].reshape(-1)
        flat[0] += 1e-2 * (abs(flat[0]) + 1.0)

    analytic: Dict[str, np.ndarray] = {}
    numeric: Dict[str, np.ndarray] = {}
    per_parameter: Dict[str, float] = {}
    chosen: Dict[str, List[int]] = {}
    worst, worst_name = 0.0, None
    n_checked = n_below = 0
    worst_below = 0.0

    for name, param in params.items():
        size = param.values.size
        if entries_per_param and size > entries_per_param:
            entries = np.sort(rng.choice(size, entries_per_param, replace=False))
        else:
            entries = np.arange(size)
        if corrupt == name and 0 not in entries:
            entries = np.concatenate([[0], entries])
        original = param.values.copy()
        estimates = np.empty(len(entries))
        for slot, flat_index in enumerate(entries):
            bumped = original.copy().reshape(-1)
            bumped[flat_index] += step
            param.assign(bumped.reshape(original.shape))
            upper = loss_fn().item()
            bumped[flat_index] -= 2.0 * step
            param.assign(bumped.reshape(original.shape))
            lower = loss_fn().item()
            estimates[slot] = (upper - lower) / (2.0 * step)
        param.assign(original)

        exact = analytic_full[name].reshape(-1)[entries]
        errors = relative_error(exact, estimates)
        resolved = np.maximum(np.abs(exact), np.abs(estimates)) >= resolution
        n_checked += len(entries)
        n_below += int((~resolved).sum())
        if not resolved.all():
            worst_below = max(worst_below, float(np.abs(exact - estimates)[~resolved].max()))
        param_worst = float(errors[resolved].max()) if resolved.any() else 0.0
        per_parameter[name] = param_worst
        analytic[name], numeric[name] = exact, estimates
        chosen[name] = [int(i) for i in entries]
        if worst_name is None or param_worst > worst:
            worst, worst_name = param_worst, name
        if debug:
            print(f"[gradcheck:{suite}] {name}: max rel error {param_worst:.3e} "
                  f"over {len(entries)} entries", file=sys.stderr)

    report = GradReport(suite=suite, analytic=analytic, numeric=numeric,
                        per_parameter=per_parameter, max_rel_error=worst,
                        worst_parameter=worst_name, n_checked=n_checked,
                        n_below_resolution=n_below, max_abs_error_below_resolution=worst_below,
                        tolerance=tolerance, absolute_tolerance=absolute_tolerance, step=step,
                        checked_entries=chosen)
    for param in params.values():
        param.grad = None
    return report
