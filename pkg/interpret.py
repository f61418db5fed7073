"""
ReadLens interpretation layer.

Attention heatmap enhancement, gradient x attention token attribution,
z-normalization for cross-instance comparison, highlight extraction and the
heatmap exports (exact CSV plus a reportlab drawing rendered to SVG).
"""

import csv
import io
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from reportlab.graphics import renderSVG
from reportlab.graphics.shapes import Drawing, Group, Rect, String
from reportlab.lib import colors

import tensor as T
from errors import ComputationError, ValidationError
from storage import atomic_write_text, write_json

HEATMAP_HUE = colors.HexColor("#08519C")
CELL_SIZE = 18.0
LABEL_FONT = "Helvetica"
LABEL_SIZE = 7.0
DEGENERATE_SIGMA = 1e-12


class HeatmapConfigError(ValidationError):
    """gamma/epsilon or a view selector is out of range."""


class InvalidAttentionError(ValidationError):
    """An attention matrix has negative or non-finite entries."""


class AttributionStateError(ComputationError):
    """Attention gradients are missing because backward() has not run."""


class EmptyAttributionError(ValidationError):
    """normalize_attribution() needs at least one score."""


@dataclass
class HeatmapConfig:
    gamma: float = 2.0
    epsilon: float = 1e-8
    layer: Union[int, str] = "mean-final"
    head: Union[int, str] = "mean"

    def validate(self) -> None:
        if not self.gamma > 0:
            raise HeatmapConfigError(f"gamma must be positive, got {self.gamma}")
        if not self.epsilon >= 0:
            raise HeatmapConfigError(f"epsilon must be non-negative, got {self.epsilon}")
        if isinstance(self.layer, str) and self.layer not in ("mean-final", "final", "mean"):
            raise HeatmapConfigError(f"layer must be an index, 'mean-final' or 'mean', got {self.layer!r}")
        if isinstance(self.head, str) and self.head != "mean":
            raise HeatmapConfigError(f"head must be an index or 'mean', got {self.head!r}")


@dataclass
class AttributionResult:
    attr: np.ndarray
    scores: np.ndarray
    mu: float
    sigma: float
    target_class: int
    passage_span: Tuple[int, int]
    degenerate: bool = False
    instance_id: Optional[str] = None
    highlights: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "target_class": self.target_class,
            "attr": self.attr.tolist(),
            "scores": self.scores.tolist(),
            "degenerate_flag": self.degenerate,
            "highlights": list(self.highlights),
            "mu": self.mu,
            "sigma": self.sigma,
            "passage_span": list(self.passage_span),
        }


# ---------------------------------------------------------------------------
# Heatmap enhancement
# ---------------------------------------------------------------------------

def enhance_heatmap(attention: np.ndarray, cfg: HeatmapConfig) -> np.ndarray:
    """H[i, j] = A[i, j]^gamma / (epsilon + sum_k A[i, k]^gamma)."""
    cfg.validate()
    attention = np.asarray(attention, dtype=np.float64)
    if not np.all(np.isfinite(attention)):
        raise InvalidAttentionError("attention contains non-finite entries")
    if np.any(attention < 0):
        raise InvalidAttentionError("attention contains negative entries")
    if cfg.gamma == 1.0 and cfg.epsilon == 0.0:
        # identity; renormalizing would move row sums that are not exactly 1.0
        return attention.copy()
    powered = attention ** cfg.gamma
    return powered / (cfg.epsilon + powered.sum(axis=-1, keepdims=True))


def select_view(stack: np.ndarray, cfg: HeatmapConfig) -> np.ndarray:
    """Pick one N x N map out of an (L, H, N, N) attention stack."""
    cfg.validate()
    stack = np.asarray(stack)
    layers, heads = stack.shape[0], stack.shape[1]
    if isinstance(cfg.layer, str):
        per_layer = stack.mean(axis=0) if cfg.layer == "mean" else stack[-1]
    else:
        if not 0 <= cfg.layer < layers:
            raise HeatmapConfigError(f"layer {cfg.layer} outside [0, {layers})")
        per_layer = stack[cfg.layer]
    if isinstance(cfg.head, str):
        return per_layer.mean(axis=0)
    if not 0 <= cfg.head < heads:
        raise HeatmapConfigError(f"head {cfg.head} outside [0, {heads})")
    return per_layer[cfg.head]


# ---------------------------------------------------------------------------
# Attribution
# ---------------------------------------------------------------------------

def attribution_from_stack(attention: Sequence[T.TensorNode], reduce: str = "column") -> np.ndarray:
    """Sum gradient x attention over layers, heads and one matrix axis.

    reduce="column" attributes to the attended-to token (sum over queries);
    reduce="row" attributes to the attending token. Returns shape (B, N).
    """
    if reduce not in ("column", "row"):
        raise ValidationError(f"reduce must be 'column' or 'row', got {reduce!r}")
    axis = 2 if reduce == "column" else 3
    total = None
    for layer, node in enumerate(attention):
        if node.grad is None:
            raise AttributionStateError(
                f"attention of layer {layer} has no gradient; run backward on the target logit first")
        contribution = (node.grad * node.values).sum(axis=(1, axis))
        total = contribution if total is None else total + contribution
    return total


def attribute_batch(model, ids: np.ndarray, valid: np.ndarray,
                    targets: Optional[Sequence[int]] = None,
                    reduce: str = "column") -> Tuple[np.ndarray, np.ndarray, Any]:
    """Raw attributions for a batch; y* defaults to each row's argmax logit.

    Rows are independent in the encoder, so one backward of the summed target
    logits yields every row's own gradient. Returns (attr, targets, output).
    """
    ids, valid = np.atleast_2d(ids), np.atleast_2d(valid)
    output = model.forward(ids, valid)
    logits = output.answer_logits.values
    if targets is None:
        targets = np.argmax(logits, axis=-1)
    targets = np.asarray(targets, dtype=np.int64)
    if np.any(targets < 0) or np.any(targets >= logits.shape[-1]):
        raise ValidationError(f"target class must lie in [0, {logits.shape[-1]})")
    objective = T.sum(T.gather(output.answer_logits, np.arange(ids.shape[0]), targets))
    T.backward(objective)
    attr = attribution_from_stack(output.attention, reduce)
    for param in model.params.values():
        param.grad = None
    return attr, targets, output


def normalize_attribution(attr: Sequence[float]) -> Tuple[np.ndarray, bool]:
    """Z-score with population sigma. Returns (scores, degenerate)."""
    attr = np.asarray(attr, dtype=np.float64)
    if attr.size == 0:
        raise EmptyAttributionError("cannot normalize an empty attribution vector")
    mu, sigma = attr.mean(), attr.std()
    if sigma < DEGENERATE_SIGMA:
        return np.zeros_like(attr), True
    return (attr - mu) / sigma, False


def attribute_tokens(model, encoded, target: Optional[int] = None, reduce: str = "column",
                     instance_id: Optional[str] = None) -> AttributionResult:
    """Attribution result for one encoded instance."""
    attr, targets, _ = attribute_batch(model, encoded.ids, encoded.valid,
                                       None if target is None else [target], reduce)
    raw = attr[0]
    scores, degenerate = normalize_attribution(raw)
    return AttributionResult(attr=raw, scores=scores, mu=float(raw.mean()), sigma=float(raw.std()),
                             target_class=int(targets[0]), passage_span=tuple(encoded.passage_span),
                             degenerate=degenerate, instance_id=instance_id)


def extract_highlights(scores: Sequence[float], passage_span: Tuple[int, int], k: int) -> List[int]:
    """Passage-relative indices of the k highest scores; ties go to the lower index."""
    start, stop = passage_span
    if stop <= start:
        raise ValidationError("passage span is empty")
    if k < 1:
        raise ValidationError(f"k must be at least 1, got {k}")
    passage = np.asarray(scores, dtype=np.float64)[start:stop]
    ranked = sorted(range(len(passage)), key=lambda i: (-passage[i], i))
    return sorted(ranked[:min(k, len(passage))])


def attention_highlights(stack: np.ndarray, passage_span: Tuple[int, int], k: int) -> List[int]:
    """Highlights from the final layer's head-averaged CLS attention row."""
    cls_row = np.asarray(stack)[-1].mean(axis=0)[0]
    return extract_highlights(cls_row, passage_span, k)


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def heatmap_csv(matrix: np.ndarray, row_tokens: Sequence[str], col_tokens: Sequence[str]) -> str:
    matrix = np.asarray(matrix, dtype=np.float64)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["token"] + list(col_tokens))
    for token, row in zip(row_tokens, matrix):
        writer.writerow([token] + [repr(float(value)) for value in row])
    return buffer.getvalue()


def read_heatmap_csv(path) -> Tuple[np.ndarray, List[str], List[str]]:
    with open(path, "r", encoding="utf-8", newline="") as handle:
        rows = list(csv.reader(handle))
    col_tokens = rows[0][1:]
    row_tokens = [row[0] for row in rows[1:]]
    matrix = np.array([[float(cell) for cell in row[1:]] for row in rows[1:]], dtype=np.float64)
    return matrix, row_tokens, col_tokens


def cell_color(value: float, low: float, high: float) -> colors.Color:
    """White at the minimum, full hue at the maximum, linear in between."""
    t = 0.0 if high <= low else (value - low) / (high - low)
    return colors.Color(1.0 - t * (1.0 - HEATMAP_HUE.red),
                        1.0 - t * (1.0 - HEATMAP_HUE.green),
                        1.0 - t * (1.0 - HEATMAP_HUE.blue))


def heatmap_drawing(matrix: np.ndarray, row_tokens: Sequence[str], col_tokens: Sequence[str],
                    cell: float = CELL_SIZE) -> Drawing:
    """N x N grid with token labels on both axes and a min/max legend."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if not np.all(np.isfinite(matrix)):
        raise InvalidAttentionError("heatmap contains non-finite values")
    rows, cols = matrix.shape
    low, high = float(matrix.min()), float(matrix.max())
    label_width = 6 + LABEL_SIZE * 0.6 * max([len(t) for t in list(row_tokens) + list(col_tokens)] + [1])
    legend_height = 30.0
    width = label_width + cols * cell + 10
    height = legend_height + rows * cell + label_width
    drawing = Drawing(width, height)
    top = legend_height + rows * cell

    for i in range(rows):
        y = top - (i + 1) * cell
        drawing.add(String(label_width - 4, y + cell / 2 - LABEL_SIZE / 3, str(row_tokens[i]),
                           fontName=LABEL_FONT, fontSize=LABEL_SIZE, textAnchor="end"))
        for j in range(cols):
            drawing.add(Rect(label_width + j * cell, y, cell, cell, strokeColor=None,
                             fillColor=cell_color(matrix[i, j], low, high)))
    for j in range(cols):
        label = Group(String(0, 0, str(col_tokens[j]), fontName=LABEL_FONT, fontSize=LABEL_SIZE))
        label.translate(label_width + (j + 0.5) * cell + LABEL_SIZE / 3, top + 4)
        label.rotate(90)
        drawing.add(label)

    steps = 10
    bar_width = min(cols * cell, 150.0)
    for s in range(steps):
        value = low + (high - low) * s / (steps - 1)
        drawing.add(Rect(label_width + s * bar_width / steps, 8, bar_width / steps, 8,
                         strokeColor=None, fillColor=cell_color(value, low, high)))
    drawing.add(String(label_width, 20, f"{low:.3g}", fontName=LABEL_FONT, fontSize=LABEL_SIZE))
    drawing.add(String(label_width + bar_width, 20, f"{high:.3g}", fontName=LABEL_FONT,
                       fontSize=LABEL_SIZE, textAnchor="end"))
    return drawing


def render_heatmap(matrix: np.ndarray, row_tokens: Sequence[str], col_tokens: Sequence[str],
                   csv_path, svg_path) -> None:
    """Write the exact CSV and the SVG rendering of one heatmap."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (len(row_tokens), len(col_tokens)):
        raise ValidationError(
            f"heatmap of shape {list(matrix.shape)} needs {matrix.shape[0]} row and "
            f"{matrix.shape[1]} column labels")
    drawing = heatmap_drawing(matrix, row_tokens, col_tokens)
    try:
        atomic_write_text(csv_path, heatmap_csv(matrix, row_tokens, col_tokens))
        atomic_write_text(svg_path, renderSVG.drawToString(drawing))
    except OSError as e:
        raise ValidationError(f"cannot write heatmap: {e}")


def write_attribution_json(path, result: AttributionResult) -> None:
    write_json(path, result.to_dict())
