#!/usr/bin/env python3
"""
Tests for heatmap enhancement, token attribution, normalization, highlights and exports.
"""

import math
import sys
import tempfile
from pathlib import Path

import numpy as np
from reportlab.graphics.shapes import Rect

import interpret as I
import model as M
from data import Instance

TINY = M.ModelConfig(vocab_size=8, d_model=4, n_heads=1, n_layers=1, d_ff=6,
                     n_options=3, max_len=4, seed=5)


def _randomized(config, seed):
    encoder = M.TransformerEncoder(config)
    rng = np.random.Generator(np.random.Philox(seed))
    for name, node in encoder.params.items():
        node.assign(rng.uniform(-0.6, 0.6, size=node.shape) + (1.0 if name.endswith("gain") else 0.0))
    return encoder


def _random_stochastic(rng, n):
    raw = rng.random((n, n)) + 1e-3
    return raw / raw.sum(axis=1, keepdims=True)


def test_enhance_heatmap_worked_row():
    out = I.enhance_heatmap(np.array([[0.5, 0.25, 0.25]]), I.HeatmapConfig(gamma=2.0, epsilon=0.0))
    assert np.allclose(out, [[2 / 3, 1 / 6, 1 / 6]], atol=1e-12)


def test_enhance_heatmap_identity_and_epsilon():
    rng = np.random.Generator(np.random.Philox(1))
    attention = _random_stochastic(rng, 5)
    same = I.enhance_heatmap(attention, I.HeatmapConfig(gamma=1.0, epsilon=0.0))
    assert np.array_equal(same, attention) and same is not attention
    # rows whose float sum is not exactly 1.0 come back untouched
    drifted = np.array([[0.1, 0.2, 0.7000000000000001], [1 / 3, 1 / 3, 1 / 3]])
    assert np.array_equal(I.enhance_heatmap(drifted, I.HeatmapConfig(gamma=1.0, epsilon=0.0)), drifted)
    halved = I.enhance_heatmap(attention, I.HeatmapConfig(gamma=1.0, epsilon=1.0))
    assert np.allclose(halved, attention / 2.0, atol=1e-12)


def test_enhance_heatmap_rows_and_ranking():
    rng = np.random.Generator(np.random.Philox(2))
    for gamma in (0.5, 1.0, 2.0, 4.0):
        attention = _random_stochastic(rng, 6)
        out = I.enhance_heatmap(attention, I.HeatmapConfig(gamma=gamma, epsilon=0.0))
        assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-9)
        for row in range(6):
            assert np.array_equal(np.argsort(attention[row], kind="stable"),
                                  np.argsort(out[row], kind="stable"))


def test_enhance_heatmap_rejects_bad_input():
    for attention, cfg in ((np.array([[1.2, -0.2]]), I.HeatmapConfig()),
                           (np.array([[0.5, 0.5]]), I.HeatmapConfig(gamma=0.0)),
                           (np.array([[np.nan, 1.0]]), I.HeatmapConfig())):
        try:
            I.enhance_heatmap(attention, cfg)
        except (I.InvalidAttentionError, I.HeatmapConfigError):
            continue
        raise AssertionError(f"enhance_heatmap accepted {attention.tolist()} with {cfg}")


def test_select_view():
    stack = np.arange(2 * 2 * 3 * 3, dtype=float).reshape(2, 2, 3, 3)
    assert np.array_equal(I.select_view(stack, I.HeatmapConfig()), stack[-1].mean(axis=0))
    assert np.array_equal(I.select_view(stack, I.HeatmapConfig(layer="mean", head=1)), stack.mean(axis=0)[1])
    assert np.array_equal(I.select_view(stack, I.HeatmapConfig(layer=0, head=0)), stack[0, 0])
    try:
        I.select_view(stack, I.HeatmapConfig(layer=2))
    except I.HeatmapConfigError:
        pass
    else:
        raise AssertionError("layer index 2 accepted for a 2-layer stack")


def test_normalize_attribution_values():
    scores, degenerate = I.normalize_attribution([1.0, 2.0, 3.0])
    root = math.sqrt(1.5)
    assert not degenerate
    assert np.allclose(scores, [-root, 0.0, root], atol=1e-12)
    assert abs(scores[2] - 1.2247) < 1e-4

    scores, degenerate = I.normalize_attribution([5.0, 5.0, 5.0])
    assert degenerate
    assert scores.tolist() == [0.0, 0.0, 0.0]


def test_normalize_attribution_properties():
    rng = np.random.Generator(np.random.Philox(8))
    for _ in range(50):
        attr = rng.normal(scale=rng.uniform(0.01, 10.0), size=int(rng.integers(2, 40)))
        scores, degenerate = I.normalize_attribution(attr)
        assert not degenerate
        assert abs(scores.mean()) <= 1e-9
        assert abs(scores.std() - 1.0) <= 1e-6
        shifted, _ = I.normalize_attribution(3.0 * attr + 7.0)
        assert np.allclose(shifted, scores, atol=1e-9, rtol=0)


def test_normalize_attribution_empty():
    try:
        I.normalize_attribution([])
    except I.EmptyAttributionError:
        pass
    else:
        raise AssertionError("empty attribution accepted")


def test_extract_highlights_ordering_and_ties():
    scores = np.array([9.0, 9.0, 5.0, 4.0, 3.0, 2.0])
    assert I.extract_highlights(scores, (2, 6), 2) == [0, 1]
    tied = np.array([0.0, 0.0, 0.1, 0.2, 0.9, 0.9, 0.5, 0.9])
    # passage positions 2, 3 and 5 share the top score; k=2 keeps the two lowest
    assert I.extract_highlights(tied, (2, 8), 2) == [2, 3]
    assert I.extract_highlights([0.0, 1.0, 0.5, 0.9, 0.2, 0.9], (0, 6), 2) == [1, 3]
    assert I.extract_highlights([0.3, 0.1], (0, 2), 5) == [0, 1]


def test_extract_highlights_matches_sort_oracle():
    rng = np.random.Generator(np.random.Philox(13))
    for _ in range(100):
        n = int(rng.integers(4, 30))
        scores = rng.normal(size=n)
        start = int(rng.integers(0, 3))
        expected = sorted(int(i) for i in np.argsort(-scores[start:], kind="stable")[:3])
        assert I.extract_highlights(scores, (start, n), 3) == expected
        assert I.extract_highlights(np.exp(scores), (start, n), 3) == expected


def test_extract_highlights_rejects_bad_arguments():
    for span, k in (((3, 3), 1), ((0, 3), 0)):
        try:
            I.extract_highlights([1.0, 2.0, 3.0], span, k)
        except I.ValidationError:
            continue
        raise AssertionError(f"span {span} with k={k} accepted")


def test_attribution_matches_finite_difference_oracle():
    encoder = _randomized(TINY, 31)
    ids = np.array([[M.CLS_ID, 5, M.SEP_ID, M.PAD_ID]])
    valid = ids != M.PAD_ID
    attr, targets, output = I.attribute_batch(encoder, ids, valid)
    attention = output.attention[0].values[0, 0]
    target = int(targets[0])
    assert target == int(np.argmax(output.answer_logits.values[0]))

    step = 1e-5
    oracle = np.zeros(4)
    for j in range(4):
        for i in range(4):
            values = []
            for sign in (1.0, -1.0):
                bumped = attention.copy()
                bumped[j, i] += sign * step
                out = encoder.forward(ids, valid, attention_override={0: bumped})
                values.append(out.answer_logits.values[0, target])
            oracle[i] += (values[0] - values[1]) / (2 * step) * attention[j, i]
    assert np.allclose(attr[0], oracle, atol=1e-8, rtol=0)


def test_attribution_pad_positions_are_zero():
    config = M.ModelConfig(vocab_size=12, d_model=8, n_heads=2, n_layers=2, d_ff=12,
                           n_options=3, max_len=9, seed=4)
    encoder = _randomized(config, 5)
    ids = np.array([[M.CLS_ID, 5, 6, M.SEP_ID, 7, 8, M.SEP_ID, M.PAD_ID, M.PAD_ID]])
    valid = ids != M.PAD_ID
    attr, _, _ = I.attribute_batch(encoder, ids, valid)
    assert np.all(np.abs(attr[0, 7:]) <= 1e-9)
    assert np.any(np.abs(attr[0, :7]) > 0)


def test_attribution_scales_with_answer_head():
    encoder = _randomized(TINY, 17)
    ids = np.array([[M.CLS_ID, 6, M.SEP_ID, M.PAD_ID]])
    valid = ids != M.PAD_ID
    base, targets, _ = I.attribute_batch(encoder, ids, valid)
    encoder["answer.w"].assign(encoder["answer.w"].values * 3.0)
    encoder["answer.b"].assign(encoder["answer.b"].values * 3.0)
    scaled, scaled_targets, _ = I.attribute_batch(encoder, ids, valid)
    assert scaled_targets.tolist() == targets.tolist()
    assert np.allclose(scaled, 3.0 * base, atol=1e-12, rtol=1e-9)


def test_attribute_tokens_result():
    vocab = M.Vocabulary(["q", "p"])
    inst = Instance(id="dev-1", passage=["p"], question=["q"], options=[["q"], ["p"], ["q"]],
                    answer=1, group=0, rationale=[0, 1])
    config = M.ModelConfig(**{**TINY.to_dict(), "vocab_size": len(vocab), "max_len": 6})
    encoded = M.encode(inst, vocab, config.max_len, include_options=False)
    encoder = _randomized(config, 3)
    result = I.attribute_tokens(encoder, encoded, target=2, instance_id=inst.id)
    assert result.target_class == 2
    assert result.passage_span == (3, 4)
    payload = result.to_dict()
    assert set(payload) == {"instance_id", "target_class", "attr", "scores", "degenerate_flag",
                            "highlights", "mu", "sigma", "passage_span"}
    assert abs(result.mu - float(np.mean(result.attr))) <= 1e-12
    assert abs(result.sigma - float(np.std(result.attr))) <= 1e-12


def test_missing_gradients_raise():
    encoder = M.TransformerEncoder(TINY)
    ids = np.array([[M.CLS_ID, 5, M.SEP_ID, M.PAD_ID]])
    output = encoder.forward(ids, ids != M.PAD_ID)
    try:
        I.attribution_from_stack(output.attention)
    except I.AttributionStateError:
        pass
    else:
        raise AssertionError("attribution without backward was accepted")


def test_attention_highlights_use_cls_row():
    stack = np.zeros((2, 2, 5, 5))
    stack[-1, :, 0] = [0.0, 0.1, 0.6, 0.2, 0.1]
    assert I.attention_highlights(stack, (1, 5), 2) == [1, 2]


def test_heatmap_csv_round_trip():
    matrix = np.array([[1.0, 0.0], [1 / 3, 2 / 3]])
    with tempfile.TemporaryDirectory() as tmp:
        csv_path, svg_path = Path(tmp) / "h.csv", Path(tmp) / "h.svg"
        I.render_heatmap(matrix, ["[CLS]", "cat"], ["[CLS]", "cat"], csv_path, svg_path)
        lines = csv_path.read_text(encoding="utf-8").splitlines()
        parsed, rows, cols = I.read_heatmap_csv(csv_path)
        svg = svg_path.read_text(encoding="utf-8")
    assert lines[0] == "token,[CLS],cat"
    assert sum(len(line.split(",")) - 1 for line in lines[1:]) == 4
    assert np.array_equal(parsed, matrix)
    assert rows == cols == ["[CLS]", "cat"]
    assert "<svg" in svg


def test_heatmap_label_mismatch():
    with tempfile.TemporaryDirectory() as tmp:
        try:
            I.render_heatmap(np.eye(2), ["a"], ["a", "b"], Path(tmp) / "h.csv", Path(tmp) / "h.svg")
        except I.ValidationError:
            return
    raise AssertionError("mismatched labels accepted")


def test_constant_heatmap_single_fill():
    drawing = I.heatmap_drawing(np.full((3, 3), 0.25), ["a", "b", "c"], ["a", "b", "c"])
    fills = {node.fillColor.rgb() for node in drawing.contents if isinstance(node, Rect)}
    assert fills == {(1.0, 1.0, 1.0)}


def test_cell_color_is_monotone():
    shades = [sum(I.cell_color(v, 0.0, 1.0).rgb()) for v in np.linspace(0.0, 1.0, 11)]
    assert all(a > b for a, b in zip(shades, shades[1:]))
    assert I.cell_color(0.0, 0.0, 1.0).rgb() == (1.0, 1.0, 1.0)
    assert np.allclose(I.cell_color(1.0, 0.0, 1.0).rgb(), I.HEATMAP_HUE.rgb())


TESTS = [
    test_enhance_heatmap_worked_row,
    test_enhance_heatmap_identity_and_epsilon,
    test_enhance_heatmap_rows_and_ranking,
    test_enhance_heatmap_rejects_bad_input,
    test_select_view,
    test_normalize_attribution_values,
    test_normalize_attribution_properties,
    test_normalize_attribution_empty,
    test_extract_highlights_ordering_and_ties,
    test_extract_highlights_matches_sort_oracle,
    test_extract_highlights_rejects_bad_arguments,
    test_attribution_matches_finite_difference_oracle,
    test_attribution_pad_positions_are_zero,
    test_attribution_scales_with_answer_head,
    test_attribute_tokens_result,
    test_missing_gradients_raise,
    test_attention_highlights_use_cls_row,
    test_heatmap_csv_round_trip,
    test_heatmap_label_mismatch,
    test_constant_heatmap_single_fill,
    test_cell_color_is_monotone,
]


def main() -> int:
    print("=== Interpretation Tests ===\n")
    failed = 0
    for test in TESTS:
        try:
            test()
            print(f"[SUCCESS] {test.__name__}")
        except Exception as e:
            failed += 1
            print(f"[ERROR] {test.__name__}: {e!r}")
    print(f"\n=== {len(TESTS) - failed}/{len(TESTS)} passed ===")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
