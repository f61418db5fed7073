#!/usr/bin/env python3
"""
Tests for SGD, evaluation metrics, baselines and the training loop.
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import numpy as np

import tensor as T
import train as TR
from data import GeneratorSpec, generate, load_split
from debias import DebiasConfig
from model import ModelConfig, Vocabulary, load_checkpoint

SMALL_SPEC = GeneratorSpec(n_train=40, n_dev=20, n_test=20, seed=3)
SMALL_MODEL = ModelConfig(d_model=16, n_heads=2, n_layers=1, d_ff=32, max_len=40, seed=7)


def test_sgd_single_step():
    theta = T.parameter(1.0, "theta")
    TR.sgd_step({"theta": theta}, 0.1, grads={"theta": np.array(2.0)})
    assert abs(theta.item() - 0.8) < 1e-15


def test_sgd_quadratic_bowl():
    theta = T.parameter(1.0, "theta")
    for _ in range(50):
        theta.zero_grad()
        T.backward(T.square(theta))
        TR.sgd_step({"theta": theta}, 0.1)
    assert abs(theta.item() - 0.8 ** 50) <= 1e-12 * 0.8 ** 50
    assert abs(theta.item() - 1.43e-5) < 1e-7


def test_sgd_zero_rate_and_bad_gradients():
    w = T.parameter(np.array([0.1, 0.2]), "w")
    v = T.parameter(np.array([0.3]), "v")
    before = w.values.copy()
    TR.sgd_step({"w": w}, 0.0, grads={"w": np.array([5.0, -5.0])})
    assert np.array_equal(w.values, before)

    try:
        TR.sgd_step({"v": v, "w": w}, 0.1, grads={"v": np.array([1.0]), "w": np.array([np.nan, 0.0])})
    except TR.NonFiniteGradientError as e:
        assert "'w'" in str(e)
    else:
        raise AssertionError("NaN gradient accepted")
    assert v.values.tolist() == [0.3]

    try:
        TR.sgd_step({"w": w}, 0.1)
    except T.ComputationError:
        pass
    else:
        raise AssertionError("missing gradient accepted")


def test_epoch_order():
    first = TR.epoch_order(10, 1234, 0)
    assert sorted(first.tolist()) == list(range(10))
    assert np.array_equal(first, TR.epoch_order(10, 1234, 0))
    assert not np.array_equal(first, TR.epoch_order(10, 1234, 1))


def test_accuracy():
    assert TR.accuracy([0, 1, 2, 3], [0, 1, 2, 0]) == 0.75
    assert TR.accuracy([1, 1], [1, 1]) == 1.0
    assert TR.accuracy([0, 0], [1, 1]) == 0.0
    for preds, refs in (([0, 1], [0]), ([], [])):
        try:
            TR.accuracy(preds, refs)
        except TR.MetricInputError:
            continue
        raise AssertionError(f"accuracy accepted {preds} vs {refs}")


def test_macro_f1_worked_values():
    assert abs(TR.macro_f1([0, 1, 1, 1], [0, 0, 1, 1], 2, zeta=0.0) - 11 / 15) < 1e-15
    assert TR.macro_f1([0, 1, 0], [0, 1, 0], 2, zeta=0.0) == 1.0
    zeta = 1e-3
    assert abs(TR.macro_f1([0, 1], [0, 1], 2, zeta=zeta) - 2 / (2 + zeta)) < 1e-15
    assert abs(TR.macro_f1([0, 1], [0, 1], 3, zeta=0.0) - 2 / 3) < 1e-15
    try:
        TR.macro_f1([0, 3], [0, 1], 3)
    except TR.MetricInputError:
        pass
    else:
        raise AssertionError("label 3 accepted for 3 classes")


def _f1_oracle(preds, refs, n_classes):
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (refs, preds), 1)
    scores = []
    for c in range(n_classes):
        tp = confusion[c, c]
        fp = confusion[:, c].sum() - tp
        fn = confusion[c, :].sum() - tp
        scores.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


def test_metrics_match_oracles():
    rng = np.random.Generator(np.random.Philox(17))
    for _ in range(1000):
        n, c = int(rng.integers(1, 12)), int(rng.integers(2, 5))
        preds, refs = rng.integers(c, size=n), rng.integers(c, size=n)
        assert abs(TR.macro_f1(preds, refs, c, zeta=0.0) - _f1_oracle(preds, refs, c)) < 1e-12
        assert TR.accuracy(preds, refs) == sum(int(p == r) for p, r in zip(preds, refs)) / n
        order = rng.permutation(n)
        assert TR.accuracy(preds[order], refs[order]) == TR.accuracy(preds, refs)


def test_jaccard_and_alignment():
    assert TR.jaccard({1, 2, 3}, {2, 3, 4}) == 0.5
    assert TR.jaccard([], []) == 1.0
    assert TR.attention_alignment([[1, 2], [5]], [[1, 2], [5]]) == 1.0
    assert TR.attention_alignment([[1], [2]], [[3], [4]]) == 0.0
    assert TR.attention_alignment([[1, 2, 3], [0]], [[2, 3, 4], [0]]) == 0.75
    try:
        TR.attention_alignment([], [])
    except TR.MetricInputError:
        pass
    else:
        raise AssertionError("empty alignment accepted")


def test_alignment_matches_set_oracle():
    rng = np.random.Generator(np.random.Philox(23))
    for _ in range(1000):
        m = int(rng.integers(1, 5))
        hs = [set(rng.choice(8, size=int(rng.integers(0, 4)), replace=False).tolist()) for _ in range(m)]
        rs = [set(rng.choice(8, size=int(rng.integers(0, 4)), replace=False).tolist()) for _ in range(m)]
        expected = np.mean([1.0 if not (h | r) else len(h & r) / len(h | r) for h, r in zip(hs, rs)])
        value = TR.attention_alignment(hs, rs)
        assert abs(value - expected) < 1e-15
        assert 0.0 <= value <= 1.0


def test_group_accuracy_gap():
    preds = [1, 1, 1, 1, 0, 1, 1, 0, 0, 0]
    refs = [1, 1, 1, 1, 1, 1, 1, 1, 1, 1]
    groups = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1]
    result = TR.group_accuracy_gap(preds, refs, groups)
    assert abs(result.acc_g0 - 0.8) < 1e-15 and abs(result.acc_g1 - 0.4) < 1e-15
    assert abs(result.gap - 0.4) < 1e-15
    order = np.random.Generator(np.random.Philox(1)).permutation(10)
    shuffled = TR.group_accuracy_gap(np.array(preds)[order], np.array(refs)[order], np.array(groups)[order])
    assert shuffled.to_dict() == result.to_dict()
    try:
        TR.group_accuracy_gap([1, 0], [1, 1], [0, 0])
    except TR.MissingGroupError as e:
        assert "group 1" in str(e)
    else:
        raise AssertionError("missing group accepted")


def test_permutation_baseline_full_selection():
    stats = TR.permutation_baseline([10], [[3, 4]], trials=100, seed=5, ks=[10])
    assert abs(stats.mean - 0.2) < 1e-15
    assert stats.std < 1e-15
    again = TR.permutation_baseline([10, 12], [[3, 4], [0]], trials=200, seed=9)
    assert again == TR.permutation_baseline([10, 12], [[3, 4], [0]], trials=200, seed=9)


def test_permutation_baseline_matches_enumeration():
    exact = TR.exhaustive_alignment_baseline(10, [3, 4], 2)
    assert abs(exact - 19 / 135) < 1e-15
    stats = TR.permutation_baseline([10] * 20, [[3, 4]] * 20, trials=1000, seed=0)
    assert abs(stats.mean - exact) < 0.01


def test_permutation_baseline_needs_trials():
    try:
        TR.permutation_baseline([10], [[1]], trials=50)
    except TR.MetricInputError:
        pass
    else:
        raise AssertionError("50 trials accepted")


def test_aggregate_reports():
    reports = [
        {"accuracy": 0.5, "per_group_accuracy": {"0": 0.4, "1": 0.6}, "group_gap": None,
         "n_instances": 10, "highlight_source": "attention"},
        {"accuracy": 0.7, "per_group_accuracy": {"0": 0.6, "1": 0.8}, "group_gap": None,
         "n_instances": 10, "highlight_source": "attention"},
    ]
    summary = TR.aggregate_reports(reports)
    assert set(summary) == {"accuracy", "per_group_accuracy.0", "per_group_accuracy.1"}
    assert abs(summary["accuracy"]["mean"] - 0.6) < 1e-15
    assert abs(summary["accuracy"]["std"] - 0.1) < 1e-15
    assert summary["accuracy"]["n"] == 2


def _dataset(tmp: Path) -> Path:
    data_dir = tmp / "data"
    generate(SMALL_SPEC, data_dir)
    return data_dir


def test_trainer_is_deterministic_and_skips_test_split():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        data_dir = _dataset(tmp)
        (data_dir / "test.jsonl").unlink()
        cfg = TR.TrainConfig(epochs=2, batch_size=8, seed=5)
        first = TR.Trainer(SMALL_MODEL, cfg, data_dir, tmp / "run1").run()
        second = TR.Trainer(SMALL_MODEL, cfg, data_dir, tmp / "run2").run()
        assert first.steps == second.steps == 10
        assert first.final_path.read_bytes() == second.final_path.read_bytes()
        assert first.log_path.read_bytes() == second.log_path.read_bytes()
        assert first.best_path.exists()

        records = [json.loads(line) for line in first.log_path.read_text(encoding="utf-8").splitlines()]
        steps = [r for r in records if "eval" not in r]
        evals = [r for r in records if r.get("eval") == "dev"]
        assert len(steps) == 10 and len(evals) == 2
        assert all(r["total"] == r["comp"] for r in steps)
        assert all("kl" not in r for r in steps)

        model, vocab = load_checkpoint(first.final_path)
        dev = load_split(data_dir, "dev")
        report = TR.evaluate(model, vocab, dev)
        assert 0.0 <= report.accuracy <= 1.0 and 0.0 <= report.alignment <= 1.0
        assert set(report.alignment_by_source) == {"attention", "attribution"}
        assert report.highlight_source == "attribution"
        if report.group_gap is not None:
            gap = abs(report.per_group_accuracy["0"] - report.per_group_accuracy["1"])
            assert abs(report.group_gap - gap) < 1e-15
        again = TR.evaluate(model, vocab, dev)
        assert again.to_dict() == report.to_dict()


def test_trainer_evaluates_final_parameters():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        data_dir = _dataset(tmp)
        # 40 items in batches of 16: 3 steps per epoch, 6 in total
        cfg = TR.TrainConfig(epochs=2, batch_size=16, seed=5, eval_every=4)
        result = TR.Trainer(SMALL_MODEL, cfg, data_dir, tmp / "run").run()
        records = [json.loads(line) for line in result.log_path.read_text(encoding="utf-8").splitlines()]
        evals = [r for r in records if r.get("eval") == "dev"]
        assert result.steps == 6
        assert [r["step"] for r in evals] == [4, 6]

        cfg = TR.TrainConfig(epochs=2, batch_size=16, seed=5, eval_every=3)
        result = TR.Trainer(SMALL_MODEL, cfg, data_dir, tmp / "exact").run()
        records = [json.loads(line) for line in result.log_path.read_text(encoding="utf-8").splitlines()]
        assert [r["step"] for r in records if r.get("eval") == "dev"] == [3, 6]


def test_default_model_fits_small_training_set():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        data_dir = tmp / "data"
        generate(GeneratorSpec(n_train=64, n_dev=16, n_test=16, seed=11), data_dir)
        cfg = TR.TrainConfig(epochs=30, batch_size=16, seed=5)
        result = TR.Trainer(ModelConfig(), cfg, data_dir, tmp / "run").run()
        records = [json.loads(line) for line in result.log_path.read_text(encoding="utf-8").splitlines()]
        losses = {}
        for r in records:
            if "eval" not in r:
                losses.setdefault(r["epoch"], []).append(r["comp"])
        first, last = np.mean(losses[0]), np.mean(losses[29])
        assert last < first - 0.1, (first, last)


def test_trainer_debias_log_schema():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        data_dir = _dataset(tmp)
        cfg = TR.TrainConfig(epochs=2, batch_size=8, seed=5, debias=True,
                             debias_cfg=DebiasConfig(warmup_epochs=1))
        result = TR.Trainer(SMALL_MODEL, cfg, data_dir, tmp / "run").run()
        records = [json.loads(line) for line in result.log_path.read_text(encoding="utf-8").splitlines()]
        steps = [r for r in records if "eval" not in r]
        assert all({"comp", "kl", "fair", "bias", "total"} <= set(r) for r in steps)
        assert all(r["total"] == r["comp"] for r in steps if r["epoch"] == 0)
        for r in steps:
            assert abs(r["total"] - (r["comp"] + 0.5 * r["kl"] + r["fair"])) <= 1e-9 or r["epoch"] == 0


def test_trainer_divergence_keeps_last_good():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        data_dir = _dataset(tmp)
        cfg = TR.TrainConfig(eta=1e300, epochs=1, batch_size=8, seed=5)
        with np.errstate(all="ignore"):
            try:
                TR.Trainer(SMALL_MODEL, cfg, data_dir, tmp / "run").run()
            except TR.TrainingDivergedError:
                pass
            else:
                raise AssertionError("training with eta=1e300 did not diverge")
        model, _ = load_checkpoint(tmp / "run" / "last_good.ckpt")
        assert all(np.all(np.isfinite(p.values)) for p in model.params.values())


def test_train_config_validation():
    for bad in ({"eta": 0.0}, {"batch_size": 0}, {"epochs": -1}, {"seed": -1}):
        try:
            TR.TrainConfig(**bad).validate()
        except TR.TrainConfigError:
            continue
        raise AssertionError(f"train config {bad} accepted")


def test_checkpoint_data_mismatch():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        data_dir = _dataset(tmp)
        result = TR.Trainer(SMALL_MODEL, TR.TrainConfig(epochs=1, batch_size=20, seed=5),
                            data_dir, tmp / "run").run()
        model, vocab = load_checkpoint(result.final_path)
        dev = load_split(data_dir, "dev")
        TR.check_checkpoint_data(model, vocab, data_dir, dev)
        try:
            TR.check_checkpoint_data(model, Vocabulary(["other"]), data_dir, dev)
        except TR.CheckpointDataMismatchError:
            pass
        else:
            raise AssertionError("foreign vocabulary accepted")


def test_visible_rationale():
    from data import Instance
    inst = Instance(id="x", passage=["a"] * 8, question=["q"], options=[["a"], ["b"]],
                    answer=0, group=0, rationale=[2, 4, 7])
    assert TR.visible_rationale(inst, 5) == [2, 4]
    assert math.isclose(TR.exhaustive_alignment_baseline(4, [0, 1, 2, 3], 4), 1.0)


TESTS = [
    test_sgd_single_step,
    test_sgd_quadratic_bowl,
    test_sgd_zero_rate_and_bad_gradients,
    test_epoch_order,
    test_accuracy,
    test_macro_f1_worked_values,
    test_metrics_match_oracles,
    test_jaccard_and_alignment,
    test_alignment_matches_set_oracle,
    test_group_accuracy_gap,
    test_permutation_baseline_full_selection,
    test_permutation_baseline_matches_enumeration,
    test_permutation_baseline_needs_trials,
    test_aggregate_reports,
    test_trainer_is_deterministic_and_skips_test_split,
    test_trainer_evaluates_final_parameters,
    test_default_model_fits_small_training_set,
    test_trainer_debias_log_schema,
    test_trainer_divergence_keeps_last_good,
    test_train_config_validation,
    test_checkpoint_data_mismatch,
    test_visible_rationale,
]


def main() -> int:
    print("=== Training and Metrics Tests ===\n")
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
