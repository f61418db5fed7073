#!/usr/bin/env python3
"""
End-to-end acceptance experiments on the default synthetic dataset.

These train full models and take several minutes of CPU, so they only run
with READLENS_SLOW=1. Every target is asserted; the measured value is printed
with [SUCCESS] before moving on.
"""

import atexit
import contextlib
import io
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

import cli
from data import GeneratorSpec, answer_flip_oracle, generate, load_split
from interpret import attribute_tokens, extract_highlights
from model import ModelConfig, encode, encode_batch, load_checkpoint
from train import (TrainConfig, Trainer, evaluate, exhaustive_alignment_baseline, permutation_baseline,
                   visible_rationale)

SLOW = os.environ.get("READLENS_SLOW", "").lower() in ("1", "true", "yes")
OCCLUSION_SAMPLE = 100

_state = {}


def _check(name, ok, detail):
    assert ok, f"{name}: {detail}"
    print(f"[SUCCESS] {name}: {detail}")


def _workspace() -> Path:
    if "root" not in _state:
        root = Path(tempfile.mkdtemp(prefix="readlens-acceptance-"))
        atexit.register(shutil.rmtree, root, True)
        generate(GeneratorSpec(), root / "data")
        _state["root"] = root
    return _state["root"]


def _trained(debias: bool):
    key = "debias" if debias else "plain"
    if key not in _state:
        root = _workspace()
        result = Trainer(ModelConfig(), TrainConfig(debias=debias), root / "data", root / key).run()
        _state[key] = load_checkpoint(result.best_path)
    return _state[key]


def _split_report(debias: bool, split: str = "test"):
    key = f"report-{debias}-{split}"
    if key not in _state:
        model, vocab = _trained(debias)
        _state[key] = evaluate(model, vocab, load_split(_workspace() / "data", split))
    return _state[key]


def _correct_test_instances(model, vocab):
    test = load_split(_workspace() / "data", "test")
    ids, valid, encoded = encode_batch(test, vocab, model.config.max_len)
    preds = model.predict(ids, valid)
    return [(inst, enc) for inst, enc, p in zip(test, encoded, preds) if p == inst.answer]


def test_task_learnability():
    if not SLOW:
        return
    report = _split_report(False)
    # TODO: pin the measured accuracy with a 0.02 tolerance once a full-size calibration run is recorded
    _check("learnability", report.accuracy >= 0.90, f"clean test accuracy {report.accuracy:.4f} (target >= 0.90)")


def test_debias_closes_group_gap():
    if not SLOW:
        return
    before, after = _split_report(False), _split_report(True)
    if before.group_gap is None or after.group_gap is None:
        _check("group gap", False, "test split lacks one of the groups")
    _check("baseline gap", before.group_gap >= 0.10, f"{before.group_gap:.4f} (target >= 0.10)")
    reduction = (before.group_gap - after.group_gap) / before.group_gap if before.group_gap > 0 else 0.0
    drop = before.accuracy - after.accuracy
    _check("gap reduction", reduction >= 0.5, f"{before.group_gap:.4f} -> {after.group_gap:.4f} "
                                              f"({reduction:.1%} relative, target >= 50%)")
    _check("accuracy cost", drop <= 0.05, f"{before.accuracy:.4f} -> {after.accuracy:.4f} (target drop <= 0.05)")
    _check("test fairness penalty", after.fairness_penalty < before.fairness_penalty,
           f"{before.fairness_penalty:.5f} -> {after.fairness_penalty:.5f}")


def test_debias_lowers_dev_fairness_penalty():
    if not SLOW:
        return
    # both runs use the same epoch count from TrainConfig()
    before, after = _split_report(False, "dev"), _split_report(True, "dev")
    _check("dev fairness penalty", after.fairness_penalty < before.fairness_penalty,
           f"{before.fairness_penalty:.5f} -> {after.fairness_penalty:.5f} at {TrainConfig().epochs} epochs")


def test_alignment_beats_permutation_baseline():
    if not SLOW:
        return
    model, vocab = _trained(False)
    correct = _correct_test_instances(model, vocab)
    report = _split_report(False)
    stats = permutation_baseline([enc.passage_length for _, enc in correct],
                                 [visible_rationale(inst, enc.passage_length) for inst, enc in correct],
                                 trials=1000, seed=0)
    target = stats.mean + 3 * stats.std
    value = report.alignment_correct_only or 0.0
    _check("attribution alignment", value >= target,
           f"S_AA {value:.4f} on {len(correct)} correct instances vs baseline "
           f"{stats.mean:.4f} +- {stats.std:.4f} (target >= {target:.4f})")

    short = permutation_baseline([10] * 50, [[3, 4]] * 50, trials=1000, seed=0)
    exact = exhaustive_alignment_baseline(10, [3, 4], 2)
    assert abs(short.mean - exact) < 0.01, (short.mean, exact)


def test_occlusion_consistency():
    if not SLOW:
        return
    model, vocab = _trained(False)
    correct = _correct_test_instances(model, vocab)[:OCCLUSION_SAMPLE]
    consistent, above_median, with_flips = 0, 0, 0
    for inst, enc in correct:
        result = attribute_tokens(model, enc, instance_id=inst.id)
        k = max(1, len(visible_rationale(inst, enc.passage_length)))
        highlights = set(extract_highlights(result.scores, enc.passage_span, k))
        flips = answer_flip_oracle(inst, model, vocab)
        # mean overlap of a uniform k-subset with the flip set
        expected = k * len(flips) / enc.passage_length
        consistent += len(highlights & flips) >= expected
        if flips:
            with_flips += 1
            start, stop = enc.passage_span
            scores = np.asarray(result.scores[start:stop])
            above_median += all(scores[i] > np.median(scores) for i in flips)
    rate = consistent / max(1, len(correct))
    _check("occlusion consistency", rate >= 0.70,
           f"{consistent}/{len(correct)} instances ({rate:.1%}, target >= 70%)")
    assert with_flips, "no correctly answered instance has a flip token"
    median_rate = above_median / with_flips
    _check("flip tokens above median", median_rate >= 0.80,
           f"{above_median}/{with_flips} instances ({median_rate:.1%}, target >= 80%)")


def _pipeline(root: Path):
    data, run_dir = root / "data", root / "run"
    steps = (["gen-data", "--out", data, "--n-train", "200", "--n-dev", "50", "--n-test", "50"],
             ["train", "--data", data, "--out", run_dir, "--epochs", "2", "--debias"],
             ["eval", "--model", run_dir / "final.ckpt", "--data", data, "--out", root / "eval.json"])
    with contextlib.redirect_stdout(io.StringIO()):
        for argv in steps:
            assert cli.main([str(a) for a in argv]) == 0, argv
    names = ["data/train.jsonl", "data/dev.jsonl", "data/test.jsonl", "data/manifest.json",
             "run/final.ckpt", "run/best.ckpt", "run/log.jsonl", "eval.json"]
    return {name: (root / name).read_bytes() for name in names}


def test_end_to_end_determinism():
    if not SLOW:
        return
    with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
        a, b = _pipeline(Path(first)), _pipeline(Path(second))
    differing = [name for name in a if a[name] != b[name]]
    assert not differing, f"outputs differ between identical runs: {differing}"
    _check("determinism", True, f"{len(a)} artifacts byte-identical across two runs")


def test_plain_encoding_fits_default_length():
    if not SLOW:
        return
    model, vocab = _trained(False)
    inst = load_split(_workspace() / "data", "dev")[0]
    enc = encode(inst, vocab, model.config.max_len)
    assert enc.passage_length == len(inst.passage)


TESTS = [
    test_task_learnability,
    test_debias_closes_group_gap,
    test_debias_lowers_dev_fairness_penalty,
    test_alignment_beats_permutation_baseline,
    test_occlusion_consistency,
    test_end_to_end_determinism,
    test_plain_encoding_fits_default_length,
]


def main() -> int:
    print("=== Acceptance Experiments ===\n")
    if not SLOW:
        print("Skipped: set READLENS_SLOW=1 to train the full-size models (several minutes of CPU).")
        return 0
    failed = 0
    for test in TESTS:
        try:
            test()
        except Exception as e:
            failed += 1
            print(f"[ERROR] {test.__name__}: {e!r}")
    print(f"\n=== {len(TESTS) - failed}/{len(TESTS)} experiments passed ===")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
