#!/usr/bin/env python3
"""
ReadLens command-line entry point.

    python cli.py gen-data --out data/
    python cli.py train --data data/ --config readlens.cfg --out runs/base
    python cli.py eval --model runs/base/best.ckpt --data data/ --split test
    python cli.py explain --model runs/base/best.ckpt --data data/ --id test-00012 --out explain/
    python cli.py fairness-report --model-before runs/base/best.ckpt --model-after runs/fair/best.ckpt --data data/
    python cli.py gradcheck --config gradcheck_tiny.cfg
    python cli.py aggregate --reports a.json b.json c.json --out summary.json

Exit codes: 0 success, 1 computational failure, 2 usage or validation error.
Set READLENS_DEBUG=1 (or pass --debug) for progress output on stderr.
"""

import argparse
import difflib
import json
import os
import re
import sys
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

import tensor as T
from data import SPLITS, GeneratorSpec, generate, load_split, marker_label_mutual_information
from debias import DebiasConfig, debias_objective, perturbation_direction
from errors import ReadLensError, ValidationError
from interpret import (HeatmapConfig, attention_highlights, attribute_tokens, enhance_heatmap,
                       extract_highlights, heatmap_drawing, render_heatmap, select_view,
                       write_attribution_json)
from model import ModelConfig, TransformerEncoder, encode, encode_batch, load_checkpoint
from report import ExplanationSheet, SheetLayout, explanation_markdown
from storage import atomic_write_text, dumps_json, write_json
from train import (TrainConfig, Trainer, aggregate_reports, check_checkpoint_data, evaluate,
                   group_accuracy_gap, accuracy, permutation_baseline, visible_rationale)

RESOLVED_NAME = "config.resolved"
TRUE_WORDS = ("true", "1", "yes", "on")
FALSE_WORDS = ("false", "0", "no", "off")
PATH_KEYS = ("data", "out")


class ConfigFileError(ValidationError):
    """A key-value config file has a bad line, key or value."""


class OutputExistsError(ValidationError):
    """The output directory already holds files."""


class UnknownInstanceError(ValidationError):
    """No instance with the requested id."""


def debug_enabled(flag: bool = False) -> bool:
    return flag or os.environ.get("READLENS_DEBUG", "").lower() in ("true", "1", "yes")


# ---------------------------------------------------------------------------
# Key-value configuration
# ---------------------------------------------------------------------------

def coerce_value(key: str, raw: Any, kind: Any) -> Any:
    """Convert a config string to the field's type."""
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind is bool:
            if text.lower() in TRUE_WORDS:
                return True
            if text.lower() in FALSE_WORDS:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        # int-or-name selectors such as layer/head
        return int(text) if re.fullmatch(r"-?\d+", text) else text
    except ValueError:
        raise ConfigFileError(f"{key}: cannot read {raw!r} as {getattr(kind, '__name__', kind)}")


def parse_key_value_file(path) -> Dict[str, Tuple[str, int]]:
    """key = value lines; '#' starts a comment. Returns key -> (raw value, line number)."""
    entries: Dict[str, Tuple[str, int]] = {}
    try:
        with open(path, "r", encoding="utf-8") as handle:
            lines = handle.readlines()
    except OSError as e:
        raise ConfigFileError(f"cannot read config {path}: {e}")
    for line_no, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigFileError(f"{path}:{line_no}: expected 'key = value'")
        key, value = (part.strip() for part in text.split("=", 1))
        if key in entries:
            raise ConfigFileError(f"{path}:{line_no}: '{key}' already set on line {entries[key][1]}")
        entries[key] = (value, line_no)
    return entries


def render_key_values(values: Dict[str, Any]) -> str:
    lines = []
    for key in sorted(values):
        value = values[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_resolved(out_dir, values: Dict[str, Any]) -> Path:
    return atomic_write_text(Path(out_dir) / RESOLVED_NAME, render_key_values(values))


def _section_keys(cls, prefix: str = "", skip: Tuple[str, ...] = ()) -> Dict[str, Tuple[str, Any]]:
    return {prefix + f.name: (f.name, f.type) for f in fields(cls) if f.name not in skip}


# key -> (section, field name, type); 'seed' drives both initialization and shuffling
CONFIG_KEYS: Dict[str, Tuple[str, str, Any]] = {}
for _key, (_name, _kind) in _section_keys(ModelConfig, skip=("seed",)).items():
    CONFIG_KEYS[_key] = ("model", _name, _kind)
for _key, (_name, _kind) in _section_keys(TrainConfig, skip=("debias_cfg",)).items():
    CONFIG_KEYS[_key] = ("train", _name, _kind)
for _key, (_name, _kind) in _section_keys(DebiasConfig, prefix="debias_").items():
    CONFIG_KEYS[_key] = ("debias", _name, _kind)
for _key, (_name, _kind) in _section_keys(HeatmapConfig).items():
    CONFIG_KEYS[_key] = ("heatmap", _name, _kind)
for _key in PATH_KEYS:
    CONFIG_KEYS[_key] = ("paths", _key, str)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    heatmap: HeatmapConfig = field(default_factory=HeatmapConfig)
    paths: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_sources(cls, config_path: Optional[str] = None,
                     overrides: Optional[Dict[str, Any]] = None,
                     base: Optional[Dict[str, Any]] = None) -> "RunConfig":
        """Defaults (or base), then the config file, then command-line overrides."""
        values: Dict[str, Any] = dict(base or {})
        if config_path:
            for key, (raw, line_no) in parse_key_value_file(config_path).items():
                if key not in CONFIG_KEYS:
                    raise ConfigFileError(f"{config_path}:{line_no}: unknown key '{key}'")
                values[key] = coerce_value(key, raw, CONFIG_KEYS[key][2])
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if key not in CONFIG_KEYS:
                raise ConfigFileError(f"unknown override '{key}'")
            values[key] = coerce_value(key, value, CONFIG_KEYS[key][2])

        sections: Dict[str, Dict[str, Any]] = {"model": {}, "train": {}, "debias": {}, "heatmap": {}, "paths": {}}
        for key, value in values.items():
            section, name, _ = CONFIG_KEYS[key]
            sections[section][name] = value
        seed = sections["train"].get("seed", TrainConfig.seed)
        config = cls(model=ModelConfig(seed=seed, **sections["model"]),
                     train=TrainConfig(debias_cfg=DebiasConfig(**sections["debias"]), **sections["train"]),
                     heatmap=HeatmapConfig(**sections["heatmap"]),
                     paths=sections["paths"])
        config.validate()
        return config

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.heatmap.validate()

    def resolved(self) -> Dict[str, Any]:
        values: Dict[str, Any] = {}
        for key, (section, name, _) in CONFIG_KEYS.items():
            if section == "paths":
                if name in self.paths:
                    values[key] = self.paths[name]
                continue
            source = {"model": self.model, "train": self.train, "debias": self.train.debias_cfg,
                      "heatmap": self.heatmap}[section]
            values[key] = getattr(source, name)
        return values


def add_config_flags(parser: argparse.ArgumentParser, sections: Tuple[str, ...]) -> None:
    """One --flag per config key of the given sections."""
    for key, (section, _, kind) in sorted(CONFIG_KEYS.items()):
        if section not in sections:
            continue
        flag = "--" + key.replace("_", "-")
        if kind is bool:
            parser.add_argument(flag, dest=key, action="store_const", const="true", default=None)
        else:
            parser.add_argument(flag, dest=key, default=None, metavar=key.upper())


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {key: getattr(args, key) for key in CONFIG_KEYS if hasattr(args, key)}


# ---------------------------------------------------------------------------
# Gradient-check suites
# ---------------------------------------------------------------------------

def tiny_batch(config: ModelConfig, seed: int, batch: int = 3):
    """Random ids with ragged valid lengths and both groups present."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 99])))
    n = config.max_len
    ids = rng.integers(4, config.vocab_size, size=(batch, n))
    lengths = [n] + [max(2, n - 2 - 2 * i) for i in range(1, batch)]
    valid = np.zeros((batch, n), dtype=bool)
    for row, length in enumerate(lengths):
        valid[row, :length] = True
        ids[row, length:] = 0
    ids[:, 0] = 1
    answers = rng.integers(config.n_options, size=batch)
    groups = np.arange(batch) % 2
    return ids, valid, answers, groups


def tensor_suite(seed: int):
    """Small standalone graph touching every differentiable op."""
    rng = np.random.Generator(np.random.Philox(seed))
    params = {
        "a": T.parameter(rng.normal(size=(3, 4)), "a"),
        "b": T.parameter(rng.normal(size=(4, 5)) * 0.5, "b"),
        "gain": T.parameter(1.0 + 0.1 * rng.normal(size=5), "gain"),
        "shift": T.parameter(0.1 * rng.normal(size=5), "shift"),
        "emb": T.parameter(rng.normal(size=(6, 5)), "emb"),
    }
    ids = np.array([0, 3, 5])
    mask = np.zeros((3, 5))
    mask[:, -1] = T.MASK_VALUE
    targets = np.array([1, 0, 3])

    def loss_fn():
        h = T.layer_norm(params["a"] @ params["b"], params["gain"], params["shift"])
        h = h + T.take_rows(params["emb"], ids)
        att = T.softmax_rows(h, mask)
        z = T.relu(h) * att + T.exp(T.scale(h, 0.1))
        folded = T.permute(T.reshape(z, (5, 3)), (1, 0))
        kl = T.kl_divergence(T.softmax(folded), T.softmax(h))
        picked = T.mean(T.square(T.gather(h, [0, 1, 2], [4, 2, 0])))
        smooth = T.sum(T.log(att + 1.0)) + T.sum(h[0:2, 1])
        noisy = T.mean(T.dropout(h, 0.3, np.random.Generator(np.random.Philox(seed + 1))))
        scores = T.swap_last(T.log_softmax(z)) @ att
        return T.cross_entropy(z, targets) + kl + picked + smooth + noisy + T.mean(scores) / 4.0

    return loss_fn, params


def randomized_model(config: ModelConfig, seed: int, scale: float = 0.5) -> TransformerEncoder:
    """Encoder at a random point away from the seeded initialization."""
    model = TransformerEncoder(config)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 7])))
    for name, param in model.params.items():
        base = 1.0 if name.endswith(".gain") else 0.0
        param.assign(base + rng.uniform(-scale, scale, size=param.shape))
    return model


def model_suite(config: ModelConfig, seed: int):
    model = randomized_model(config, seed)
    ids, valid, answers, groups = tiny_batch(config, seed)

    def loss_fn():
        output = model.forward(ids, valid)
        return T.cross_entropy(output.answer_logits, answers) + T.cross_entropy(output.group_logits, groups)

    return loss_fn, model.params


def debias_suite(config: ModelConfig, seed: int, cfg: DebiasConfig):
    model = randomized_model(config, seed)
    ids, valid, answers, groups = tiny_batch(config, seed)
    # sign(grad) is piecewise constant; finite differences hold it at the base point
    offsets = perturbation_direction(model, ids, valid, answers, groups, cfg)

    def loss_fn():
        return debias_objective(model, ids, valid, answers, groups, cfg, active=True, offsets=offsets)[0]

    return loss_fn, model.params


SUITES = ("tensor", "model", "debias")
# gradcheck runs on this shape unless a config file or flag says otherwise
TINY_MODEL = {"vocab_size": 24, "d_model": 16, "n_heads": 2, "n_layers": 2, "d_ff": 32,
              "n_options": 3, "max_len": 12}


def run_gradcheck(config: RunConfig, suites=SUITES, entries_per_param: int = 16,
                  corrupt: Optional[str] = None, debug: bool = False) -> Dict[str, Any]:
    """Run the named suites; corrupt='suite:param' perturbs one analytic gradient."""
    seed = config.train.seed
    reports = {}
    for suite in suites:
        if suite == "tensor":
            loss_fn, params = tensor_suite(seed)
        elif suite == "model":
            loss_fn, params = model_suite(config.model, seed)
        elif suite == "debias":
            loss_fn, params = debias_suite(config.model, seed, config.train.debias_cfg)
        else:
            raise ValidationError(f"unknown gradcheck suite '{suite}'; expected one of {', '.join(SUITES)}")
        target = None
        if corrupt and corrupt.split(":", 1)[0] == suite:
            target = corrupt.split(":", 1)[1]
        reports[suite] = T.gradient_check(loss_fn, params, seed=seed, entries_per_param=entries_per_param,
                                          corrupt=target, suite=suite, debug=debug)
    worst_suite = max(reports, key=lambda s: reports[s].max_rel_error)
    worst = reports[worst_suite]
    return {
        "passed": all(r.passed for r in reports.values()),
        "max_rel_error": worst.max_rel_error,
        "worst_parameter": f"{worst_suite}:{worst.worst_parameter}",
        "suites": {name: r.to_dict() for name, r in reports.items()},
    }


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def find_instance(data_dir, instance_id: str, split: Optional[str] = None):
    if split is None:
        prefix = instance_id.split("-", 1)[0]
        split = prefix if prefix in SPLITS else "test"
    instances = load_split(data_dir, split)
    for inst in instances:
        if inst.id == instance_id:
            return inst, instances
    nearest = difflib.get_close_matches(instance_id, [inst.id for inst in instances], n=3)
    hint = f"; nearest ids: {', '.join(nearest)}" if nearest else ""
    raise UnknownInstanceError(f"no instance '{instance_id}' in split '{split}'{hint}")


class ReadLensCLI:
    """Dispatches subcommands; every handler returns the process exit code."""

    def __init__(self, debug: bool = False):
        self.debug = debug

    def log(self, message: str) -> None:
        if self.debug:
            print(message, file=sys.stderr)

    def handle_command(self, args: argparse.Namespace) -> int:
        handlers = {
            "gen-data": self.gen_data,
            "train": self.train,
            "eval": self.eval,
            "explain": self.explain,
            "fairness-report": self.fairness_report,
            "gradcheck": self.gradcheck,
            "aggregate": self.aggregate,
        }
        try:
            return handlers[args.command](args)
        except (ReadLensError, OSError) as e:
            message = f"Error in {args.command}: {e}"
            if self.debug:
                message += f"\n{traceback.format_exc()}"
            print(message, file=sys.stderr)
            return e.exit_code if isinstance(e, ReadLensError) else ValidationError.exit_code

    def gen_data(self, args) -> int:
        values: Dict[str, Any] = {}
        spec_fields = {f.name: f.type for f in fields(GeneratorSpec)}
        if args.spec:
            for key, (raw, line_no) in parse_key_value_file(args.spec).items():
                if key not in spec_fields:
                    raise ConfigFileError(f"{args.spec}:{line_no}: unknown key '{key}'")
                values[key] = coerce_value(key, raw, spec_fields[key])
        for key in spec_fields:
            if getattr(args, key, None) is not None:
                values[key] = getattr(args, key)
        spec = GeneratorSpec(**values)
        spec.validate()

        out = Path(args.out)
        if out.exists() and any(out.iterdir()) and not args.force:
            raise OutputExistsError(f"{out} is not empty; pass --force to overwrite")
        manifest = generate(spec, out, debug=self.debug)
        write_resolved(out, asdict(spec))
        mi = marker_label_mutual_information(load_split(out, "train"), spec.n_options)
        counts = " ".join(f"{split}={info['instances']}" for split, info in manifest["files"].items())
        print(f"Generated dataset in {out}: {counts} (train marker/answer MI {mi:.4f} nats)")
        return 0

    def train(self, args) -> int:
        config = RunConfig.from_sources(args.config, config_overrides(args))
        data_dir = config.paths.get("data")
        out_dir = config.paths.get("out")
        if not data_dir or not out_dir:
            raise ValidationError("train needs --data and --out (or data/out keys in the config)")
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_resolved(out_dir, config.resolved())
        self.log(f"Training with {render_key_values(config.resolved()).strip()}")
        result = Trainer(config.model, config.train, data_dir, out_dir, debug=self.debug).run()
        best = "n/a" if result.best_dev_accuracy is None else f"{result.best_dev_accuracy:.4f}"
        print(f"Trained {result.steps} steps; best dev accuracy {best}; checkpoints in {out_dir}")
        return 0

    def _load(self, checkpoint, data_dir, split):
        model, vocab = load_checkpoint(checkpoint)
        instances = load_split(data_dir, split)
        check_checkpoint_data(model, vocab, data_dir, instances)
        return model, vocab, instances

    def eval(self, args) -> int:
        model, vocab, instances = self._load(args.model, args.data, args.split)
        report = evaluate(model, vocab, instances).to_dict()
        report["split"] = args.split
        if args.baseline_trials:
            encoded = [encode(inst, vocab, model.config.max_len) for inst in instances]
            rationales = [visible_rationale(inst, enc.passage_length) for inst, enc in zip(instances, encoded)]
            stats = permutation_baseline([enc.passage_length for enc in encoded], rationales,
                                         trials=args.baseline_trials, seed=args.seed)
            report["baseline"] = asdict(stats)
        out = Path(args.out) if args.out else Path(args.model).with_name(f"eval_{args.split}.json")
        write_json(out, report)
        print(dumps_json(report, indent=2))
        return 0

    def explain(self, args) -> int:
        config = RunConfig.from_sources(args.config, config_overrides(args))
        model, vocab = load_checkpoint(args.model)
        instance, split_instances = find_instance(args.data, args.id, args.split)
        check_checkpoint_data(model, vocab, args.data, [instance])
        encoded = encode(instance, vocab, model.config.max_len)

        result = attribute_tokens(model, encoded, reduce=args.reduce, instance_id=instance.id)
        k = max(1, len(visible_rationale(instance, encoded.passage_length)))
        result.highlights = extract_highlights(result.scores, encoded.passage_span, k)
        output = model.forward(encoded.ids, encoded.valid)
        stack = output.attention_values(0)
        n = int(encoded.valid.sum())
        raw = select_view(stack, config.heatmap)[:n, :n]
        enhanced = enhance_heatmap(raw, config.heatmap)
        tokens = encoded.tokens[:n]

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        render_heatmap(raw, tokens, tokens, out / "attention.csv", out / "attention.svg")
        render_heatmap(enhanced, tokens, tokens, out / "heatmap.csv", out / "heatmap.svg")
        write_attribution_json(out / "attribution.json", result)
        resolved = {key: value for key, value in config.resolved().items()
                    if CONFIG_KEYS[key][0] == "heatmap"}
        resolved.update(model=str(args.model), data=str(args.data), id=instance.id,
                        reduce=args.reduce, layout=args.layout, sheet=not args.no_sheet)
        write_resolved(out, resolved)
        if not args.no_sheet:
            markdown = explanation_markdown(instance, result, result.highlights, result.target_class)
            sheet = ExplanationSheet(SheetLayout.named(args.layout), debug=self.debug)
            sheet.build(markdown, heatmap_drawing(enhanced, tokens, tokens), out / "sheet.pdf")
        attention_marks = attention_highlights(stack, encoded.passage_span, k)
        print(f"Explained {instance.id}: predicted {result.target_class}, gold {instance.answer}; "
              f"highlights {result.highlights} (attention {attention_marks}); wrote {out}")
        return 0

    def fairness_report(self, args) -> int:
        sides = {}
        for side, checkpoint in (("before", args.model_before), ("after", args.model_after)):
            model, vocab, instances = self._load(checkpoint, args.data, args.split)
            ids, valid, _ = encode_batch(instances, vocab, model.config.max_len)
            preds = model.predict(ids, valid)
            refs = [inst.answer for inst in instances]
            groups = group_accuracy_gap(preds, refs, [inst.group for inst in instances])
            sides[side] = {**groups.to_dict(), "accuracy": accuracy(preds, refs)}
        gap_before, gap_after = sides["before"]["gap"], sides["after"]["gap"]
        report = {
            "split": args.split,
            "before": sides["before"],
            "after": sides["after"],
            "gap_reduction_rel": (gap_before - gap_after) / gap_before if gap_before > 0 else None,
            "overall_acc_delta": sides["after"]["accuracy"] - sides["before"]["accuracy"],
        }
        if args.out:
            write_json(args.out, report)
            reduction = report["gap_reduction_rel"]
            print(f"Group gap {gap_before:.4f} -> {gap_after:.4f} "
                  f"(relative reduction {'n/a' if reduction is None else f'{reduction:.3f}'}); wrote {args.out}")
        else:
            print(dumps_json(report, indent=2))
        return 0

    def gradcheck(self, args) -> int:
        config = RunConfig.from_sources(args.config, config_overrides(args), base=TINY_MODEL)
        suites = SUITES if args.suite == "all" else (args.suite,)
        result = run_gradcheck(config, suites, entries_per_param=args.entries,
                               corrupt=args.corrupt, debug=self.debug)
        if args.out:
            write_json(args.out, result)
        print(dumps_json(result, indent=2))
        if not result["passed"]:
            raise T.GradientCheckError(
                f"max relative error {result['max_rel_error']:.3e} exceeds the tolerance "
                f"at {result['worst_parameter']}")
        return 0

    def aggregate(self, args) -> int:
        reports = []
        for path in args.reports:
            try:
                with open(path, "r", encoding="utf-8") as handle:
                    reports.append(json.load(handle))
            except json.JSONDecodeError as e:
                raise ValidationError(f"{path}: not a JSON report: {e}")
        table = aggregate_reports(reports)
        write_json(args.out, {"runs": [str(p) for p in args.reports], "metrics": table})
        headline = table.get("accuracy")
        summary = "" if headline is None else f"; accuracy {headline['mean']:.4f} ± {headline['std']:.4f}"
        print(f"Aggregated {len(reports)} reports into {args.out}{summary}")
        return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="readlens", description="Interpretable, debiased reading-comprehension models")
    parser.add_argument("--debug", action="store_true", help="progress output on stderr")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="generate a synthetic dataset")
    gen.add_argument("--spec", help="key-value file of generator settings")
    gen.add_argument("--out", required=True)
    gen.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    for f in fields(GeneratorSpec):
        gen.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=f.type, default=None)

    train = commands.add_parser("train", help="train a model")
    train.add_argument("--config")
    add_config_flags(train, ("model", "train", "debias", "paths"))

    ev = commands.add_parser("eval", help="evaluate a checkpoint on one split")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test", choices=SPLITS)
    ev.add_argument("--out")
    ev.add_argument("--baseline-trials", type=int, default=0,
                    help="also report the random-highlight alignment baseline")
    ev.add_argument("--seed", type=int, default=0, help="seed for the baseline draws")

    ex = commands.add_parser("explain", help="heatmaps, attributions and a sheet for one instance")
    ex.add_argument("--model", required=True)
    ex.add_argument("--data", required=True)
    ex.add_argument("--id", required=True)
    ex.add_argument("--split", choices=SPLITS)
    ex.add_argument("--out", required=True)
    ex.add_argument("--config")
    ex.add_argument("--reduce", choices=("column", "row"), default="column")
    ex.add_argument("--layout", choices=("letter", "card"), default="letter")
    ex.add_argument("--no-sheet", action="store_true")
    add_config_flags(ex, ("heatmap",))

    fr = commands.add_parser("fairness-report", help="per-group accuracy before and after debiasing")
    fr.add_argument("--model-before", required=True)
    fr.add_argument("--model-after", required=True)
    fr.add_argument("--data", required=True)
    fr.add_argument("--split", default="test", choices=SPLITS)
    fr.add_argument("--out")

    gc = commands.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--config")
    gc.add_argument("--suite", choices=SUITES + ("all",), default="all")
    gc.add_argument("--entries", type=int, default=16, help="entries probed per parameter (0 = all)")
    gc.add_argument("--out")
    gc.add_argument("--corrupt", help=argparse.SUPPRESS)
    add_config_flags(gc, ("model", "train", "debias"))

    ag = commands.add_parser("aggregate", help="mean and std of metrics over several eval reports")
    ag.add_argument("--reports", nargs="+", required=True)
    ag.add_argument("--out", required=True)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return ReadLensCLI(debug=debug_enabled(args.debug)).handle_command(args)


if __name__ == "__main__":
    sys.exit(main())
