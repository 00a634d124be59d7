"""Command-line entry point: ``mckd <verb> [options]``.

Verbs: gen, train, eval, sweep-alpha, ablate-norm, gradcheck.
Exit codes: 0 success, 1 failed gradient check, 2 configuration error,
3 I/O or format error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data as D
from .checks import format_report, run_gradchecks
from .experiments import DEFAULT_ALPHAS, DEFAULT_NORMS, svg_line_chart, sweep
from .model import CheckpointError, ModelConfig, load_checkpoint, save_checkpoint
from .trainer import (NumericalAbort, TrainConfig, all_patterns, evaluate, format_row,
                      metrics_header, model_config_for, train)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4
SECTIONS = ("data", "model", "train", "run")
MODEL_KEYS = ("feature_dim", "encoder_hidden", "decoder_hidden", "feature_norm")

log = logging.getLogger("mckd")


class UsageError(Exception):
    """Bad configuration; maps to exit code 2."""


# ------------------------------------------------------------------- config


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except ValueError:
        pass
    if "," in text:
        return [parse_value(t) for t in text.split(",") if t.strip()]
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    return text


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """Flat ``section.key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        section = key.split(".", 1)[0]
        if "." not in key or section not in SECTIONS:
            raise UsageError(f"{origin}:{lineno}: key {key!r} must start with one of {SECTIONS}")
        out[key] = parse_value(value)
    return out


def load_config(path: str | None, overrides=()) -> dict:
    cfg = {}
    if path:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config file {p}: {exc.strerror or exc}") from exc
        cfg.update(parse_config_text(text, str(p)))
    for item in overrides:
        cfg.update(parse_config_text(item, "--set"))
    return cfg


def section(cfg: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in sorted(cfg.items()))


def build_train_config(cfg: dict, dataset: D.Dataset) -> TrainConfig:
    opts = section(cfg, "train")
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(opts) - known
    if unknown:
        raise UsageError(f"unknown train keys: {sorted(unknown)}")
    opts.setdefault("probe_modality", dataset.spec.informative)
    if isinstance(opts.get("iwv_init"), list):
        opts["iwv_init"] = tuple(opts["iwv_init"])
    config = TrainConfig(**opts)
    try:
        config.validate(dataset.spec.n_modalities)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return config


def build_model_config(cfg: dict, dataset: D.Dataset) -> ModelConfig:
    opts = section(cfg, "model")
    unknown = set(opts) - set(MODEL_KEYS)
    if unknown:
        raise UsageError(f"unknown model keys: {sorted(unknown)} (allowed: {MODEL_KEYS})")
    for k in ("encoder_hidden", "decoder_hidden"):
        if k in opts and not isinstance(opts[k], list):
            opts[k] = [opts[k]]
    norm = opts.pop("feature_norm", "none")
    try:
        mc = model_config_for(dataset, **opts)
        return ModelConfig(**{**mc.to_dict(), "feature_norm": norm})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"model config: {exc}") from exc


def spec_from_config(cfg: dict) -> D.SynthSpec:
    opts = section(cfg, "data")
    if "grid" in opts:
        opts["grid"] = tuple(opts["grid"])
    return D.SynthSpec.from_dict(opts)


def apply_seed(cfg: dict, seed, key: str) -> dict:
    if seed is not None:
        cfg = {**cfg, key: int(seed)}
    return cfg


def make_out(path: str | None, default: str) -> Path:
    out = Path(path or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def dataset_for(cfg: dict, args) -> D.Dataset:
    """Load ``--data`` / ``run.dataset`` if given, else generate from ``data.*`` keys."""
    path = args.data or cfg.get("run.dataset")
    if path:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"dataset not found: {p}")
        return D.load(p)
    return D.make_dataset(spec_from_config(cfg))


def say(args, *msg) -> None:
    if not args.quiet:
        print(*msg)


# ----------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    cfg = apply_seed(load_config(args.config, args.set), args.seed, "data.seed")
    spec = spec_from_config(cfg)
    out = make_out(args.out, "dataset")
    manifest = D.generate(spec, out)
    say(args, f"wrote {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = apply_seed(load_config(args.config, args.set), args.seed, "train.seed")
    ds = dataset_for(cfg, args)
    config = build_train_config(cfg, ds)
    mc = build_model_config(cfg, ds)
    out = make_out(args.out, "run")
    effective = {**cfg, **{f"train.{k}": v for k, v in config.to_dict().items()},
                 **{f"model.{k}": v for k, v in mc.to_dict().items()},
                 **{f"data.{k}": v for k, v in ds.spec.to_dict().items()}}
    (out / "config.txt").write_text(format_config(effective))
    header = metrics_header(mc.n_modalities)
    with open(out / "metrics.csv", "w") as fh:
        fh.write(",".join(header) + "\n")
        fh.flush()

        def on_row(row):
            fh.write(format_row(row, header) + "\n")
            fh.flush()

        try:
            state, rows = train(config, ds.train, ds.val, mc, on_row=on_row)
        except NumericalAbort as exc:
            (out / "abort.json").write_text(json.dumps(exc.diagnostics, indent=2, sort_keys=True))
            print(f"numerical abort: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
    save_checkpoint(out / "checkpoint", state.model, {"iwv.raw": state.iwv.raw.data},
                    {"seed": config.seed, "iteration": state.iteration,
                     "normalization": config.normalization})
    w = " ".join(f"{v:.4f}" for v in state.iwv.normalized)
    say(args, f"final w: {w}")
    say(args, f"val metric: {evaluate(state.model, ds.val, ()):.4f}")
    return EXIT_OK


def parse_patterns(text: str, n: int) -> list:
    if text == "all":
        return all_patterns(n)
    pats = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if chunk in ("", "none"):
            pats.append(())
            continue
        try:
            pats.append(tuple(sorted(int(t) for t in chunk.split(","))))
        except ValueError as exc:
            raise UsageError(f"bad pattern {chunk!r}; use e.g. '0,2;1' or 'all'") from exc
    for p in pats:
        if any(i < 0 or i >= n for i in p) or len(set(p)) >= n:
            raise UsageError(f"pattern {p} invalid for {n} modalities")
    return pats


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    model, _, _ = load_checkpoint(args.checkpoint)
    cfg = load_config(args.config, args.set)
    ds = dataset_for(cfg, args)
    n = model.config.n_modalities
    if ds.spec.n_modalities != n:
        raise UsageError("dataset and checkpoint disagree on the number of modalities")
    split = ds.splits[args.split]
    metric = "accuracy" if model.config.head == "classification" else "dice"
    lines = ["missing," + ",".join(f"m{i}" for i in range(n)) + f",{metric}"]
    for pat in parse_patterns(args.patterns, n):
        flags = ",".join("0" if i in pat else "1" for i in range(n))
        name = "+".join(str(i) for i in pat) or "none"
        lines.append(f"{name},{flags},{evaluate(model, split, pat)!r}")
    table = "\n".join(lines) + "\n"
    if args.out:
        out = make_out(args.out, "eval")
        (out / "eval.csv").write_text(table)
    say(args, table.rstrip())
    return EXIT_OK


def _prepare(args):
    cfg = apply_seed(load_config(args.config, args.set), args.seed, "train.seed")
    ds = dataset_for(cfg, args)
    return cfg, ds, build_train_config(cfg, ds), build_model_config(cfg, ds)


def cmd_sweep_alpha(args) -> int:
    cfg, ds, config, mc = _prepare(args)
    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas else list(DEFAULT_ALPHAS)
    if any(a < 0 for a in alphas):
        raise UsageError("alphas must be non-negative")
    out = make_out(args.out, "sweep-alpha")
    (out / "config.txt").write_text(format_config({**cfg, "run.alphas": alphas}))
    results = sweep(ds, mc, config, "alpha", alphas)
    seg = mc.head == "segmentation"
    metric = "dice" if seg else "accuracy"
    extra = [f"dice_c{c}" for c in range(1, mc.n_classes)] if seg else []
    lines = [",".join(["alpha", f"planted_missing_{metric}", f"all_present_{metric}",
                       *extra, "argmax_w", "baseline"])]
    for r in results:
        cells = [repr(r["alpha"]), repr(r["planted_missing"]), repr(r["all_present"])]
        cells += [repr(v) for v in r.get("per_class", [])[1:]]
        cells += [str(int(np.argmax(r["w"]))), "yes" if r["alpha"] == 0 else "no"]
        lines.append(",".join(cells))
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    if seg:
        series = {f"class {c} Dice": [r["per_class"][c] for r in results]
                  for c in range(1, mc.n_classes)}
        series["mean Dice"] = [r["planted_missing"] for r in results]
    else:
        series = {"accuracy": [r["planted_missing"] for r in results]}
    planted = ds.spec.informative
    (out / "sweep.svg").write_text(svg_line_chart(
        [f"{a:g}" for a in alphas], series,
        f"modality {planted} missing", "CKD weight alpha", f"test {metric}"))
    say(args, "\n".join(lines))
    return EXIT_OK


def cmd_ablate_norm(args) -> int:
    cfg, ds, config, mc = _prepare(args)
    norms = args.norms.split(",") if args.norms else list(DEFAULT_NORMS)
    for n in norms:
        if n not in DEFAULT_NORMS:
            raise UsageError(f"unknown normalization {n!r}")
    out = make_out(args.out, "ablate-norm")
    (out / "config.txt").write_text(format_config({**cfg, "run.norms": norms}))
    results = sweep(ds, mc, config, "normalization", norms)
    metric = "dice" if mc.head == "segmentation" else "accuracy"
    lines = [f"normalization,planted_missing_{metric},all_present_{metric},argmax_w,default"]
    for r in results:
        lines.append(",".join([r["normalization"], repr(r["planted_missing"]),
                               repr(r["all_present"]), str(int(np.argmax(r["w"]))),
                               "yes" if r["normalization"] == "softmax" else "no"]))
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    say(args, "\n".join(lines))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradchecks(seed=args.seed or 0)
    report = format_report(results)
    if args.out:
        (make_out(args.out, "gradcheck") / "gradcheck.csv").write_text(report + "\n")
    say(args, report)
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "sweep-alpha": cmd_sweep_alpha, "ablate-norm": cmd_ablate_norm,
            "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'section.key = value' config file")
    common.add_argument("--seed", type=int, help="overrides data.seed (gen) or train.seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--quiet", action="store_true", help="suppress stdout reports")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser = argparse.ArgumentParser(prog="mckd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    for name, text in (("train", "train one model"),
                       ("sweep-alpha", "train across CKD weights"),
                       ("ablate-norm", "train across IWV normalizations")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", help="dataset directory or manifest")
        if name == "sweep-alpha":
            p.add_argument("--alphas", help="comma-separated list (default 0,0.01,0.1,0.5,1)")
        if name == "ablate-norm":
            p.add_argument("--norms", help="comma-separated subset of softmax,sigmoid,relu")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint per pattern")
    p.add_argument("--checkpoint", help="checkpoint directory written by train")
    p.add_argument("--data", help="dataset directory or manifest")
    p.add_argument("--patterns", default="all",
                   help="'all' or ';'-separated missing sets, e.g. 'none;0;1,2'")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, D.ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (D.IntegrityError, D.FormatError, CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
