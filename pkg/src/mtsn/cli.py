"""Command-line front end.

Subcommands: ``gen`` (synthesize a corpus), ``train``, ``eval``,
``grid``, ``analyze`` (cosine + 2-D projection of a checkpoint), and
``gradcheck`` (finite-difference verification of every backward rule).

Every value can come from three places, later ones winning: built-in
defaults, a JSON config file (``--config``, keys = long flag names with
underscores), then explicit flags. The effective configuration is echoed
to ``effective_config.json`` in the output directory, which makes any
run reproducible from its artifacts alone.

Exit codes: 0 success; 2 usage, validation, or input-file problems;
3 runtime failures (training divergence, grid cell failure, failed
gradient checks). The default output root is the current directory or
``$MTSN_OUT_ROOT`` when set.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import data as data_mod
from . import experiments as exp_mod
from .errors import (
    GridError,
    MtsnError,
    NumericError,
    TrainingError,
)
from .gradcheck import run_standard_checks
from .models import (
    MtsnModel,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)

USAGE_EXIT = 2
RUNTIME_EXIT = 3


def _out_dir(args, subcommand: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("MTSN_OUT_ROOT", ".")
    return Path(root) / f"mtsn-{subcommand}"


def _echo_config(out: Path, subcommand: str, effective: Dict[str, object]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {"subcommand": subcommand, **effective}
    (out / "effective_config.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _merge_config_file(args: argparse.Namespace, parser: argparse.ArgumentParser,
                       explicit: argparse.Namespace) -> None:
    """Overlay config-file values onto defaults, keeping explicit flags on top."""
    if not getattr(args, "config", None):
        return
    path = Path(args.config)
    if not path.is_file():
        parser.error(f"config file not found: {path}")
    try:
        loaded = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        parser.error(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(loaded, dict):
        parser.error(f"config file {path} must hold a JSON object")
    known = set(vars(args))
    for key, value in loaded.items():
        dest = key.replace("-", "_")
        if dest not in known:
            parser.error(f"config file {path} sets unknown option '{key}'")
        if not hasattr(explicit, dest):  # flag not given on the command line
            setattr(args, dest, value)


def _comma_list(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _comma_floats(text: str) -> List[float]:
    try:
        return [float(part) for part in _comma_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


# ---------------------------------------------------------------------------
# argument declaration (shared between the real parse and the explicit-only parse)


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=data_mod.preset_names(),
                   help="named corpus recipe to start from")
    p.add_argument("--num-intents", type=int)
    p.add_argument("--languages", type=_comma_list, metavar="A,B")
    p.add_argument("--train-texts", type=int)
    p.add_argument("--test-texts", type=int)
    p.add_argument("--speakers", type=int)
    p.add_argument("--acoustic-dim", type=int)
    p.add_argument("--teacher-dim", type=int)
    p.add_argument("--t-min", type=int)
    p.add_argument("--t-max", type=int)
    p.add_argument("--sigma-c", type=float)
    p.add_argument("--sigma-a", type=float)
    p.add_argument("--sigma-l", type=float)
    p.add_argument("--sigma-s", type=float)
    p.add_argument("--kappa", type=float)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden-size", type=int, default=128)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float64")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtsn",
        description="Teacher-student speech-intent classification workbench")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen", help="generate a synthetic bilingual corpus")
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory (train/ and test/ written inside)")
    _add_spec_flags(p)

    p = sub.add_parser("train", help="train one model on a generated corpus")
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("--data", required=True, help="corpus directory from 'gen'")
    p.add_argument("--model", choices=exp_mod.FRAMEWORKS, default="mtsn")
    p.add_argument("--train-lang", default="both",
                   help="language tag to train on, or 'both'")
    p.add_argument("--eval-every", type=int, default=0,
                   help="evaluate on the test split every N epochs")
    p.add_argument("--out")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="corpus directory from 'gen'")
    p.add_argument("--test-lang", default="both",
                   help="language tag to evaluate on, or 'both'")
    p.add_argument("--out")

    p = sub.add_parser("grid", help="train/evaluate a grid of experiment cells")
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("--data", required=True, help="corpus directory from 'gen'")
    p.add_argument("--frameworks", type=_comma_list, default=["mtsn", "baseline2"],
                   metavar="A,B")
    p.add_argument("--train-langs", type=_comma_list, default=["both"],
                   metavar="A,B,both")
    p.add_argument("--fractions", type=_comma_floats, default=None,
                   metavar="0.1,0.5,0.7", help="training-data fractions to sweep")
    p.add_argument("--seeds", type=int, default=1, help="seeds per cell")
    p.add_argument("--jobs", type=int, default=1, help="parallel cell workers")
    p.add_argument("--out")
    _add_train_flags(p)

    p = sub.add_parser("analyze", help="cosine alignment and 2-D projection "
                                       "of a trained checkpoint")
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="corpus directory from 'gen'")
    p.add_argument("--with-initial", action="store_true",
                   help="also report the untrained model's alignment")
    p.add_argument("--out")

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    p.add_argument("--tol", type=float, default=None,
                   help="relative-error tolerance (default 1e-4)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=None,
                   help="random points per check (default 10)")
    p.add_argument("--checks", type=_comma_list, default=None,
                   metavar="A,B", help="subset of registry checks to run")

    return parser


# ---------------------------------------------------------------------------
# subcommand implementations


def _cmd_gen(args) -> int:
    overrides = {}
    for field_name in ("num_intents", "languages", "train_texts", "test_texts",
                       "speakers", "acoustic_dim", "teacher_dim", "t_min", "t_max",
                       "sigma_c", "sigma_a", "sigma_l", "sigma_s", "kappa"):
        value = getattr(args, field_name)
        if value is not None:
            overrides[field_name] = tuple(value) if field_name == "languages" else value
    if args.preset:
        spec = data_mod.preset(args.preset, seed=args.seed, **overrides)
    else:
        missing = [f for f in ("num_intents", "languages", "train_texts",
                               "test_texts", "speakers") if f not in overrides]
        if missing:
            print(f"gen: without --preset, these options are required: "
                  f"{', '.join('--' + m.replace('_', '-') for m in missing)}",
                  file=sys.stderr)
            return USAGE_EXIT
        spec = data_mod.CorpusSpec(seed=args.seed, **overrides)
    out = _out_dir(args, "gen")
    train, test = data_mod.generate_corpus(spec)
    data_mod.save_dataset(train, out / "train")
    data_mod.save_dataset(test, out / "test")
    _echo_config(out, "gen", {"preset": args.preset, "spec": asdict(spec)})
    print(f"wrote {len(train)} train and {len(test)} test examples to {out}")
    return 0


def _load_split(root: str, split: str) -> data_mod.Dataset:
    return data_mod.load_dataset(Path(root) / split)


def _train_config(args, train_language: str = "both") -> exp_mod.TrainConfig:
    return exp_mod.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        alpha=args.alpha, temperature=args.temperature, seed=args.seed,
        train_language=train_language, eval_every=getattr(args, "eval_every", 0),
        hidden_size=args.hidden_size, dtype=args.dtype)


def _cmd_train(args) -> int:
    train_ds = _load_split(args.data, "train")
    cfg = _train_config(args, args.train_lang)
    eval_ds = _load_split(args.data, "test") if cfg.eval_every > 0 else None
    out = _out_dir(args, "train")
    _echo_config(out, "train", {"model": args.model, "data": str(args.data),
                                **asdict(cfg)})
    result = exp_mod.train(args.model, train_ds, cfg, eval_dataset=eval_ds)
    meta = {"epoch": cfg.epochs, "seed": cfg.seed,
            "config_hash": exp_mod.config_hash(cfg)}
    ckpt_path = out / "checkpoint.mtsn"
    save_checkpoint(ckpt_path, result.model, result.adam, metadata=meta)
    with open(out / "loss_history.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_total", "loss_tl", "loss_intent",
                         "eval_accuracy"])
        for s in result.history:
            writer.writerow([s.epoch, repr(s.loss_total), repr(s.loss_tl),
                             repr(s.loss_intent),
                             "" if s.eval_accuracy is None else f"{s.eval_accuracy:.2f}"])
    last = result.history[-1]
    print(f"trained {args.model} for {cfg.epochs} epochs; "
          f"final loss {last.loss_total:.4f}; checkpoint at {ckpt_path}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, _ = model_from_checkpoint(ckpt)
    test_ds = _load_split(args.data, "test")
    if args.test_lang != "both":
        test_ds = data_mod.filter_language(test_ds, (args.test_lang,))
    report = exp_mod.evaluate(model, test_ds)
    out = _out_dir(args, "eval")
    _echo_config(out, "eval", {"checkpoint": str(args.checkpoint),
                               "data": str(args.data), "test_lang": args.test_lang})
    with open(out / "eval.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["test_language", "accuracy", "n_examples"])
        for lang in sorted(report.per_language):
            writer.writerow([lang, f"{report.per_language[lang]:.2f}",
                             report.per_language_n[lang]])
        writer.writerow(["combined", f"{report.accuracy:.2f}", report.n_examples])
    print(f"accuracy {report.accuracy:.2f}% over {report.n_examples} examples "
          f"({args.test_lang})")
    return 0


def _cmd_grid(args) -> int:
    train_ds = _load_split(args.data, "train")
    test_ds = _load_split(args.data, "test")
    cfg = _train_config(args)
    out = _out_dir(args, "grid")
    _echo_config(out, "grid", {
        "data": str(args.data), "frameworks": args.frameworks,
        "train_langs": args.train_langs, "fractions": args.fractions,
        "seeds": args.seeds, "jobs": args.jobs, **asdict(cfg)})
    report = exp_mod.run_grid(train_ds, test_ds, args.frameworks, args.train_langs,
                              cfg, out, fractions=args.fractions, seeds=args.seeds,
                              jobs=args.jobs)
    n_cells = len(report["cells"])
    print(f"grid complete: {n_cells} cells x {args.seeds} seed(s); reports in {out}")
    return 0


def _cmd_analyze(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, _ = model_from_checkpoint(ckpt)
    if not isinstance(model, MtsnModel):
        print("analyze: the checkpoint does not hold a model with a transfer layer",
              file=sys.stderr)
        return USAGE_EXIT
    test_ds = _load_split(args.data, "test")
    out = _out_dir(args, "analyze")
    _echo_config(out, "analyze", {"checkpoint": str(args.checkpoint),
                                  "data": str(args.data),
                                  "with_initial": bool(args.with_initial)})
    final = exp_mod.cosine_analysis(model, test_ds, at="final")
    initial = None
    if args.with_initial:
        fresh = MtsnModel(model.acoustic_dim, model.teacher_dim, model.hidden_size,
                          model.num_intents, loss_cfg=model.loss_cfg,
                          seed=int(ckpt.metadata.get("seed", 0)), dtype=model.dtype)
        initial = exp_mod.cosine_analysis(fresh, test_ds, at="initial")
    langs = sorted(final.per_language) + ["combined"]
    with open(out / "cosine_alignment.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["language", "cosine_final"]
        if initial is not None:
            header.append("cosine_initial")
        writer.writerow(header)
        for lang in langs:
            value = final.combined if lang == "combined" else final.per_language[lang]
            row = [lang, f"{value:.4f}"]
            if initial is not None:
                ivalue = initial.combined if lang == "combined" \
                    else initial.per_language[lang]
                row.append(f"{ivalue:.4f}")
            writer.writerow(row)

    w = model.transfer.w.data
    b = model.transfer.b.data
    points, intents, languages, sources = [], [], [], []
    for ex in test_ds.examples:
        e_te = (ex.acoustic.astype(model.dtype) @ w.T + b).mean(axis=0)
        points.append(e_te)
        intents.append(ex.intent)
        languages.append(ex.language)
        sources.append("transferred")
        points.append(ex.teacher.astype(model.dtype))
        intents.append(ex.intent)
        languages.append(ex.language)
        sources.append("teacher")
    exp_mod.projection_export(np.vstack(points), intents, languages, sources,
                              out / "projection.csv")
    print(f"cosine alignment (combined): {final.combined:.4f}"
          + (f" (initial {initial.combined:.4f})" if initial is not None else "")
          + f"; artifacts in {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    kwargs = {}
    if args.tol is not None:
        kwargs["tol"] = args.tol
    if args.points is not None:
        kwargs["points"] = args.points
    results = run_standard_checks(names=args.checks, seed=args.seed, **kwargs)
    for r in results:
        print(r.line())
    failures = [r for r in results if not r.passed]
    print(f"{len(results)} ops checked, {len(failures)} failures")
    if failures:
        print("failed: " + ", ".join(r.name for r in failures), file=sys.stderr)
        return RUNTIME_EXIT
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "grid": _cmd_grid,
    "analyze": _cmd_analyze,
    "gradcheck": _cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    # reparse with suppressed defaults to learn which flags were explicit,
    # so config-file values slot in underneath them
    explicit_parser = build_parser()
    for action in explicit_parser._subparsers._group_actions[0].choices.values():
        for act in action._actions:
            act.default = argparse.SUPPRESS
    explicit = explicit_parser.parse_args(argv)
    _merge_config_file(args, parser, explicit)

    try:
        return _COMMANDS[args.subcommand](args)
    except (TrainingError, GridError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT
    except MtsnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT


if __name__ == "__main__":
    sys.exit(main())
