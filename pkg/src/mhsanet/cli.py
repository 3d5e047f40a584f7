"""Command-line entry point: ``mhsanet <command> ...``.

Exit codes: 0 success, 2 configuration or data error, 3 numeric failure,
4 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import gradcheck as gc
from .data_io import (ContainerError, attention_occlusion_score, export_attention, generate_dataset, load_container,
                      load_splits, save_splits, spec_dict)
from .errors import ConfigError, DataError, DimensionError, EvaluationError, NumericError
from .model import VARIANTS, MHSAModel
from .pipeline import STANDARD_GRIDS, SWEEP_PARAMS, evaluate, parse_values, sweep, sweep_csv
from .training import TrainingAborted, train

log = logging.getLogger("mhsanet")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4
SPLITS = ("train", "query", "gallery")


class VerificationFailed(Exception):
    pass


def _write_manifest(out: Path, command: str, **info) -> None:
    info = {"command": command, **info}
    (out / "manifest.json").write_text(json.dumps(info, indent=2, sort_keys=True, default=str) + "\n")


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


def _load_data(data_dir, names=SPLITS):
    try:
        return load_splits(data_dir, names)
    except FileNotFoundError as exc:
        raise DataError(f"dataset file missing: {exc.filename}") from None


def _load_model(path) -> MHSAModel:
    try:
        entries = load_container(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    return MHSAModel.from_state(entries)


def _check_dims(model: MHSAModel, split) -> None:
    b = model.config.backbone
    expect = (b.J, b.C) if b.provider == "synthetic" else (b.Hf * 4, b.Wf * 4, b.image_channels)
    if split.x.shape[1:] != expect:
        raise ConfigError(f"data samples have shape {split.x.shape[1:]}, the model expects {expect}")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = config_mod.load(args.config)
    out = _outdir(args.out)
    existing = [n for n in SPLITS if (out / f"{n}.mhsa").exists()]
    if existing and not args.force:
        raise ConfigError(f"{out} already holds {', '.join(existing)}; pass --force to overwrite")
    splits = generate_dataset(cfg.data)
    paths = save_splits(splits, out)
    counts = {n: len(s) for n, s in splits.items()}
    _write_manifest(out, "gen-data", spec=spec_dict(cfg.data), counts=counts,
                    files={n: p.name for n, p in paths.items()})
    print(" ".join(f"{n}={c}" for n, c in counts.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = config_mod.load(args.config)
    splits = _load_data(args.data, ("train",))
    out = _outdir(args.out)
    model_cfg = cfg.model_config()
    expect = (model_cfg.backbone.J, model_cfg.backbone.C)
    if model_cfg.backbone.provider == "synthetic" and splits["train"].x.shape[1:] != expect:
        raise ConfigError(f"training data shape {splits['train'].x.shape[1:]} does not match config {expect}")
    try:
        res = train(model_cfg, cfg.train_settings(), splits["train"], out_dir=out)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}; last good checkpoint kept in {out / 'checkpoint.mhsa'}", file=sys.stderr)
        return EXIT_NUMERIC
    _write_manifest(out, "train", config=config_mod.to_dict(cfg), steps=len(res.rows),
                    files=["checkpoint.mhsa", "metrics.csv"])
    if res.rows:
        first, last = res.rows[0]["total"], res.rows[-1]["total"]
        print(f"steps {len(res.rows)}  loss {first:.4f} -> {last:.4f}")
    else:
        print("0 steps; checkpoint holds the initialization")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    splits = _load_data(args.data, ("query", "gallery"))
    _check_dims(model, splits["query"])
    fusion = args.fusion
    if fusion is not None and not model.config.branch_enabled:
        raise ConfigError("--fusion needs a model with the attention branch")
    report = evaluate(model, splits["query"], splits["gallery"], args.variant, fusion)
    out = _outdir(args.out) if args.out else Path(args.checkpoint).parent
    name = f"eval_{args.variant}_{report.fusion}.csv"
    (out / name).write_text(report.to_csv())
    if args.out:
        _write_manifest(out, "eval", checkpoint=str(args.checkpoint), variant=args.variant, fusion=report.fusion,
                        files=[name])
    print(report.summary())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = range(args.seed, args.seed + args.n_seeds)
    if args.corrupt:
        with gc.corrupted_gradient(args.corrupt):
            results, elapsed = gc.timed(seeds)
    else:
        results, elapsed = gc.timed(seeds)
    print(gc.report(results, elapsed))
    failing = [r.component for r in results.values() if not r.passed]
    if failing:
        raise VerificationFailed(f"gradient check failed for: {', '.join(failing)}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = config_mod.load(args.config)
    if args.param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {args.param!r}")
    values = STANDARD_GRIDS[args.param] if args.values == "standard" else parse_values(args.param, args.values)
    splits = _load_data(args.data) if args.data else None
    rows = sweep(cfg, args.param, values, splits)
    text = sweep_csv(rows)
    if args.out:
        out = _outdir(args.out)
        (out / f"sweep_{args.param}.csv").write_text(text)
        _write_manifest(out, "sweep", param=args.param, values=values, config=config_mod.to_dict(cfg),
                        failures={repr(r["value"]): r["error"] for r in rows if "error" in r},
                        files=[f"sweep_{args.param}.csv"])
    sys.stdout.write(text)
    return EXIT_OK


def cmd_export_attn(args) -> int:
    model = _load_model(args.checkpoint)
    if not model.config.branch_enabled:
        raise ConfigError("checkpoint has no attention branch")
    split = _load_data(args.data, (args.split,))[args.split]
    _check_dims(model, split)
    if not 0 <= args.sample < len(split):
        raise DataError(f"sample index {args.sample} outside [0, {len(split)})")
    out = _outdir(args.out)
    x = split.x[args.sample:args.sample + 1]
    alpha = model.attention(x)[0]
    b = model.config.backbone
    paths = export_attention(alpha, b.Hf, b.Wf, out / f"{args.split}{args.sample}")
    mask = split.masks[args.sample]
    score = attention_occlusion_score(alpha, mask)
    beta = model.fusion_weights(x)
    _write_manifest(out, "export-attn", checkpoint=str(args.checkpoint), split=args.split, sample=args.sample,
                    files=[p.name for p in paths])
    print(f"occlusion score {score!r}")
    if beta is not None:
        print(f"fusion-weighted occlusion score {attention_occlusion_score(alpha, mask, beta[0])!r}")
    return EXIT_OK


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mhsanet", description="Multi-head self-attention re-identification toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic train/query/gallery splits")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true", help="overwrite existing split files")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write checkpoint.mhsa + metrics.csv")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the query/gallery splits")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--variant", choices=VARIANTS, default="full")
    e.add_argument("--fusion", choices=("saffm", "concat", "sum"), default=None)
    e.add_argument("--out", help="directory for the report CSV (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and of the full objective")
    c.add_argument("--seed", type=int, default=0, help="first seed")
    c.add_argument("--n-seeds", type=int, default=5)
    c.add_argument("--corrupt", metavar="OP", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sweep", help="train+evaluate over a grid of one hyper-parameter")
    s.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    s.add_argument("--values", required=True, help="comma-separated list, or 'standard' for the built-in grid")
    s.add_argument("--config", required=True)
    s.add_argument("--data", help="dataset directory (default: generate from the config)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    x = sub.add_parser("export-attn", help="write per-head attention heatmaps for one sample")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--sample", type=int, required=True)
    x.add_argument("--split", choices=SPLITS, default="query")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_attn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VerificationFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (ConfigError, DataError, DimensionError, ContainerError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericError, TrainingAborted) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
