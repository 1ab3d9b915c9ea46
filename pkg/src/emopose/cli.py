"""Command-line entry point: synth | train | eval | perturb | report.

Every run is fully determined by its flags: all randomness derives from
--seed, and rerunning a command with identical flags and inputs rewrites
byte-identical output files.  Wall-clock timestamps live only in
run_manifest.jsonl, which exists purely as an audit trail.

Exit codes: 0 success, 1 usage error, 2 data or contract error.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .data import (
    WindowConfig,
    load_frames,
    prepare_splits,
    save_frames,
    save_norm_stats,
    synth_generate,
)
from .errors import ContractError, ParseError, SchemaError
from .evaluation import (
    PerturbationConfig,
    evaluate_mpjpe,
    gate_report,
    save_sensitivity_report,
    sensitivity_sweep,
)
from .models import load_checkpoint, save_checkpoint
from .training import EpochLog, TrainConfig, evaluate_loss, fit

__all__ = ["main", "dispatch"]

DEFAULT_RATIOS = (0.70, 0.15, 0.15)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad usage; this artifact reserves 2 for
    # data errors, so remap usage problems to a catchable exception
    def error(self, message):
        print(f"usage error: {message}", file=sys.stderr)
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="emopose", description=__doc__)
    parser.add_argument("--version", action="version", version=f"emopose {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic pose-emotion sequence file")
    p.add_argument("--mode", choices=["coupled", "decoupled"], default="coupled")
    p.add_argument("--frames", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output JSONL frame file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a run directory")
    p.add_argument("--model", choices=["baseline", "fusion", "world"], required=True)
    p.add_argument("--data", required=True, help="JSONL frame file")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--obs-len", type=int, default=10)
    p.add_argument("--horizon", type=int, default=15)
    p.add_argument("--gap", type=int, default=None, help="frames discarded between splits")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a data split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--out", default=None, help="optional JSON report file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("perturb", help="counterfactual emotion-perturbation analysis")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--sigma", default="0.1", help="noise std, or comma-separated list")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="report file (.json or .csv)")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("report", help="gate-evolution report from a metrics log")
    p.add_argument("--data", required=True, help="metrics.jsonl written by train")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _manifest(out_dir: Path, args: argparse.Namespace) -> None:
    line = {
        "written_at": datetime.now(timezone.utc).isoformat(),
        "command": args.command,
    }
    with (out_dir / "run_manifest.jsonl").open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(line) + "\n")


def _resolve_splits(data_path: str, obs_len: int, horizon: int, gap: int | None):
    dataset = load_frames(data_path)
    window = WindowConfig(obs_len=obs_len, horizon=horizon)
    if gap is None:
        gap = window.span - 1
    return prepare_splits([dataset], window=window, ratios=DEFAULT_RATIOS, gap=gap), gap


def cmd_synth(args) -> int:
    dataset = synth_generate(args.mode, args.frames, args.seed)
    save_frames(dataset, args.out)
    print(f"wrote {len(dataset)} frames to {args.out} (mode={args.mode}, seed={args.seed})")
    return 0


def cmd_train(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {
        "command": "train",
        "model": args.model,
        "data": args.data,
        "epochs": args.epochs,
        "lr": args.lr,
        "batch": args.batch,
        "obs_len": args.obs_len,
        "horizon": args.horizon,
        "gap": args.gap if args.gap is not None else args.obs_len + args.horizon - 1,
        "split_ratios": list(DEFAULT_RATIOS),
        "seed": args.seed,
        "hidden": 128,
        "loss_space": "normalized",
        "out": str(out_dir),
    }
    _write_json(out_dir / "config.json", resolved)
    _manifest(out_dir, args)

    splits, gap = _resolve_splits(args.data, args.obs_len, args.horizon, args.gap)
    if not splits.train:
        raise ContractError("training split produced no windows; provide more frames")
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, seed=args.seed)
    result = fit(args.model, splits.train, splits.val, splits.test, cfg)

    split_meta = {"ratios": list(DEFAULT_RATIOS), "gap": gap}
    save_checkpoint(result.params, splits.stats, out_dir / "model.json", split=split_meta)
    save_checkpoint(result.best_params, splits.stats, out_dir / "model_best.json", split=split_meta)
    save_norm_stats(splits.stats, out_dir / "norm_stats.json")
    with (out_dir / "metrics.jsonl").open("w", encoding="utf-8") as fh:
        for log in result.logs:
            fh.write(json.dumps(log.to_dict()) + "\n")

    last = result.logs[-1]
    print(
        f"trained {args.model} for {args.epochs} epochs: "
        f"train={last.train_loss:.6f} val={last.val_loss} test={last.test_loss} "
        f"lambda={last.lambda_emo}"
    )
    return 0


def _load_split(ckpt, data_path: str, split: str):
    config = ckpt.params.config
    meta = ckpt.split or {"ratios": list(DEFAULT_RATIOS), "gap": config.obs_len + config.horizon - 1}
    dataset = load_frames(data_path)
    splits = prepare_splits(
        [dataset],
        window=WindowConfig(obs_len=config.obs_len, horizon=config.horizon),
        ratios=tuple(meta["ratios"]),
        gap=int(meta["gap"]),
    )
    return getattr(splits, split)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    windows = _load_split(ckpt, args.data, args.split)
    if not windows:
        raise ContractError(f"split {args.split!r} produced no windows")
    report = {
        "ckpt": args.ckpt,
        "split": args.split,
        "n_windows": len(windows),
        "loss": evaluate_loss(ckpt.params, windows),
        "mpjpe": evaluate_mpjpe(ckpt.params, windows, ckpt.stats),
        "loss_space": "normalized",
    }
    print(json.dumps(report, indent=1, sort_keys=True))
    if args.out:
        _write_json(Path(args.out), report)
    return 0


def cmd_perturb(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    windows = _load_split(ckpt, args.data, args.split)
    if not windows:
        raise ContractError(f"split {args.split!r} produced no windows")
    try:
        sigmas = [float(s) for s in str(args.sigma).split(",") if s.strip()]
    except ValueError as e:
        raise ContractError(f"could not parse --sigma {args.sigma!r}") from e
    cfg = PerturbationConfig(sigma=sigmas[0], trials=args.trials, seed=args.seed)
    results = sensitivity_sweep(ckpt.params, windows, sigmas, cfg)
    for r in results:
        print(
            f"sigma={r.sigma:g} mean_delta={r.mean_delta:.6g} std_delta={r.std_delta:.6g} "
            f"({len(r.per_trial)} windows, {args.trials} trials each)"
        )
    if args.out:
        save_sensitivity_report(results, args.out)
    return 0


def cmd_report(args) -> int:
    logs = []
    with Path(args.data).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                logs.append(EpochLog(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as e:
                raise ParseError(f"{args.data}:{lineno}: bad metrics line ({e})") from e
    summary = gate_report(logs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_lines = ["epoch,lambda"]
    csv_lines += [f"{log.epoch},{log.lambda_emo!r}" for log in logs]
    (out_dir / "gate_evolution.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    _write_json(out_dir / "gate_summary.json", summary.to_dict())
    print(
        f"gate: final={summary.final_lambda:.6g} "
        f"band=[{summary.band_min:.6g}, {summary.band_max:.6g}] active={summary.active}"
    )
    return 0


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(list(argv))
    except _UsageError:
        return 1
    except SystemExit as e:  # --help / --version paths
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ContractError, ParseError, SchemaError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
