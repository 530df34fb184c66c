"""Command-line entry point: ``jscc <subcommand> --config FILE``.

Exit codes: 0 success, 1 config or runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import sys
from importlib import resources
from pathlib import Path
from typing import List, Optional

from . import experiments as ex
from .config import ConfigError, ExperimentConfig, load_config
from .training import TrainingDivergedError

SUBCOMMANDS = (
    "gradcheck", "train", "eval", "sweep-snr", "compare-joint-separate",
    "sweep-bandwidth", "sweep-beta", "sample", "mmd",
)


def default_config_path() -> Path:
    return Path(str(resources.files("jscc") / "configs" / "default.json"))


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jscc", description="Learned joint source-channel coding experiments.")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="experiment config (JSON); 'default' for the bundled one")
        sp.add_argument("--out", default=None, help="output directory (overrides the config)")
        if name == "eval":
            sp.add_argument("--checkpoint", default=None, help="checkpoint to evaluate (default: OUT/model.ckpt)")
    return p


def _summary(name: str, rows) -> str:
    if not rows:
        return f"{name}: no rows"
    best = min(rows, key=lambda r: r.distortion_l2)
    return f"{name}: {len(rows)} rows, best distortion_l2={best.distortion_l2:.6g} ({best.run_id})"


def run(command: str, cfg: ExperimentConfig, out_dir: Path, checkpoint: Optional[str] = None) -> str:
    if command == "gradcheck":
        errs = ex.gradcheck(cfg)
        worst = max(errs.values())
        detail = " ".join(f"{k}={v:.3g}" for k, v in errs.items())
        status = "ok" if worst < 1e-3 else "FAILED"
        line = f"gradcheck {status}: max relative error {worst:.3e} ({detail})"
        if worst >= 1e-3:
            raise RuntimeError(line)
        return line
    if command == "train":
        _, rows = ex.train_and_save(cfg, out_dir)
        return _summary("train", rows)
    if command == "eval":
        rows = ex.evaluate_checkpoint(cfg, checkpoint, out_dir)
        return _summary("eval", rows)
    if command == "sample":
        path, grid = ex.sample_grid(cfg, out_dir)
        return f"sample: wrote {grid.shape[1]}x{grid.shape[0]} grid to {path}"

    ex._archive_config(cfg, out_dir)
    if command == "compare-joint-separate":
        best, everything = ex.compare_joint_separate(cfg)
        ex.write_metrics_csv(ex.metrics_path(out_dir, "compare-joint-separate"), best)
        ex.write_metrics_csv(ex.metrics_path(out_dir, "compare-joint-separate_all"), everything)
        wins = ex.majority_joint_wins(best, cfg.eval.snrs)
        votes = " ".join(f"snr{s:g}:{w}/{n}" for s, (w, n) in wins.items())
        return f"compare-joint-separate: {len(best)} best-beta rows; joint<=separate {votes}"
    harness = {
        "sweep-snr": ex.sweep_snr,
        "sweep-bandwidth": ex.sweep_bandwidth,
        "sweep-beta": ex.sweep_beta,
        "mmd": ex.mmd_report,
    }[command]
    rows = harness(cfg)
    ex.write_metrics_csv(ex.metrics_path(out_dir, command), rows)
    if command == "mmd":
        vals = ", ".join(f"{r.mmd:.4g}" for r in rows)
        return f"mmd: {len(rows)} rows, mmd=[{vals}]"
    return _summary(command, rows)


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:  # argparse prints usage itself
        return 0 if exc.code == 0 else 2
    try:
        path = default_config_path() if args.config == "default" else Path(args.config)
        cfg = load_config(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 1
    out_dir = Path(args.out) if args.out else cfg.output_dir
    try:
        line = run(args.command, cfg, out_dir, getattr(args, "checkpoint", None))
    except (TrainingDivergedError, RuntimeError, ValueError, OSError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return 1
    print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
