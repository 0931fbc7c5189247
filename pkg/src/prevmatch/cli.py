"""Command-line front end: ``python -m prevmatch <command> [--key value ...]``.

Commands: gen-data, train, eval, ablate, export-curves.  Any config key can
be given as a flag (``--tau_prev 0.8`` or ``--tau-prev=0.8``); flags override
a ``--config`` file, which overrides the defaults.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ablation
from .config import FIELD_NAMES, ConfigError, TrainConfig, format_config, parse_config, parse_value
from .data import DatasetSplits, make_splits
from .metrics import generalization_delta, stability_stats
from .persist import (
    FormatError,
    format_metrics_csv,
    load_checkpoint,
    parse_metrics_csv,
    read_dataset,
    save_checkpoint,
    write_dataset,
)
from .trainer import TrainingDiverged, fit, init_state, model_predictor

log = logging.getLogger("prevmatch")


# configuration from files and flags ------------------------------------------

def config_from_args(config_path: str | None, overrides: Sequence[str]) -> TrainConfig:
    text = Path(config_path).read_text(encoding="utf-8") if config_path else ""
    cfg = parse_config(text)
    values = {}
    items = list(overrides)
    i = 0
    while i < len(items):
        flag = items[i]
        if not flag.startswith("--"):
            raise ConfigError(f"unexpected argument {flag!r}")
        name = flag[2:]
        if "=" in name:
            name, value = name.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(items):
                raise ConfigError(f"flag {flag} needs a value", name.replace("-", "_"))
            value = items[i + 1]
            i += 2
        key = name.replace("-", "_")
        if key not in FIELD_NAMES:
            raise ConfigError(f"unknown key {key!r}", key)
        values[key] = parse_value(key, value)
    return cfg.replace(**values).validate()


def load_splits(cfg: TrainConfig, data_dir: str | None) -> DatasetSplits:
    if data_dir:
        return read_dataset(data_dir, cfg.seed, cfg.scene_spec())
    return make_splits(cfg.seed, cfg.split_counts(), cfg.scene_spec())


# train ------------------------------------------------------------------------

@dataclass
class RunSummary:
    label: str
    seed: int
    epochs: int
    test_miou: float
    shifted_miou: float
    gap: float
    rare_class: int
    rare_std: float
    rare_max_drop: float
    mean_std: float

    def line(self) -> str:
        return (f"{self.label} seed={self.seed} epochs={self.epochs} test_mIoU={self.test_miou:.4f} "
                f"shifted_mIoU={self.shifted_miou:.4f} gap={self.gap:.4f} "
                f"rare_c{self.rare_class}_std={self.rare_std:.4f} rare_c{self.rare_class}_max_drop="
                f"{self.rare_max_drop:.4f} mean_iou_std={self.mean_std:.4f}")


def summarize(cfg: TrainConfig, result) -> RunSummary:
    rare = cfg.scene_spec().rare_class
    rare_std = rare_drop = mean_std = math.nan
    if len(result.history) >= 2:
        st = stability_stats(result.history, cfg.tail_frac)
        rare_std, rare_drop = float(st.std[rare]), float(st.max_drop[rare])
        finite = st.std[np.isfinite(st.std)]
        mean_std = float(finite.mean()) if finite.size else math.nan
    g = result.generalization
    return RunSummary(cfg.label, cfg.seed, len(result.history), g.miou_seen, g.miou_shifted, g.delta,
                      rare, rare_std, rare_drop, mean_std)


def run_train(cfg: TrainConfig, out_dir, splits: DatasetSplits | None = None, resume: str | None = None,
              checkpoint_every: int = 0, stop_after: int | None = None) -> tuple[int, RunSummary | None]:
    """Train, writing ``config.txt``, ``metrics.csv``, ``checkpoint.pvmt`` and ``summary.txt``.

    The metrics CSV is rewritten after every epoch so an aborted run keeps
    its partial history.  ``stop_after`` ends the run early (leaving a
    resumable checkpoint) after that many completed epochs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    if resume:
        ck_cfg, state = load_checkpoint(resume)
        if format_config(ck_cfg) != format_config(cfg):
            raise ConfigError("checkpoint was written with a different configuration")
    splits = splits if splits is not None else load_splits(cfg, None)
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    csv_path = out / "metrics.csv"

    class _Stop(Exception):
        pass

    def on_epoch_end(st):
        csv_path.write_text(format_metrics_csv(st.history, cfg.num_classes), encoding="utf-8")
        if checkpoint_every and st.epoch % checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_e{st.epoch:04d}.pvmt", cfg, st)
        if stop_after is not None and st.epoch >= stop_after:
            raise _Stop

    state = state if state is not None else init_state(cfg)
    csv_path.write_text(format_metrics_csv(state.history, cfg.num_classes), encoding="utf-8")
    try:
        result = fit(cfg, splits, state=state, on_epoch_end=on_epoch_end)
    except _Stop:
        save_checkpoint(out / "checkpoint.pvmt", cfg, state)
        return 0, None
    except TrainingDiverged as exc:
        csv_path.write_text(format_metrics_csv(state.history, cfg.num_classes), encoding="utf-8")
        print(f"error: {exc}", file=sys.stderr)
        return 3, None
    save_checkpoint(out / "checkpoint.pvmt", cfg, state)
    summary = summarize(cfg, result)
    (out / "summary.txt").write_text(summary.line() + "\n", encoding="utf-8")
    return 0, summary


# export ------------------------------------------------------------------------

def export_curves(csv_text: str, classes: Sequence[int], out_dir) -> list[Path]:
    """One file per class with columns ``epoch val_iou pseudo_acc``, values copied verbatim."""
    header, _ = parse_metrics_csv(csv_text)
    n_classes = sum(1 for h in header if h.startswith("iou_c"))
    for c in classes:
        if not 0 <= c < n_classes:
            raise ValueError(f"class {c} is not in the metrics CSV (classes 0..{n_classes - 1})")
    raw_rows = [line.split(",") for line in csv_text.splitlines()[1:] if line.strip()]
    col = {name: i for i, name in enumerate(header)}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in classes:
        lines = ["# epoch val_iou pseudo_acc"]
        for cells in raw_rows:
            lines.append(f"{cells[col['epoch']]} {cells[col[f'iou_c{c}']]} {cells[col[f'pacc_c{c}']]}")
        p = out / f"curve_c{c}.txt"
        p.write_text("\n".join(lines) + "\n", encoding="utf-8")
        paths.append(p)
    return paths


def read_curve(path) -> list[tuple[int, float, float]]:
    rows = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"row {n}: expected 3 columns, got {len(parts)}")
        rows.append((int(parts[0]), float(parts[1]), float(parts[2])))
    return rows


# ablation ----------------------------------------------------------------------

def run_ablation(base: TrainConfig, grid, seeds: Sequence[int], out_dir) -> list[ablation.CellResult]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = ablation.load_grid(grid) if isinstance(grid, str) else list(grid)
    split_cache: dict[int, DatasetSplits] = {}

    def run_cell(cfg: TrainConfig, cell_id: str) -> dict:
        if cfg.seed not in split_cache:
            split_cache[cfg.seed] = load_splits(cfg, None)
        code, summary = run_train(cfg, out / cell_id, split_cache[cfg.seed])
        if code != 0 or summary is None:
            raise RuntimeError(f"{cell_id} exited with code {code}")
        return {"test_miou": summary.test_miou, "shifted_miou": summary.shifted_miou, "gap": summary.gap,
                "rare_std": summary.rare_std}

    results = ablation.run_grid(base, cells, seeds, run_cell)
    (out / "comparison.tsv").write_text(ablation.format_table(results), encoding="utf-8")
    return results


# entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prevmatch", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the dataset splits as binary files")
    g.add_argument("--out", required=True)
    g.add_argument("--config")

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--data", help="directory written by gen-data")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--stop-after", type=int)

    e = sub.add_parser("eval", help="evaluate a checkpoint on test and shifted test")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")

    a = sub.add_parser("ablate", help="run an ablation grid")
    a.add_argument("--grid", required=True, help=f"preset ({', '.join(ablation.PRESETS)}) or grid file")
    a.add_argument("--seeds", default="0", help="comma-separated seeds")
    a.add_argument("--out", required=True)
    a.add_argument("--config")

    x = sub.add_parser("export-curves", help="per-class curve files from a metrics CSV")
    x.add_argument("--csv", required=True)
    x.add_argument("--classes", required=True, help="comma-separated class ids")
    x.add_argument("--out", required=True)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "gen-data":
            cfg = config_from_args(args.config, rest)
            write_dataset(args.out, load_splits(cfg, None))
            (Path(args.out) / "config.txt").write_text(format_config(cfg), encoding="utf-8")
            print(format_config(cfg), end="")
            return 0
        if args.command == "train":
            cfg = config_from_args(args.config, rest)
            print(format_config(cfg), end="")
            code, summary = run_train(cfg, args.out, load_splits(cfg, args.data), args.resume,
                                      args.checkpoint_every, args.stop_after)
            if summary is not None:
                print(summary.line())
            return code
        if args.command == "eval":
            if rest:
                parser.error(f"unrecognized arguments: {' '.join(rest)}")
            cfg, state = load_checkpoint(args.checkpoint)
            splits = load_splits(cfg, args.data)
            g = generalization_delta(model_predictor(state.model), splits.test, splits.shifted_test,
                                     cfg.num_classes)
            print(f"{cfg.label} epoch={state.epoch} test_mIoU={g.miou_seen:.4f} "
                  f"shifted_mIoU={g.miou_shifted:.4f} gap={g.delta:.4f}")
            return 0
        if args.command == "ablate":
            cfg = config_from_args(args.config, rest)
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            results = run_ablation(cfg, args.grid, seeds, args.out)
            print(ablation.format_table(results), end="")
            return 0 if all(r.error is None for r in results) else 4
        if args.command == "export-curves":
            if rest:
                parser.error(f"unrecognized arguments: {' '.join(rest)}")
            classes = [int(c) for c in args.classes.split(",") if c.strip()]
            for p in export_curves(Path(args.csv).read_text(encoding="utf-8"), classes, args.out):
                print(p)
            return 0
    except (ConfigError, FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
