"""Ablation grids: named presets, grid files, and the comparison table.

A grid is a list of cells; each cell is a label plus config overrides
applied on top of a base config.  Every cell runs the same seeds, so rows
of the comparison table are paired across cells.
"""
from __future__ import annotations

import itertools
import math
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .config import ConfigError, TrainConfig, parse_value

TABLE6 = (
    ("baseline", dict(previous_guidance=False, simple_ensemble=False, random_selection=False,
                      random_weights=False)),
    ("previous_guidance", dict(previous_guidance=True, simple_ensemble=False, random_selection=False,
                               random_weights=False)),
    ("simple_ensemble", dict(previous_guidance=True, simple_ensemble=True, random_selection=False,
                             random_weights=False)),
    ("random_selection", dict(previous_guidance=True, simple_ensemble=False, random_selection=True,
                              random_weights=False)),
    ("random_weights", dict(previous_guidance=True, simple_ensemble=False, random_selection=True,
                            random_weights=True)),
)

SAVE_MODES = (
    ("baseline", dict(previous_guidance=False)),
    ("every_1", dict(save_criteria="interval", save_interval=1)),
    ("every_3", dict(save_criteria="interval", save_interval=3)),
    ("best", dict(save_criteria="best")),
)

PRESETS: dict[str, tuple[tuple[str, dict], ...]] = {
    "table6": TABLE6,
    "n": tuple((f"N={n}", dict(N=n)) for n in (1, 2, 4, 8, 12, 20)),
    "k": tuple((f"K={k}", dict(K=k)) for k in (1, 2, 3, 4, 5)),
    "save": SAVE_MODES,
    "lambda": tuple((f"lambda={m}", dict(lambda_mode=m))
                    for m in ("warmup_decay", "fixed", "linear_decay", "linear_increase")),
}


def parse_grid(text: str) -> list[tuple[str, dict]]:
    """Grid file: one ``key = v1 | v2 | ...`` line per axis; cells are the cross product.

    An empty grid yields a single cell with no overrides.
    """
    axes = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = v1 | v2', got {raw!r}", line=lineno)
        key, values = (p.strip() for p in line.split("=", 1))
        try:
            parsed = [parse_value(key, v) for v in values.split("|")]
        except ConfigError as exc:
            raise ConfigError(str(exc), key, lineno) from None
        if any(key == k for k, _ in axes):
            raise ConfigError(f"duplicate axis {key!r}", key, lineno)
        axes.append((key, parsed))
    if not axes:
        return [("base", {})]
    cells = []
    for combo in itertools.product(*(vals for _, vals in axes)):
        over = {k: v for (k, _), v in zip(axes, combo)}
        label = ",".join(f"{k}={_show(v)}" for k, v in over.items())
        cells.append((label, over))
    return cells


def _show(v) -> str:
    if isinstance(v, tuple):
        return "(" + " ".join(str(x) for x in v) + ")"
    return str(v)


@dataclass
class CellResult:
    label: str
    overrides: dict
    seeds: list[int]
    values: list[float] = field(default_factory=list)  # test mIoU per seed
    extra: dict[str, list[float]] = field(default_factory=dict)
    error: str | None = None
    detail: str = ""

    @property
    def mean(self) -> float:
        ok = [v for v in self.values if math.isfinite(v)]
        return sum(ok) / len(ok) if ok else math.nan


def run_grid(base: TrainConfig, cells: Sequence[tuple[str, dict]], seeds: Sequence[int],
             run_cell: Callable[[TrainConfig, str], dict]) -> list[CellResult]:
    """Run every cell on every seed; a failing cell is recorded and the rest continue.

    ``run_cell(cfg, cell_id)`` returns a dict with at least ``test_miou``.
    """
    results = []
    for idx, (label, over) in enumerate(cells):
        res = CellResult(label, dict(over), list(seeds))
        try:
            cfg0 = base.replace(**over).validate()
            for seed in seeds:
                out = run_cell(cfg0.replace(seed=seed), f"cell{idx:02d}_seed{seed}")
                res.values.append(float(out["test_miou"]))
                for k, v in out.items():
                    if k != "test_miou":
                        res.extra.setdefault(k, []).append(float(v))
        except Exception as exc:  # recorded in the table; other cells still run
            res.error = f"{type(exc).__name__}: {exc}"
            res.detail = traceback.format_exc()
        results.append(res)
    return results


def format_table(results: Sequence[CellResult]) -> str:
    """Tidy comparison table: one row per cell with mean and per-seed values."""
    if not results:
        return ""
    seeds = results[0].seeds
    extra_keys = sorted({k for r in results for k in r.extra})
    header = ["cell", "label", "mean_test_miou"] + [f"seed{s}" for s in seeds]
    header += [f"mean_{k}" for k in extra_keys] + ["status"]
    lines = ["\t".join(header)]
    for i, r in enumerate(results):
        vals = r.values + [math.nan] * (len(seeds) - len(r.values))
        row = [f"cell{i:02d}", r.label, "%.6f" % r.mean] + ["%.6f" % v for v in vals]
        for k in extra_keys:
            xs = [v for v in r.extra.get(k, []) if math.isfinite(v)]
            row.append("%.6f" % (sum(xs) / len(xs)) if xs else "nan")
        row.append("ok" if r.error is None else "failed: " + r.error.replace("\t", " ").replace("\n", " "))
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def load_grid(spec: str) -> list[tuple[str, dict]]:
    """A preset name or a path to a grid file."""
    if spec in PRESETS:
        return list(PRESETS[spec])
    path = Path(spec)
    if not path.exists():
        raise ValueError(f"unknown preset or missing grid file {spec!r}; presets: {', '.join(PRESETS)}")
    return parse_grid(path.read_text(encoding="utf-8"))
