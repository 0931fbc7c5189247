"""On-disk formats: training checkpoints, the metrics CSV, and dataset dumps.

Checkpoint layout (all integers little-endian)::

    b"PVMT"  u32 version  u32 section-count
    repeated: 4-byte tag  u64 payload-length  payload

Tags: CONF (effective config text), PARM (model arrays), OPTM (optimizer
scalars and momentum buffers), REGY (registry), RNGS (random-stream scheme),
CURS (completed-epoch cursor), HIST (metrics history as float64 rows).
Arrays are stored as ``u32 ndim, u32 dims..., float64 data``.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from . import rng as rngmod
from .config import TrainConfig, format_config, parse_config
from .data import DatasetSplits, Scene, SceneSpec, SplitCounts, SPLIT_NAMES
from .metrics import MetricsRecord
from .nn.model import SegModel
from .nn.optim import OptimizerState
from .registry import PrevRegistry, Snapshot

MAGIC = b"PVMT"
VERSION = 1
SECTION_ORDER = (b"CONF", b"PARM", b"OPTM", b"REGY", b"RNGS", b"CURS", b"HIST")


class FormatError(ValueError):
    pass


# primitive encoders ---------------------------------------------------------

def _put_array(buf: BinaryIO, a: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    buf.write(struct.pack("<I", a.ndim))
    buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
    buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _get_array(buf: BinaryIO) -> np.ndarray:
    (ndim,) = _unpack(buf, "<I")
    shape = _unpack(buf, f"<{ndim}I")
    n = int(np.prod(shape)) if ndim else 1
    raw = buf.read(8 * n)
    if len(raw) != 8 * n:
        raise FormatError("truncated array payload")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def _unpack(buf: BinaryIO, fmt: str):
    size = struct.calcsize(fmt)
    raw = buf.read(size)
    if len(raw) != size:
        raise FormatError("unexpected end of data")
    return struct.unpack(fmt, raw)


def _put_arrays(buf: BinaryIO, arrays: Sequence[np.ndarray]):
    buf.write(struct.pack("<I", len(arrays)))
    for a in arrays:
        _put_array(buf, a)


def _get_arrays(buf: BinaryIO) -> list[np.ndarray]:
    (n,) = _unpack(buf, "<I")
    return [_get_array(buf) for _ in range(n)]


# checkpoint -----------------------------------------------------------------

def _history_rows(history: Sequence[MetricsRecord], num_classes: int) -> np.ndarray:
    rows = [[r.epoch, r.l_s, r.l_u_std, r.l_u_prev, r.lam, r.miou_val, *r.iou, *r.pacc, r.mask_std, r.mask_prev]
            for r in history]
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), 8 + 2 * num_classes)


def _history_from_rows(rows: np.ndarray, num_classes: int) -> list[MetricsRecord]:
    c = num_classes
    out = []
    for r in rows:
        vals = [float(v) for v in r]
        out.append(MetricsRecord(int(vals[0]), *vals[1:6], vals[6:6 + c], vals[6 + c:6 + 2 * c],
                                 vals[6 + 2 * c], vals[7 + 2 * c]))
    return out


def encode_checkpoint(cfg: TrainConfig, model: SegModel, opt: OptimizerState, registry: PrevRegistry,
                      epoch: int, history: Sequence[MetricsRecord]) -> bytes:
    sections = {}
    sections[b"CONF"] = format_config(cfg).encode("utf-8")

    b = io.BytesIO()
    _put_arrays(b, model.state())
    sections[b"PARM"] = b.getvalue()

    b = io.BytesIO()
    b.write(struct.pack("<3d", opt.base_lr, opt.momentum, opt.power))
    _put_arrays(b, opt.buffers)
    sections[b"OPTM"] = b.getvalue()

    b = io.BytesIO()
    last = -1 if registry.last_epoch is None else registry.last_epoch
    b.write(struct.pack("<IdqI", registry.capacity, registry.best_score, last, len(registry.snapshots)))
    for snap in registry.snapshots:
        b.write(struct.pack("<qd", snap.epoch, snap.val_score))
        _put_arrays(b, snap.params)
    sections[b"REGY"] = b.getvalue()

    # streams are stateless functions of (seed, path); the scheme plus seed is the whole state
    sections[b"RNGS"] = f"{rngmod.SCHEME}\nseed={cfg.seed}\n".encode("utf-8")
    sections[b"CURS"] = struct.pack("<I", epoch)

    b = io.BytesIO()
    _put_array(b, _history_rows(history, cfg.num_classes))
    sections[b"HIST"] = b.getvalue()

    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(SECTION_ORDER)))
    for tag in SECTION_ORDER:
        payload = sections[tag]
        out.write(tag)
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
    return out.getvalue()


def _read_sections(data: bytes) -> dict[bytes, bytes]:
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, count = _unpack(buf, "<II")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    sections = {}
    for _ in range(count):
        tag = buf.read(4)
        (length,) = _unpack(buf, "<Q")
        payload = buf.read(length)
        if len(payload) != length:
            raise FormatError(f"section {tag!r} truncated")
        sections[tag] = payload
    missing = [t.decode() for t in SECTION_ORDER if t not in sections]
    if missing:
        raise FormatError(f"missing sections: {', '.join(missing)}")
    return sections


def decode_checkpoint(data: bytes):
    """Inverse of :func:`encode_checkpoint`: ``(config, TrainState)``."""
    from .trainer import TrainState

    sec = _read_sections(data)
    cfg = parse_config(sec[b"CONF"].decode("utf-8"))

    model = SegModel(cfg.in_channels, cfg.num_classes, cfg.hidden, seed=0)
    model.load_state(_get_arrays(io.BytesIO(sec[b"PARM"])))

    b = io.BytesIO(sec[b"OPTM"])
    base_lr, momentum, power = _unpack(b, "<3d")
    opt = OptimizerState(base_lr, momentum, power, _get_arrays(b))

    b = io.BytesIO(sec[b"REGY"])
    capacity, best, last, count = _unpack(b, "<IdqI")
    snaps = []
    for _ in range(count):
        epoch, score = _unpack(b, "<qd")
        arrays = _get_arrays(b)
        for a in arrays:
            a.flags.writeable = False
        snaps.append(Snapshot(tuple(arrays), int(epoch), float(score)))
    registry = PrevRegistry(capacity, snaps, best, None if last < 0 else int(last))

    scheme = sec[b"RNGS"].decode("utf-8").splitlines()[0]
    if scheme != rngmod.SCHEME:
        raise FormatError(f"checkpoint uses random-stream scheme {scheme!r}, expected {rngmod.SCHEME!r}")
    (epoch,) = struct.unpack("<I", sec[b"CURS"])
    history = _history_from_rows(_get_array(io.BytesIO(sec[b"HIST"])), cfg.num_classes)
    return cfg, TrainState(model, opt, registry, history, int(epoch))


def save_checkpoint(path, cfg: TrainConfig, state) -> bytes:
    data = encode_checkpoint(cfg, state.model, state.opt, state.registry, state.epoch, state.history)
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


# metrics CSV ----------------------------------------------------------------

def csv_header(num_classes: int) -> list[str]:
    return (["epoch", "l_s", "l_u_std", "l_u_prev", "lambda", "miou_val"]
            + [f"iou_c{i}" for i in range(num_classes)]
            + [f"pacc_c{i}" for i in range(num_classes)]
            + ["mask_std", "mask_prev"])


def _fmt(v: float) -> str:
    return "%.9g" % v


def format_metrics_csv(history: Sequence[MetricsRecord], num_classes: int) -> str:
    lines = [",".join(csv_header(num_classes))]
    for r in history:
        vals = [r.l_s, r.l_u_std, r.l_u_prev, r.lam, r.miou_val, *r.iou, *r.pacc, r.mask_std, r.mask_prev]
        lines.append(",".join([str(r.epoch)] + [_fmt(v) for v in vals]))
    return "\n".join(lines) + "\n"


def parse_metrics_csv(text: str) -> tuple[list[str], list[dict[str, float]]]:
    """Header and rows of a metrics CSV; malformed rows raise with their row number."""
    lines = text.splitlines()
    if not lines:
        raise FormatError("metrics CSV is empty")
    header = lines[0].split(",")
    if header[:6] != csv_header(0)[:6]:
        raise FormatError("row 1: not a metrics CSV header")
    rows = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != len(header):
            raise FormatError(f"row {n}: expected {len(header)} fields, got {len(cells)}")
        try:
            row = {k: float(v) for k, v in zip(header, cells)}
        except ValueError as exc:
            raise FormatError(f"row {n}: {exc}") from None
        if not row["epoch"].is_integer():
            raise FormatError(f"row {n}: epoch {cells[0]!r} is not an integer")
        rows.append(row)
    return header, rows


# dataset dump ---------------------------------------------------------------

DATA_MAGIC = b"PVMD"
DATA_VERSION = 1


def encode_split(scenes: Sequence[Scene]) -> bytes:
    """One split: images as float64 and labels as int64, with shape headers."""
    out = io.BytesIO()
    out.write(DATA_MAGIC)
    if scenes:
        cin, h, w = scenes[0].image.shape
    else:
        cin = h = w = 0
    out.write(struct.pack("<IIIII", DATA_VERSION, len(scenes), cin, h, w))
    for s in scenes:
        out.write(np.ascontiguousarray(s.image, dtype="<f8").tobytes())
        out.write(np.ascontiguousarray(s.labels, dtype="<i8").tobytes())
    return out.getvalue()


def decode_split(data: bytes) -> list[Scene]:
    buf = io.BytesIO(data)
    if buf.read(4) != DATA_MAGIC:
        raise FormatError("not a dataset dump (bad magic)")
    version, n, cin, h, w = _unpack(buf, "<IIIII")
    if version != DATA_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    scenes = []
    for _ in range(n):
        img = np.frombuffer(buf.read(8 * cin * h * w), dtype="<f8").astype(np.float64).reshape(cin, h, w)
        lab = np.frombuffer(buf.read(8 * h * w), dtype="<i8").astype(np.int64).reshape(h, w)
        scenes.append(Scene(img, lab))
    if buf.read(1):
        raise FormatError("trailing bytes after last scene")
    return scenes


def write_dataset(directory, splits: DatasetSplits) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in SPLIT_NAMES:
        p = directory / f"{name}.bin"
        p.write_bytes(encode_split(splits.split(name)))
        paths.append(p)
    return paths


def read_dataset(directory, seed: int = 0, spec: SceneSpec | None = None) -> DatasetSplits:
    directory = Path(directory)
    parts = {name: decode_split((directory / f"{name}.bin").read_bytes()) for name in SPLIT_NAMES}
    counts = SplitCounts(*(len(parts[n]) for n in SPLIT_NAMES))
    return DatasetSplits(**parts, seed=seed, spec=spec or SceneSpec(), counts=counts)

