"""File formats and run configuration.

Dense maps use PFM: an ASCII header ``Pf`` (one channel) or ``PF`` (three
channels), a ``width height`` line and a scale line whose negative sign marks
little-endian data, followed by 32-bit floats with rows stored bottom to top.
Sparse measurements are CSV rows ``row,col,depth_m``.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .datagen import SamplerSpec
from .engine.params import atomic_write_bytes
from .errors import ConfigError, DataError
from .pipeline import ModelConfig, RefineConfig
from .guidance import GuidanceConfig
from .trainer import SparsityProtocol, TrainConfig

# PFM ---------------------------------------------------------------------------


def encode_pfm(array: np.ndarray) -> bytes:
    """H×W or 3×H×W float array to little-endian PFM bytes."""
    array = np.asarray(array)
    if array.ndim == 2:
        tag, raster = b"Pf", array
    elif array.ndim == 3 and array.shape[0] == 3:
        tag, raster = b"PF", np.moveaxis(array, 0, -1)
    else:
        raise DataError(f"PFM holds H×W or 3×H×W arrays, got shape {array.shape}")
    h, w = raster.shape[:2]
    header = b"%s\n%d %d\n-1.0\n" % (tag, w, h)
    return header + np.ascontiguousarray(raster[::-1], dtype="<f4").tobytes()


def decode_pfm(payload: bytes, source: str = "<bytes>") -> np.ndarray:
    stream = io.BytesIO(payload)
    lines = []
    for _ in range(3):
        line = stream.readline()
        if not line.endswith(b"\n"):
            raise DataError(f"{source}: truncated PFM header at byte {stream.tell()}")
        lines.append(line.strip())
    tag, dims, scale_line = lines
    if tag not in (b"Pf", b"PF"):
        raise DataError(f"{source}: bad PFM identifier {tag!r} at byte 0")
    try:
        w, h = (int(v) for v in dims.split())
        scale = float(scale_line)
    except ValueError:
        raise DataError(f"{source}: malformed PFM header {dims!r} / {scale_line!r}") from None
    if w <= 0 or h <= 0 or scale == 0:
        raise DataError(f"{source}: invalid PFM dimensions {w}x{h} or scale {scale}")
    channels = 3 if tag == b"PF" else 1
    offset = stream.tell()
    count = w * h * channels
    if len(payload) - offset != 4 * count:
        raise DataError(f"{source}: expected {4 * count} data bytes after offset {offset}, found {len(payload) - offset}")
    dtype = "<f4" if scale < 0 else ">f4"
    raster = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).astype(np.float32)
    raster = raster.reshape((h, w, channels) if channels == 3 else (h, w))[::-1]
    return np.ascontiguousarray(np.moveaxis(raster, -1, 0) if channels == 3 else raster)


def write_pfm(path, array: np.ndarray) -> None:
    atomic_write_bytes(path, encode_pfm(array))


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    return decode_pfm(payload, str(path))


# sparse CSV -------------------------------------------------------------------


def encode_sparse_csv(sparse: np.ndarray) -> bytes:
    sparse = np.asarray(sparse)
    rows, cols = np.nonzero(sparse > 0)  # row-major, so already sorted by (row, col)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for r, c in zip(rows, cols):
        writer.writerow([int(r), int(c), repr(float(sparse[r, c]))])
    return buf.getvalue().encode()


def write_sparse_csv(path, sparse: np.ndarray) -> None:
    atomic_write_bytes(path, encode_sparse_csv(sparse))


def read_sparse_csv(path, shape: tuple[int, int]) -> np.ndarray:
    """SparseDepth of ``shape``; an empty file has no valid entries.

    A leading ``row,col,depth_m`` header line is accepted.
    """
    path = Path(path)
    h, w = shape
    out = np.zeros((h, w), dtype=np.float32)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or (lineno == 1 and row[0].strip() == "row"):
            continue
        if len(row) != 3:
            raise DataError(f"{path}:{lineno}: expected row,col,depth_m, got {len(row)} fields")
        try:
            r, c, d = int(row[0]), int(row[1]), float(row[2])
        except ValueError:
            raise DataError(f"{path}:{lineno}: cannot parse {','.join(row)!r}") from None
        if not (0 <= r < h and 0 <= c < w):
            raise DataError(f"{path}:{lineno}: coordinate ({r}, {c}) outside {h}x{w}")
        if not (np.isfinite(d) and d > 0):
            raise DataError(f"{path}:{lineno}: depth must be positive, got {d}")
        out[r, c] = d
    return out


# error map --------------------------------------------------------------------


def write_error_map(path, pred: np.ndarray, gt: np.ndarray) -> None:
    """8-bit grayscale |pred - gt|, brighter meaning larger; invalid pixels black."""
    from PIL import Image

    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    err = np.where(gt > 0, np.abs(pred - gt), 0.0)
    peak = err.max()
    img = np.zeros(err.shape, np.uint8) if peak == 0 else np.round(255 * err / peak).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(img, mode="L").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


# run configuration ------------------------------------------------------------

MODES = ("sdr", "ordinary", "holefill")
PATH_KEYS = ("params", "image", "sparse", "init_depth", "gt", "output_dir")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "sdr"
    # input paths must exist when the config is loaded; output_dir is created
    paths: dict = field(default_factory=dict)
    refine: RefineConfig = RefineConfig()
    train: TrainConfig = TrainConfig()
    model: ModelConfig = ModelConfig()
    sampler: SamplerSpec = SamplerSpec()
    units: str = "m"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.units not in ("m", "mm"):
            raise ConfigError(f"units must be 'm' or 'mm', got '{self.units}'")
        unknown = set(self.paths) - set(PATH_KEYS)
        if unknown:
            raise ConfigError(f"unknown path keys: {sorted(unknown)}")

    def path(self, key: str) -> Path | None:
        value = self.paths.get(key)
        return None if value is None else Path(value)

    def to_dict(self) -> dict:
        return _to_plain(self)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def _build(cls, data, where: str):
    """Construct dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        nested = _NESTED.get((cls, name))
        if nested is not None:
            kwargs[name] = _build(nested, value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


_NESTED = {
    (RunConfig, "refine"): RefineConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "sampler"): SamplerSpec,
    (TrainConfig, "sparsity"): SparsityProtocol,
    (ModelConfig, "guidance"): GuidanceConfig,
}


def parse_config(data: dict, base_dir=None, check_paths: bool = True) -> RunConfig:
    cfg = _build(RunConfig, data, "config")
    paths = {}
    for key, value in cfg.paths.items():
        p = Path(value)
        if base_dir is not None and not p.is_absolute():
            p = Path(base_dir) / p
        if check_paths and key != "output_dir" and not p.exists():
            raise ConfigError(f"config path '{key}' does not exist: {p}")
        paths[key] = str(p)
    return dataclasses.replace(cfg, paths=paths)


def load_config(path) -> RunConfig:
    """RunConfig from JSON or YAML (by extension); relative paths resolve against the file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return parse_config(data or {}, base_dir=path.parent)


def dump_config(cfg: RunConfig, path) -> None:
    path = Path(path)
    data = cfg.to_dict()
    if path.suffix in (".yaml", ".yml"):
        text = yaml.safe_dump(data, sort_keys=False)
    else:
        text = json.dumps(data, indent=2) + "\n"
    atomic_write_bytes(path, text.encode())


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc.strerror}") from exc
    return path
