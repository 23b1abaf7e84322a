"""Training losses and depth-evaluation metrics.

Validity everywhere is ``gt > 0``; an optional extra boolean mask can narrow
the evaluated region (e.g. to a hole).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .engine import Tensor, ops
from .errors import ConfigError, NumericError

SILOG_PRED_FLOOR = 1e-6
RADICAND_TOL = 1e-12


def _valid_index(gt: np.ndarray, region: np.ndarray | None = None) -> np.ndarray:
    valid = np.asarray(gt) > 0
    if region is not None:
        valid &= np.asarray(region, dtype=bool)
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        raise ConfigError("no valid ground-truth pixels")
    return idx


def _pair(pred, gt, region):
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred))
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ConfigError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    idx = _valid_index(gt, region)
    return ops.take(pred, idx), Tensor(gt.reshape(-1)[idx].astype(pred.dtype))


def loss_l1l2(pred, gt, region=None) -> Tensor:
    """Mean absolute plus mean squared error over valid pixels."""
    p, g = _pair(pred, gt, region)
    diff = p - g
    n = diff.shape[0]
    return (ops.sum_all(ops.absolute(diff)) + ops.sum_all(ops.square(diff))) * (1.0 / n)


def loss_silog(pred, gt, alpha: float = 10.0, lam: float = 0.85, region=None, diagnostics: dict | None = None) -> Tensor:
    """alpha * sqrt(mean(e^2) - lam * mean(e)^2) with e = log pred - log gt.

    Predictions are floored at 1e-6 before the log; the number of floored
    pixels is reported through ``diagnostics['silog_clamped']``.
    """
    p, g = _pair(pred, gt, region)
    if diagnostics is not None:
        diagnostics["silog_clamped"] = int(np.sum(p.data < SILOG_PRED_FLOOR))
    # log of the ratio keeps joint power-of-two rescaling of pred and gt bit-exact
    e = ops.log(ops.div(ops.clamp_min(p, SILOG_PRED_FLOOR), g))
    mean_e = ops.mean_all(e)
    # centered form of mean(e^2) - lam * mean(e)^2; avoids cancellation when e is near constant
    radicand = ops.mean_all(ops.square(e - mean_e)) + (1.0 - lam) * ops.square(mean_e)
    if radicand.item() < -RADICAND_TOL:
        raise NumericError(f"SILog radicand {radicand.item():.3e} is negative")
    if radicand.item() <= 0:
        return Tensor(np.zeros((), dtype=p.dtype))
    return ops.sqrt(radicand) * alpha


LOSSES = {"l1l2": loss_l1l2, "silog": loss_silog}


# metrics ----------------------------------------------------------------------

@dataclass
class MetricReport:
    rmse: float
    rel: float
    delta1: float
    delta2: float
    delta3: float
    mae: float
    irmse: float
    imae: float
    valid_count: int
    units: str = "m"

    def as_dict(self) -> dict:
        return asdict(self)

    def to_line(self) -> str:
        """Single-line ``key=value`` record."""
        parts = []
        for key, value in asdict(self).items():
            parts.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "MetricReport":
        fields = dict(item.split("=", 1) for item in line.split())
        kwargs = {}
        for key, value in fields.items():
            if key == "valid_count":
                kwargs[key] = int(value)
            elif key == "units":
                kwargs[key] = value
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)


UNIT_SCALE = {"m": 1.0, "mm": 1000.0}


def compute_metrics(pred, gt, units: str = "m", region=None, table_rmse: bool = False) -> MetricReport:
    """Depth metrics over valid pixels.

    ``units`` scales RMSE and MAE (meters or millimeters); iRMSE and iMAE are
    always 1/km. With ``table_rmse`` the normalization is taken outside the
    square root, ``sqrt(sum sq) / n``, instead of the conventional
    ``sqrt(sum sq / n)``.
    """
    if units not in UNIT_SCALE:
        raise ConfigError(f"unknown metric units '{units}'")
    pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ConfigError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    idx = _valid_index(gt, region)
    d_hat, d = pred.reshape(-1)[idx], gt.reshape(-1)[idx]
    n = d.size
    err = d_hat - d
    sq = np.sum(err * err)
    rmse = np.sqrt(sq) / n if table_rmse else np.sqrt(sq / n)
    with np.errstate(divide="ignore"):
        ratio = np.maximum(d_hat / d, d / d_hat)
        # inverse depth in 1/km
        inv_err = 1000.0 / d_hat - 1000.0 / d
    isq = np.sum(inv_err * inv_err)
    scale = UNIT_SCALE[units]
    return MetricReport(
        rmse=float(rmse * scale),
        rel=float(np.mean(np.abs(err) / d)),
        delta1=float(100.0 * np.mean(ratio < 1.25)),
        delta2=float(100.0 * np.mean(ratio < 1.25**2)),
        delta3=float(100.0 * np.mean(ratio < 1.25**3)),
        mae=float(np.mean(np.abs(err)) * scale),
        irmse=float(np.sqrt(isq) / n if table_rmse else np.sqrt(isq / n)),
        imae=float(np.mean(np.abs(inv_err))),
        valid_count=int(n),
        units=units,
    )


def mean_reports(reports: list[MetricReport]) -> MetricReport:
    if not reports:
        raise ConfigError("cannot average an empty list of reports")
    keys = ["rmse", "rel", "delta1", "delta2", "delta3", "mae", "irmse", "imae"]
    avg = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    return MetricReport(**avg, valid_count=int(sum(r.valid_count for r in reports)), units=reports[0].units)
