"""Error metrics for radio maps.

dB figures are obtained by linearly scaling a normalized-space RMSE by the
dataset's dynamic range (80 dB by default).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

DYNAMIC_RANGE_DB = 80.0


@dataclass
class MetricReport:
    rmse_norm: float
    rmse_db: float
    nmse: float
    n_pixels: int

    def as_dict(self) -> dict:
        return asdict(self)


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    return p, t


def squared_error_sum(pred, target) -> float:
    p, t = _pair(pred, target)
    d = (p - t).ravel()
    return float(d @ d)


def rmse(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.sqrt(squared_error_sum(p, t) / p.size))


def nmse(pred, target) -> float:
    p, t = _pair(pred, target)
    denom = float(t.ravel() @ t.ravel())
    if denom == 0.0:
        raise ValueError("NMSE undefined for an all-zero target")
    return squared_error_sum(p, t) / denom


def rmse_db(rmse_norm: float, dynamic_range_db: float = DYNAMIC_RANGE_DB) -> float:
    if rmse_norm < 0:
        raise ValueError("rmse_norm must be non-negative")
    return rmse_norm * dynamic_range_db


def report(pred, target, dynamic_range_db: float = DYNAMIC_RANGE_DB) -> MetricReport:
    r = rmse(pred, target)
    return MetricReport(r, rmse_db(r, dynamic_range_db), nmse(pred, target), int(np.size(target)))


class Accumulator:
    """Streams squared-error and target-energy sums over many maps."""

    def __init__(self):
        self.sse = 0.0
        self.energy = 0.0
        self.n = 0

    def add(self, pred, target, mask=None) -> None:
        p, t = _pair(pred, target)
        if mask is not None:
            m = np.asarray(mask, dtype=bool)
            p, t = p[m], t[m]
        d = p - t
        self.sse += float(d.ravel() @ d.ravel())
        self.energy += float(t.ravel() @ t.ravel())
        self.n += p.size

    def result(self, dynamic_range_db: float = DYNAMIC_RANGE_DB) -> MetricReport:
        if self.n == 0:
            raise ValueError("no pixels accumulated")
        r = float(np.sqrt(self.sse / self.n))
        nm = self.sse / self.energy if self.energy > 0 else float("nan")
        return MetricReport(r, rmse_db(r, dynamic_range_db), nm, self.n)
