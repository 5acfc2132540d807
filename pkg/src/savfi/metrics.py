"""Percentage endpoint error and boxplot summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def epe(truth, estimate, mask=None) -> float:
    """Mean endpoint error as a percentage of the truth's peak speed.

    ``truth`` and ``estimate`` are ``[2, H, W]`` (axial, lateral) fields.
    With ``mask`` both the mean and the peak speed are taken over the
    masked pixels only.
    """
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    if truth.shape != estimate.shape:
        raise ValueError(f"shape mismatch {truth.shape} vs {estimate.shape}")
    err = np.sqrt(np.sum((truth - estimate) ** 2, axis=0))
    speed = np.sqrt(np.sum(truth**2, axis=0))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != err.shape:
            raise ValueError(f"mask shape {mask.shape} does not match field {err.shape}")
        if not mask.any():
            raise ValueError("empty mask")
        err, speed = err[mask], speed[mask]
    vmax = speed.max()
    if not vmax > 0:
        raise ValueError("ground-truth field is zero everywhere (V_max = 0)")
    return float(100.0 * err.mean() / vmax)


@dataclass
class EpeReport:
    values: np.ndarray
    median: float
    q1: float
    q3: float
    lo: float
    hi: float
    outliers: int
    masked: bool = False
    tag: str = "all"

    @property
    def n(self) -> int:
        return len(self.values)

    def line(self) -> str:
        return (
            f"tag={self.tag} n={self.n} median={self.median:.6g} q1={self.q1:.6g} "
            f"q3={self.q3:.6g} lo={self.lo:.6g} hi={self.hi:.6g} outliers={self.outliers}"
        )


def summarize(values, masked: bool = False, tag: str = "all") -> EpeReport:
    """Median, inclusive-method quartiles and Tukey whiskers of EPE values."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("no values to summarize")
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="linear")
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    outliers = int(np.sum((v < lo_fence) | (v > hi_fence)))
    lo = max(lo_fence, v.min())
    hi = min(hi_fence, v.max())
    return EpeReport(v, float(med), float(q1), float(q3), float(lo), float(hi),
                     outliers, masked, tag)


def parse_report_line(line: str) -> dict:
    out = {}
    for tok in line.split():
        k, _, val = tok.partition("=")
        out[k] = val if k == "tag" else (int(val) if k in ("n", "outliers") else float(val))
    return out
