"""Rate-distortion metrics: PSNR, Bjontegaard delta rate, Pareto frontier."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .pcio import VoxelizedPointCloud

__all__ = ["RdPoint", "psnr_rgb", "bd_rate", "convex_hull", "write_csv", "read_csv"]

CSV_COLUMNS = ("label", "cbn", "level", "lambda_or_delta", "B", "bpp", "psnr_rgb")


@dataclass(frozen=True)
class RdPoint:
    label: str
    cbn: str
    level: int
    lambda_or_delta: float
    B: int
    bpp: float
    psnr_rgb: float  # math.inf flags a zero-error reconstruction

    def __post_init__(self):
        if self.bpp < 0:
            raise ValueError("bpp must be >= 0")


def psnr_rgb(original: VoxelizedPointCloud, reconstructed: VoxelizedPointCloud) -> float:
    """Peak-signal-to-noise over all points and channels, 255-peak.

    MSE is pooled across the three channels before the log.  Identical clouds
    return the +inf sentinel.
    """
    if len(original) != len(reconstructed):
        raise ValueError("clouds differ in point count")
    if not np.array_equal(original.positions, reconstructed.positions):
        raise ValueError("clouds are not aligned point for point")
    diff = (original.attributes - reconstructed.attributes) * 255.0
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def _log_rate_fit(points: list[RdPoint]):
    finite = [p for p in points if math.isfinite(p.psnr_rgb)]
    if len(finite) < 2:
        raise ValueError("need at least two finite-PSNR points per curve")
    psnr = np.array([p.psnr_rgb for p in finite])
    logr = np.log(np.array([p.bpp for p in finite]))
    if np.any(np.array([p.bpp for p in finite]) <= 0):
        raise ValueError("BD-rate needs strictly positive rates")
    degree = min(3, len(finite) - 1)
    return np.polyfit(psnr, logr, degree), psnr.min(), psnr.max()


def bd_rate(curve_a: list[RdPoint], curve_b: list[RdPoint]) -> float:
    """Average percent rate change of curve A relative to curve B.

    Classic cubic-fit variant: fit log-rate against PSNR per curve, integrate
    both fits over the common PSNR interval, exponentiate the mean difference.
    Negative means A spends fewer bits for the same quality.  Infinite-PSNR
    points are dropped before fitting.
    """
    fit_a, lo_a, hi_a = _log_rate_fit(curve_a)
    fit_b, lo_b, hi_b = _log_rate_fit(curve_b)
    lo = max(lo_a, lo_b)
    hi = min(hi_a, hi_b)
    if not hi > lo:
        raise ValueError("curves have no overlapping PSNR range")
    int_a = np.polyval(np.polyint(fit_a), hi) - np.polyval(np.polyint(fit_a), lo)
    int_b = np.polyval(np.polyint(fit_b), hi) - np.polyval(np.polyint(fit_b), lo)
    avg_log_diff = (int_a - int_b) / (hi - lo)
    return float((math.exp(avg_log_diff) - 1.0) * 100.0)


def convex_hull(points: list[RdPoint]) -> list[RdPoint]:
    """Upper-left Pareto frontier in (bpp, PSNR): the best quality per rate,
    thinned to the concave upper hull, sorted by bpp."""
    if not points:
        raise ValueError("no points")
    ordered = sorted(points, key=lambda p: (p.bpp, -p.psnr_rgb))
    # drop dominated points (some cheaper-or-equal point is at least as good)
    frontier = []
    best = -math.inf
    for p in ordered:
        if p.psnr_rgb > best:
            frontier.append(p)
            best = p.psnr_rgb
    # upper convex hull over the surviving staircase
    hull: list[RdPoint] = []
    for p in frontier:
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            if not (math.isfinite(b.psnr_rgb) and math.isfinite(p.psnr_rgb)):
                break
            cross = (b.bpp - a.bpp) * (p.psnr_rgb - a.psnr_rgb) - (
                p.bpp - a.bpp
            ) * (b.psnr_rgb - a.psnr_rgb)
            if cross >= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def write_csv(path, points: list[RdPoint]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for p in points:
            writer.writerow(
                [p.label, p.cbn, p.level, repr(p.lambda_or_delta), p.B,
                 repr(p.bpp), repr(p.psnr_rgb)]
            )


def read_csv(path) -> list[RdPoint]:
    points = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV columns {header}")
        for row in reader:
            points.append(
                RdPoint(
                    label=row[0], cbn=row[1], level=int(row[2]),
                    lambda_or_delta=float(row[3]), B=int(row[4]),
                    bpp=float(row[5]), psnr_rgb=float(row[6]),
                )
            )
    return points
