"""Kernel density curves and density-discontinuity (manipulation) tests.

The manipulation test estimates the density of the t-statistics just
left and just right of a significance cutoff, each side on its own, by a
triangular-kernel local polynomial fit to the empirical CDF.  The slope
coefficient of that fit is the one-sided density at the cutoff.
Standard errors come from a seeded nonparametric bootstrap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from scipy import integrate, stats

Side = Literal["left", "right"]

FIGURE_BANDWIDTH = 0.15
TABLE_CUTOFFS = (1.645, 1.96, 2.326)
BANDWIDTH_FACTOR = 1.8
MIN_SIDE_OBS = 5


class DensityError(ValueError):
    pass


@dataclass(frozen=True)
class KdeCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    kernel: str = "gaussian"

    def integral(self) -> float:
        return float(integrate.trapezoid(self.density, self.grid))


@dataclass(frozen=True)
class ManipulationTestResult:
    cutoff: float
    f_left: float
    f_right: float
    se_left: float
    se_right: float
    se_diff: float
    statistic: float
    p_value: float
    bandwidth_left: float
    bandwidth_right: float
    n_left: int
    n_right: int
    order: int = 3
    n_bootstrap: int = 0

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in self.__dict__.items()}


def kde(samples: Sequence[float], bandwidth: float = FIGURE_BANDWIDTH,
        grid: Sequence[float] | None = None) -> KdeCurve:
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise DensityError("kde needs at least one sample")
    if not bandwidth > 0:
        raise DensityError("bandwidth must be positive")
    g = default_grid(x, bandwidth) if grid is None else np.asarray(grid, dtype=float)
    z = (g[:, None] - x[None, :]) / bandwidth
    dens = stats.norm.pdf(z).sum(axis=1) / (x.size * bandwidth)
    return KdeCurve(g, dens, float(bandwidth))


def default_grid(samples: np.ndarray, bandwidth: float, pad: float = 4.0, points: int = 801) -> np.ndarray:
    return np.linspace(samples.min() - pad * bandwidth, samples.max() + pad * bandwidth, points)


def _split(x: np.ndarray, cutoff: float, side: Side) -> np.ndarray:
    # points exactly at the cutoff belong to the right side
    if side == "left":
        return x < cutoff
    if side == "right":
        return x >= cutoff
    raise ValueError(f"side must be 'left' or 'right', got {side!r}")


def bandwidth_rule(samples: Sequence[float], cutoff: float, side: Side) -> float:
    """One-sided rule of thumb ``1.8 * sd_side * m**(-1/5)``."""
    x = np.asarray(samples, dtype=float)
    one = x[_split(x, cutoff, side)]
    if one.size < MIN_SIDE_OBS:
        raise DensityError(f"{side} side has {one.size} observations; need at least {MIN_SIDE_OBS}")
    sd = one.std(ddof=1)
    if not sd > 0:
        raise DensityError(f"{side} side sample is degenerate (all values equal)")
    return float(BANDWIDTH_FACTOR * sd * one.size ** -0.2)


def _fit_side(xs: np.ndarray, F: np.ndarray, mult: np.ndarray, cutoff: float, side: Side,
              order: int, h: float) -> float:
    """Weighted polynomial fit of the ECDF on one side; returns the slope at the cutoff.

    ``xs`` sorted support points, ``F`` the full-sample ECDF at them and
    ``mult`` their weights.
    """
    u = (xs - cutoff) / h
    inside = _split(xs, cutoff, side) & (np.abs(u) < 1) & (mult > 0)
    m = int(mult[inside].sum())
    if m < order + 2 or np.count_nonzero(inside) < order + 1:
        raise DensityError(f"{m} effective observations within the {side} window; need at least {order + 2}")
    uu = u[inside]
    w = mult[inside] * (1 - np.abs(uu))
    V = np.vander(uu, order + 1, increasing=True)
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(V * sw[:, None], F[inside] * sw, rcond=None)
    return float(coef[1] / h)


def _ecdf(xs: np.ndarray, mult: np.ndarray, n: int) -> np.ndarray:
    """Mid-rank ECDF: halfway between the left and right limits at each point.

    Reflecting the sample maps it to ``1 - F`` exactly, which keeps the
    left and right fits mirror images of each other.
    """
    cum = np.concatenate([[0.0], np.cumsum(mult)])
    upper = cum[np.searchsorted(xs, xs, side="right")]
    lower = cum[np.searchsorted(xs, xs, side="left")]
    return 0.5 * (upper + lower) / n


def local_poly_density(samples: Sequence[float], cutoff: float, side: Side, order: int = 3,
                       bandwidth: float | None = None, n_bootstrap: int = 0,
                       seed: int = 0) -> tuple[float, float]:
    """One-sided density at ``cutoff`` and its bootstrap standard error.

    With ``n_bootstrap=0`` the standard error is returned as NaN.
    """
    raw = np.asarray(samples, dtype=float)
    x = np.sort(raw)
    h = bandwidth_rule(x, cutoff, side) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise DensityError("bandwidth must be positive")
    one = x[_split(x, cutoff, side)]
    if one.size and np.all(one == one[0]):
        raise DensityError(f"{side} side sample is degenerate (all values equal)")
    mult = np.ones_like(x)
    f_hat = _fit_side(x, _ecdf(x, mult, x.size), mult, cutoff, side, order, h)
    if n_bootstrap <= 0:
        return f_hat, float("nan")
    reps = _bootstrap(raw, cutoff, order, {side: h}, n_bootstrap, seed)[side]
    return f_hat, float(np.std(reps, ddof=1))


def _bootstrap(samples: np.ndarray, cutoff: float, order: int, bandwidths: dict[str, float],
               n_bootstrap: int, seed: int) -> dict[str, np.ndarray]:
    """Bootstrap replicates of the one-sided estimates.

    Replicate ``b`` draws from its own stream spawned off ``seed``, so the
    replicate vector does not depend on evaluation order.  Resampling
    counts are drawn against the input order, so a transformed copy of
    the same sample gets the same resamples.

    The resample's ECDF is evaluated at the original support points and
    fitted with kernel weights only.  Weighting by the resampling counts
    instead fits a coarser staircase (about a third of the points drop
    out) and overstates the standard error by roughly 8%, which makes the
    test conservative.
    """
    n = samples.size
    sort = np.argsort(samples, kind="stable")
    x = samples[sort]
    children = np.random.SeedSequence(seed).spawn(n_bootstrap)
    out = {s: np.full(n_bootstrap, np.nan) for s in bandwidths}
    p = np.full(n, 1.0 / n)
    ones = np.ones(n)
    for b, child in enumerate(children):
        counts = np.random.Generator(np.random.Philox(child)).multinomial(n, p).astype(float)[sort]
        F = _ecdf(x, counts, n)
        for s, h in bandwidths.items():
            out[s][b] = _fit_side(x, F, ones, cutoff, s, order, h)
    return out


def manipulation_test(samples: Sequence[float], cutoff: float, order: int = 3,
                      bandwidths: tuple[float, float] | None = None, n_bootstrap: int = 500,
                      seed: int = 0) -> ManipulationTestResult:
    """Test for a jump in the density of ``samples`` at ``cutoff``."""
    if n_bootstrap < 2:
        raise ValueError("n_bootstrap must be at least 2")
    raw = np.asarray(samples, dtype=float)
    x = np.sort(raw)
    if bandwidths is None:
        h_l, h_r = bandwidth_rule(x, cutoff, "left"), bandwidth_rule(x, cutoff, "right")
    else:
        h_l, h_r = map(float, bandwidths)
    f_l, _ = local_poly_density(x, cutoff, "left", order, h_l)
    f_r, _ = local_poly_density(x, cutoff, "right", order, h_r)
    reps = _bootstrap(raw, cutoff, order, {"left": h_l, "right": h_r}, n_bootstrap, seed)
    se_l = float(np.std(reps["left"], ddof=1))
    se_r = float(np.std(reps["right"], ddof=1))
    se_d = float(np.std(reps["right"] - reps["left"], ddof=1))
    stat = (f_r - f_l) / se_d
    p = float(2 * stats.norm.sf(abs(stat)))
    return ManipulationTestResult(
        cutoff=float(cutoff), f_left=f_l, f_right=f_r, se_left=se_l, se_right=se_r, se_diff=se_d,
        statistic=float(stat), p_value=p, bandwidth_left=h_l, bandwidth_right=h_r,
        n_left=int(np.sum(x < cutoff)), n_right=int(np.sum(x >= cutoff)),
        order=order, n_bootstrap=n_bootstrap,
    )
