"""Univariate weighted smoothers for backfitting.

A smoother is prepared once for fixed ``(x, weights)`` and then applied to
many partial residuals; backfitting reuses the prepared operator on every
sweep.  Every fitted function is centered to weighted mean zero on the
training points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
import scipy.linalg
from scipy.interpolate import BSpline

from .errors import ConvergenceError, DataError


def _wmean(v: np.ndarray, w: np.ndarray) -> float:
    return float(np.sum(w * v) / np.sum(w))


class SmoothFunction:
    """A fitted, centered univariate function."""

    dof: float

    def __call__(self, x: Any) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class LinearFunction(SmoothFunction):
    slope: float
    center: float
    dof: float = 1.0

    def __call__(self, x: Any) -> np.ndarray:
        return self.slope * (np.asarray(x, dtype=float) - self.center)


@dataclass(frozen=True)
class StepFunction(SmoothFunction):
    """Piecewise constant on bins split at ``cuts``."""

    cuts: np.ndarray
    levels: np.ndarray
    dof: float

    def __call__(self, x: Any) -> np.ndarray:
        idx = np.searchsorted(self.cuts, np.asarray(x, dtype=float), side="right")
        return self.levels[idx]


@dataclass(frozen=True)
class SplineFunction(SmoothFunction):
    """Cubic B-spline, continued linearly outside the training range."""

    spline: BSpline
    lo: float
    hi: float
    shift: float
    dof: float

    def __call__(self, x: Any) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        inside = np.clip(x, self.lo, self.hi)
        out = self.spline(inside)
        d1 = self.spline.derivative(1)
        below, above = x < self.lo, x > self.hi
        if below.any():
            out = np.where(below, self.spline(self.lo) + d1(self.lo) * (x - self.lo), out)
        if above.any():
            out = np.where(above, self.spline(self.hi) + d1(self.hi) * (x - self.hi), out)
        return out - self.shift


class Smoother:
    """Interface: ``prepare(x, w)`` returns an object with ``fit(residual)``."""

    dof: float

    def prepare(self, x: np.ndarray, weights: np.ndarray) -> "PreparedSmoother":
        raise NotImplementedError

    def fit(self, x: Any, partial_residual: Any, weights: Any) -> SmoothFunction:
        x = np.asarray(x, dtype=float)
        w = np.asarray(weights, dtype=float)
        return self.prepare(x, w).fit(np.asarray(partial_residual, dtype=float))


class PreparedSmoother:
    dof: float

    def fit(self, r: np.ndarray) -> SmoothFunction:
        raise NotImplementedError


class Linear(Smoother):
    """Weighted least-squares line through the partial residual."""

    dof = 1.0

    def prepare(self, x, weights):
        return _PreparedLinear(np.asarray(x, float), np.asarray(weights, float))

    def __repr__(self) -> str:
        return "Linear()"


class _PreparedLinear(PreparedSmoother):
    dof = 1.0

    def __init__(self, x: np.ndarray, w: np.ndarray):
        self.center = _wmean(x, w)
        self.xc = x - self.center
        self.w = w
        self.sxx = float(np.sum(w * self.xc**2))
        if self.sxx <= 0:
            raise DataError("a Linear term needs a feature that is not constant")

    def fit(self, r):
        b = float(np.sum(self.w * self.xc * r)) / self.sxx
        return LinearFunction(b, self.center)


class RunningMeanBins(Smoother):
    """Weighted mean of the partial residual within ``k`` quantile bins."""

    def __init__(self, k: int = 10):
        if k < 2:
            raise ValueError("need at least 2 bins")
        self.k = int(k)
        self.dof = float(k - 1)

    def prepare(self, x, weights):
        return _PreparedBins(np.asarray(x, float), np.asarray(weights, float), self.k)

    def __repr__(self) -> str:
        return f"RunningMeanBins({self.k})"


class _PreparedBins(PreparedSmoother):
    def __init__(self, x: np.ndarray, w: np.ndarray, k: int):
        cuts = np.unique(np.quantile(x, np.linspace(0, 1, k + 1)[1:-1]))
        self.cuts = cuts
        self.codes = np.searchsorted(cuts, x, side="right")
        self.w = w
        self.nb = cuts.size + 1
        self.wsum = np.bincount(self.codes, weights=w, minlength=self.nb)
        self.dof = float(np.count_nonzero(self.wsum) - 1)

    def fit(self, r):
        sums = np.bincount(self.codes, weights=self.w * r, minlength=self.nb)
        levels = np.divide(sums, self.wsum, out=np.zeros(self.nb), where=self.wsum > 0)
        levels -= np.sum(levels * self.wsum) / self.wsum.sum()
        return StepFunction(self.cuts, levels, self.dof)


class CubicSplinePenalized(Smoother):
    """Penalized cubic regression spline with a target effective dof.

    The fit minimizes ``sum w (r - f)^2 + lam * int f''^2`` over a cubic
    B-spline basis with ``n_knots`` interior knots at quantiles of ``x``.
    ``lam`` is chosen by bisection on ``log(lam)`` so that the smoother trace
    minus one (the constant is removed by centering) hits ``dof`` within
    ``dof_tol``.  ``dof=1`` is the linear limit.
    """

    def __init__(self, dof: float = 4.0, n_knots: int = 20, dof_tol: float = 0.01):
        if dof < 1:
            raise ValueError("target dof must be at least 1")
        self.dof = float(dof)
        self.n_knots = int(n_knots)
        self.dof_tol = float(dof_tol)

    def prepare(self, x, weights):
        return _PreparedSpline(np.asarray(x, float), np.asarray(weights, float), self)

    def __repr__(self) -> str:
        return f"CubicSplinePenalized(dof={self.dof:g})"


def _knots(x: np.ndarray, n_interior: int) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if not hi > lo:
        raise DataError("a spline term needs a feature that is not constant")
    ux = np.unique(x)
    m = min(n_interior, max(ux.size - 4, 0))
    inner = np.unique(np.quantile(ux, np.linspace(0, 1, m + 2)[1:-1])) if m else np.array([])
    inner = inner[(inner > lo) & (inner < hi)]
    return np.concatenate([[lo] * 4, inner, [hi] * 4])


def second_derivative_penalty(t: np.ndarray, k: int = 3) -> np.ndarray:
    """``Omega_ij = int B_i'' B_j''`` over the knot span.

    ``B''`` is linear on each knot interval for cubic splines, so a two-point
    Gauss-Legendre rule per interval is exact.
    """
    n = len(t) - k - 1
    d2 = BSpline(t, np.eye(n), k).derivative(2)
    breaks = np.unique(t)
    nodes, wts = np.polynomial.legendre.leggauss(2)
    a, b = breaks[:-1], breaks[1:]
    half = 0.5 * (b - a)
    pts = (0.5 * (a + b))[:, None] + half[:, None] * nodes[None, :]
    ww = (half[:, None] * wts[None, :]).ravel()
    vals = d2(pts.ravel())
    return (vals * ww[:, None]).T @ vals


class _PreparedSpline(PreparedSmoother):
    def __init__(self, x: np.ndarray, w: np.ndarray, spec: CubicSplinePenalized):
        self.t = _knots(x, spec.n_knots)
        self.lo, self.hi = float(self.t[0]), float(self.t[-1])
        B = BSpline.design_matrix(x, self.t, 3).toarray()
        self.B = B
        self.w = w
        self.BtWB = B.T @ (B * w[:, None])
        self.omega = second_derivative_penalty(self.t)
        nb = B.shape[1]
        max_dof = nb - 1
        target = min(spec.dof, max_dof - 1e-6)
        ridge = 1e-10 * np.trace(self.BtWB) / nb * np.eye(nb)
        self._ridge = ridge
        scale = np.trace(self.BtWB) / max(np.trace(self.omega), 1e-300)
        lo, hi = np.log(scale) - 30.0, np.log(scale) + 30.0
        if self._edf(np.exp(hi)) > target + spec.dof_tol:
            raise ConvergenceError(f"cannot reach spline dof {spec.dof}: basis too small")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            e = self._edf(np.exp(mid))
            if abs(e - target) <= spec.dof_tol * 0.1:
                break
            if e > target:
                lo = mid
            else:
                hi = mid
        self.lam = float(np.exp(mid))
        self.dof = self._edf(self.lam)
        self.chol = scipy.linalg.cho_factor(self.BtWB + self.lam * self.omega + ridge)

    def _edf(self, lam: float) -> float:
        A = self.BtWB + lam * self.omega + self._ridge
        return float(np.trace(scipy.linalg.cho_solve(scipy.linalg.cho_factor(A), self.BtWB))) - 1.0

    def fit(self, r):
        c = scipy.linalg.cho_solve(self.chol, self.B.T @ (self.w * r))
        fitted = self.B @ c
        spline = BSpline(self.t, c, 3)
        return SplineFunction(spline, self.lo, self.hi, _wmean(fitted, self.w), self.dof)
