"""Additive models fitted by backfitting.

``y ~ f0 + sum_j f_j(z_j) [+ f_bank(s)]`` where each ``z_j`` is a feature or
a product of features and ``f_bank`` are centered bank offsets.  The FEO
variant fits the offsets and then drops them from the forecast.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import stats

from .errors import ConvergenceError, DataError
from .panel import PanelDataset
from .smoothers import CubicSplinePenalized, Smoother, SmoothFunction

DEFAULT_TOL = 1e-8
DEFAULT_MAX_SWEEPS = 200


@dataclass(frozen=True)
class Term:
    """One additive term: a smoother applied to a feature or to a product of features."""

    feature: int | str | tuple
    smoother: Smoother
    label: str | None = None

    def name(self, feature_names: Sequence[str]) -> str:
        if self.label:
            return self.label
        parts = self.feature if isinstance(self.feature, tuple) else (self.feature,)
        names = [feature_names[p] if isinstance(p, (int, np.integer)) else p for p in parts]
        return "*".join(names)

    def values(self, features: np.ndarray, feature_names: Sequence[str]) -> np.ndarray:
        parts = self.feature if isinstance(self.feature, tuple) else (self.feature,)
        out = np.ones(features.shape[0])
        for p in parts:
            if isinstance(p, (int, np.integer)):
                j = int(p)
            else:
                try:
                    j = list(feature_names).index(p)
                except ValueError:
                    raise DataError(f"unknown feature {p!r} in additive term") from None
            out = out * features[:, j]
        return out


@dataclass
class AdditiveModel:
    """Backfitting result.

    ``bank_offsets`` are centered so that ``sum_s p_hat_s * offset_s = 0``.
    ``ssr_history[0]`` is the weighted SSR of the constant-only start and
    ``ssr_history[k]`` the SSR after sweep ``k``.
    """

    f0: float
    terms: list[tuple[str, SmoothFunction]]
    term_specs: list[Term]
    feature_names: tuple[str, ...]
    bank_offsets: dict[str, float] | None
    converged: bool
    sweeps: int
    max_change_last_sweep: float
    ssr: float
    n_obs: int
    ssr_history: list[float] = field(default_factory=list)

    @property
    def term_labels(self) -> list[str]:
        return [label for label, _ in self.terms]

    @property
    def has_offsets(self) -> bool:
        return self.bank_offsets is not None

    @property
    def term_dof(self) -> float:
        return float(sum(f.dof for _, f in self.terms))

    @property
    def residual_dof(self) -> float:
        """``N - 1 - sum(term dof) - (S - 1 if offsets)``."""
        extra = len(self.bank_offsets) - 1 if self.bank_offsets else 0
        return self.n_obs - 1 - self.term_dof - extra

    def term_values(self, features: np.ndarray) -> np.ndarray:
        cols = [
            f(spec.values(features, self.feature_names))
            for (_, f), spec in zip(self.terms, self.term_specs)
        ]
        return np.column_stack(cols) if cols else np.zeros((features.shape[0], 0))

    def predict(self, data: PanelDataset | Any, include_offsets: bool = False) -> np.ndarray:
        """``f0 + sum_j f_j``; bank offsets are added only on request."""
        if isinstance(data, PanelDataset):
            feats = data.features
        else:
            feats = np.atleast_2d(np.asarray(data, dtype=float))
        out = self.f0 + self.term_values(feats).sum(axis=1)
        if include_offsets:
            if not isinstance(data, PanelDataset):
                raise DataError("bank offsets need a PanelDataset with bank ids")
            if self.bank_offsets is None:
                raise DataError("model has no bank offsets")
            out = out + np.array([self.bank_offsets.get(b, 0.0) for b in data.bank_ids])
        return out


def _wrms(v: np.ndarray, w: np.ndarray) -> float:
    return float(np.sqrt(np.sum(w * v * v) / np.sum(w)))


def backfit(
    ds: PanelDataset,
    terms: Sequence[Term],
    include_bank_offsets: bool = False,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
) -> AdditiveModel:
    """Cyclic backfitting of partial residuals.

    Each sweep refits every term on ``y - f0 - (all other terms) - offsets``
    and then, if requested, the bank offsets as weighted within-bank means of
    the remaining partial residual.  Iteration stops once the largest
    weighted-RMS change of any component in a sweep falls below ``tol``.
    Non-convergence is reported through ``converged=False``, not raised.
    """
    if not terms:
        raise ValueError("backfitting needs at least one term")
    if tol <= 0:
        raise ValueError("tol must be positive")
    y, w = ds.response, ds.weights
    f0 = float(np.sum(w * y) / np.sum(w))
    zs = [t.values(ds.features, ds.feature_names) for t in terms]
    prepared = [t.smoother.prepare(z, w) for t, z in zip(terms, zs)]
    fitted = np.zeros((len(terms), ds.n_rows))
    funcs: list[SmoothFunction | None] = [None] * len(terms)
    codes = ds.bank_index
    shares = ds.weight_shares()
    wbank = np.bincount(codes, weights=w, minlength=ds.n_banks)
    offsets = np.zeros(ds.n_banks)
    offset_rows = np.zeros(ds.n_rows)
    history = [float(np.sum(w * (y - f0) ** 2))]
    converged = False
    change = np.inf
    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        change = 0.0
        total = fitted.sum(axis=0)
        for j, prep in enumerate(prepared):
            partial = y - f0 - (total - fitted[j]) - offset_rows
            funcs[j] = prep.fit(partial)
            new = funcs[j](zs[j])
            if not np.all(np.isfinite(new)):
                raise ConvergenceError(f"non-finite term values in sweep {sweep}", sweep=sweep)
            change = max(change, _wrms(new - fitted[j], w))
            total = total - fitted[j] + new
            fitted[j] = new
        if include_bank_offsets:
            partial = y - f0 - total
            means = np.bincount(codes, weights=w * partial, minlength=ds.n_banks) / wbank
            means -= shares @ means
            new_rows = means[codes]
            if not np.all(np.isfinite(new_rows)):
                raise ConvergenceError(f"non-finite bank offsets in sweep {sweep}", sweep=sweep)
            change = max(change, _wrms(new_rows - offset_rows, w))
            offsets, offset_rows = means, new_rows
        resid = y - f0 - total - offset_rows
        history.append(float(np.sum(w * resid**2)))
        if change < tol:
            converged = True
            break
    return AdditiveModel(
        f0=f0,
        terms=[(t.name(ds.feature_names), f) for t, f in zip(terms, funcs)],
        term_specs=list(terms),
        feature_names=ds.feature_names,
        bank_offsets=dict(zip(ds.banks, offsets.tolist())) if include_bank_offsets else None,
        converged=converged,
        sweeps=sweep,
        max_change_last_sweep=float(change),
        ssr=history[-1],
        n_obs=ds.n_rows,
        ssr_history=history,
    )


class GamMode(str, enum.Enum):
    POOLED = "pooled"
    FEO = "feo"


def default_terms(ds: PanelDataset) -> list[Term]:
    """Splines (4 dof) on the first two features and on their product."""
    if ds.dim < 2:
        raise DataError("the default GAM terms need at least two features")
    a, b = ds.feature_names[:2]
    return [
        Term(a, CubicSplinePenalized(4.0)),
        Term(b, CubicSplinePenalized(4.0)),
        Term((a, b), CubicSplinePenalized(4.0)),
    ]


@dataclass(frozen=True)
class GamForecaster:
    """``f0 + sum_j f_j``: equal treatment, bank offsets (if any) discarded."""

    model: AdditiveModel
    requires_bank = False

    def predict(self, x: Any, bank: int | None = None) -> Any:
        return self.model.predict(x)


@dataclass
class GamFit:
    model: AdditiveModel
    forecaster: GamForecaster
    mode: GamMode


def fit_gam(
    ds: PanelDataset,
    mode: GamMode | str = GamMode.POOLED,
    terms: Sequence[Term] | None = None,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
) -> GamFit:
    """Pooled GAM, or FEO GAM (bank offsets fitted, then left out of the forecast)."""
    mode = GamMode(mode)
    if mode is GamMode.FEO and ds.n_banks < 2:
        raise DataError("an FEO GAM needs at least 2 banks")
    terms = default_terms(ds) if terms is None else list(terms)
    model = backfit(ds, terms, mode is GamMode.FEO, tol, max_sweeps)
    return GamFit(model, GamForecaster(model), mode)


@dataclass(frozen=True)
class FTestResult:
    F: float
    dof1: float
    dof2: float
    p_value: float


def nested_f_test(
    small: AdditiveModel, big: AdditiveModel, ds: PanelDataset | None = None
) -> FTestResult:
    """F-test of a smaller additive model against a larger one fitted to the same rows.

    Penalized terms contribute their effective dof.  Residual dof follow
    :attr:`AdditiveModel.residual_dof`.
    """
    if small.n_obs != big.n_obs or (ds is not None and ds.n_rows != big.n_obs):
        raise DataError("nested models must be fitted to the same rows")
    if not set(small.term_labels) <= set(big.term_labels):
        raise DataError("terms of the smaller model are not a subset of the larger model's")
    if small.has_offsets and not big.has_offsets:
        raise DataError("the smaller model has bank offsets but the larger one does not")
    scale = max(small.ssr, big.ssr, 1e-300)
    if big.ssr > small.ssr + 1e-8 * scale:
        raise DataError(
            f"larger model has higher SSR ({big.ssr:.6g} > {small.ssr:.6g}); nesting violated"
        )
    dof1 = small.residual_dof - big.residual_dof
    dof2 = big.residual_dof
    if dof2 <= 0:
        raise DataError("no residual degrees of freedom left in the larger model")
    gain = max(small.ssr - big.ssr, 0.0)
    if dof1 <= 1e-9:
        if gain <= 1e-12 * scale:
            return FTestResult(0.0, 0.0, float(dof2), 1.0)
        raise DataError("the larger model adds no degrees of freedom but lowers SSR")
    F = (gain / dof1) / (big.ssr / dof2)
    return FTestResult(float(F), float(dof1), float(dof2), float(stats.f.sf(F, dof1, dof2)))


@dataclass(frozen=True)
class NonlinearMisdirection:
    """Sample diagnostics for an adjusted FEO forecast ``y_F + gamma``.

    ``residual_cov[j]`` is ``cov(y_F - y, z_j - within-bank mean of z_j)``;
    ``cov_a`` is ``cov(gamma, E_hat[f_bank | z])`` and ``cov_b`` is
    ``cov(within-bank mean of gamma, f_bank)``.
    """

    mse_feo: float
    mse_gamma: float
    residual_cov: np.ndarray
    cov_a: float
    cov_b: float


def _wcov(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> float:
    w = w / w.sum()
    return float(np.sum(w * (a - w @ a) * (b - w @ b)))


def nonlinear_misdirection_check(
    ds: PanelDataset, feo: AdditiveModel, gamma: Any
) -> NonlinearMisdirection:
    if feo.bank_offsets is None:
        raise DataError("the FEO model carries no bank offsets")
    g = np.broadcast_to(np.asarray(gamma, dtype=float), (ds.n_rows,)).copy()
    w = ds.weights
    y = ds.response
    yf = feo.predict(ds)
    mse_feo = float(np.sum(w * (yf - y) ** 2) / w.sum())
    mse_gamma = float(np.sum(w * (yf + g - y) ** 2) / w.sum())
    codes = ds.bank_index
    wbank = np.bincount(codes, weights=w, minlength=ds.n_banks)
    res = yf - y
    rcov = []
    for spec in feo.term_specs:
        z = spec.values(ds.features, ds.feature_names)
        zbar = np.bincount(codes, weights=w * z, minlength=ds.n_banks) / wbank
        rcov.append(_wcov(res, z - zbar[codes], w))
    f1 = np.array([feo.bank_offsets[b] for b in ds.banks])[codes]
    # E_hat[f_bank | z]: backfit the offsets themselves on the same terms
    proxy_ds = PanelDataset(ds.bank_ids, ds.time, f1, ds.features, w, ds.feature_names, ds.category)
    proxy = backfit(proxy_ds, feo.term_specs, False).predict(ds)
    gbar = np.bincount(codes, weights=w * g, minlength=ds.n_banks) / wbank
    return NonlinearMisdirection(
        mse_feo,
        mse_gamma,
        np.array(rcov),
        _wcov(g, proxy, w),
        _wcov(gbar[codes], f1, w),
    )
