"""Sample estimators on panel data.

Weighted least squares, pooled and fixed-effects panel fits, clustered
sandwich covariances, Wald tests for linear restrictions, the cross-bank
heterogeneity test, the stacked pooled-versus-FEO test and the
autoregressive revenue models.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
import scipy.linalg
from scipy import stats

from .errors import DataError, RankDeficientError, SingularMatrixError
from .model import ForecasterKind, LinearForecaster
from .panel import PanelDataset

RANK_TOL = 1e-10
WALD_NEG_FLOOR = -1e-10
RELATIVE_DIFF_FLOOR = 1e-12


@dataclass
class RegressionFit:
    """Result of a weighted least-squares fit.

    ``bread`` is ``(X'WX)^{-1}``; it is reused by the sandwich estimators.
    """

    coefficients: np.ndarray
    residuals: np.ndarray
    labels: list[str]
    ssr: float
    dof: int
    design: np.ndarray
    weights: np.ndarray
    bread: np.ndarray
    covariance: np.ndarray | None = None
    covariance_spec: "CovarianceSpec | None" = None
    warnings: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def coef(self, label: str) -> float:
        return float(self.coefficients[self.labels.index(label)])

    def std_errors(self) -> np.ndarray:
        if self.covariance is None:
            raise ValueError("no covariance attached to this fit")
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def n_obs(self) -> int:
        return self.residuals.shape[0]


def weighted_least_squares(
    design: Any,
    response: Any,
    weights: Any | None = None,
    labels: Sequence[str] | None = None,
) -> RegressionFit:
    """Minimize ``sum_i w_i (y_i - x_i'b)^2`` with a pivoted QR of the scaled design.

    Raises
    ------
    RankDeficientError
        If the design is (numerically) rank deficient.  The error names the
        first column that the pivoted factorization found to be dependent on
        the others.
    """
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(response, dtype=float).ravel()
    n, k = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float).ravel()
    labels = list(labels) if labels is not None else [f"c{j}" for j in range(k)]
    if len(labels) != k:
        raise ValueError(f"{len(labels)} labels for {k} design columns")
    if y.shape[0] != n or w.shape[0] != n:
        raise DataError("design, response and weights must have the same number of rows")
    if n < k:
        raise RankDeficientError(f"{n} rows cannot identify {k} coefficients", column=labels[-1])
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise DataError("regression weights must be strictly positive")
    sw = np.sqrt(w)
    A = X * sw[:, None]
    Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_TOL * max(diag[0], 1e-300))) if k else 0
    if rank < k:
        bad = labels[piv[rank]]
        raise RankDeficientError(
            f"design is rank deficient ({rank} of {k}); column {bad!r} is a linear "
            "combination of the others",
            column=bad,
        )
    z = scipy.linalg.solve_triangular(R, Q.T @ (y * sw))
    coef = np.empty(k)
    coef[piv] = z
    Rinv = scipy.linalg.solve_triangular(R, np.eye(k))
    bread = np.empty((k, k))
    inner = Rinv @ Rinv.T
    bread[np.ix_(piv, piv)] = inner
    resid = y - X @ coef
    return RegressionFit(
        coefficients=coef,
        residuals=resid,
        labels=labels,
        ssr=float(np.sum(w * resid**2)),
        dof=n - k,
        design=X,
        weights=w,
        bread=bread,
    )


def centered_dummies(
    bank_ids: Sequence[Any],
    weights_by_bank: Mapping[Any, float],
) -> np.ndarray:
    """Centered bank dummies ``U_i(s) = 1{s = i} - p_i``.

    One column per bank in ``weights_by_bank`` except the last (reference)
    bank, in mapping order.
    """
    banks = list(weights_by_bank)
    pos = {b: i for i, b in enumerate(banks)}
    p = np.array([weights_by_bank[b] for b in banks], dtype=float)
    codes = np.empty(len(bank_ids), dtype=int)
    for r, b in enumerate(bank_ids):
        try:
            codes[r] = pos[b]
        except KeyError:
            raise DataError(f"bank id {b!r} not in the weight map") from None
    return _dummies_from_codes(codes, p)


def _dummies_from_codes(codes: np.ndarray, p: np.ndarray) -> np.ndarray:
    n_banks = p.shape[0]
    U = np.zeros((codes.shape[0], n_banks - 1))
    rows = np.flatnonzero(codes < n_banks - 1)
    U[rows, codes[rows]] = 1.0
    return U - p[:-1]


def panel_dummies(ds: PanelDataset) -> tuple[np.ndarray, list[str]]:
    """Centered dummies for ``ds`` using the sample weight shares ``p_hat``."""
    U = _dummies_from_codes(ds.bank_index, ds.weight_shares())
    return U, [f"U[{b}]" for b in ds.banks[:-1]]


class PanelMode(str, enum.Enum):
    POOLED = "pooled"
    FIXED_EFFECTS = "fixed_effects"


@dataclass
class PanelFit:
    forecaster: LinearForecaster
    fit: RegressionFit

    @property
    def delta(self) -> np.ndarray | None:
        """Estimated (and discarded) centered fixed effects, if any."""
        return self.forecaster.delta


def _design(ds: PanelDataset, fixed_effects: bool, extra: list[tuple[str, np.ndarray]] = ()):
    cols = [np.ones(ds.n_rows)]
    labels = ["const"]
    if fixed_effects:
        U, ulabels = panel_dummies(ds)
        cols.extend(U.T)
        labels.extend(ulabels)
    for name, col in extra:
        cols.append(col)
        labels.append(name)
    cols.extend(ds.features.T)
    labels.extend(ds.feature_names)
    return np.column_stack(cols), labels


def fit_panel(ds: PanelDataset, mode: PanelMode | str = PanelMode.POOLED) -> PanelFit:
    """Pooled or fixed-effects least squares on a panel.

    In fixed-effects mode the centered dummies are fitted and then dropped
    from the returned forecaster; because they have weighted mean zero the
    remaining intercept still matches the weighted mean response.
    """
    mode = PanelMode(mode)
    fe = mode is PanelMode.FIXED_EFFECTS
    if fe and ds.n_banks < 2:
        raise DataError("fixed effects need at least 2 banks")
    X, labels = _design(ds, fe)
    fit = weighted_least_squares(X, ds.response, ds.weights, labels)
    d = ds.dim
    slope = fit.coefficients[-d:]
    if fe:
        counts = ds.bank_counts()
        for b, c in zip(ds.banks, counts):
            if c < 2:
                msg = f"bank {b!r} has {c} observation(s); its within-bank slope is unidentified"
                fit.warnings.append(msg)
                warnings.warn(msg, RuntimeWarning, stacklevel=2)
        f = LinearForecaster(
            ForecasterKind.FEO,
            fit.coefficients[0],
            slope,
            n_banks=ds.n_banks,
            delta=fit.coefficients[1 : ds.n_banks],
            centering=ds.weight_shares(),
            meta={"banks": ds.banks, "feature_names": ds.feature_names},
        )
    else:
        f = LinearForecaster(
            ForecasterKind.POOLED,
            fit.coefficients[0],
            slope,
            n_banks=ds.n_banks,
            meta={"banks": ds.banks, "feature_names": ds.feature_names},
        )
    return PanelFit(f, fit)


class CovarianceSpec(str, enum.Enum):
    """Which rows may have correlated errors: those of one bank, or of one period."""

    BANK_CLUSTERED = "bank"
    TIME_CLUSTERED = "time"


def panel_clusters(ds: PanelDataset, spec: CovarianceSpec | str) -> np.ndarray:
    spec = CovarianceSpec(spec)
    return ds.bank_ids if spec is CovarianceSpec.BANK_CLUSTERED else ds.time


def clustered_covariance(
    fit: RegressionFit,
    clusters: Sequence[Any],
    spec: CovarianceSpec | str | None = None,
) -> np.ndarray:
    """Cluster-robust sandwich ``B (sum_g s_g s_g') B`` with ``B = (X'WX)^{-1}``.

    ``s_g = sum_{i in g} x_i w_i e_i``.  The finite-sample factor
    ``G/(G-1) * (N-1)/(N-K)`` is applied.  The result is attached to ``fit``.
    """
    labels = np.asarray(clusters)
    n, k = fit.design.shape
    if labels.shape[0] != n:
        raise DataError(f"{labels.shape[0]} cluster labels for {n} rows")
    _, codes = np.unique(labels, return_inverse=True)
    G = int(codes.max()) + 1 if n else 0
    if G < 2:
        raise DataError("clustered covariance needs at least 2 clusters")
    scores = fit.design * (fit.weights * fit.residuals)[:, None]
    S = np.zeros((G, k))
    np.add.at(S, codes, scores)
    meat = S.T @ S
    factor = G / (G - 1) * (n - 1) / max(n - k, 1)
    cov = factor * fit.bread @ meat @ fit.bread
    cov = 0.5 * (cov + cov.T)
    fit.covariance = cov
    fit.covariance_spec = None if spec is None else CovarianceSpec(spec)
    return cov


def newey_west_bandwidth(n: int) -> int:
    return int(np.floor(4.0 * (n / 100.0) ** (2.0 / 9.0)))


def within_group_hac_covariance(
    fit: RegressionFit,
    groups: Sequence[Any],
    order: Sequence[Any],
    bandwidth: int | None = None,
) -> np.ndarray:
    """Serial-correlation-robust covariance computed separately within each group.

    Scores are ordered by ``order`` inside each group and combined with
    Bartlett weights up to ``bandwidth`` lags (default
    ``floor(4 (n_g/100)^(2/9))`` per group).  Scores of different groups are
    treated as independent.  A factor ``N/(N-K)`` is applied.
    """
    groups = np.asarray(groups)
    order = np.asarray(order)
    n, k = fit.design.shape
    scores = fit.design * (fit.weights * fit.residuals)[:, None]
    meat = np.zeros((k, k))
    for g in np.unique(groups):
        idx = np.flatnonzero(groups == g)
        idx = idx[np.argsort(order[idx], kind="stable")]
        s = scores[idx]
        L = newey_west_bandwidth(len(idx)) if bandwidth is None else bandwidth
        m = s.T @ s
        for lag in range(1, min(L, len(idx) - 1) + 1):
            gam = s[lag:].T @ s[:-lag]
            m += (1.0 - lag / (L + 1.0)) * (gam + gam.T)
        meat += m
    cov = n / max(n - k, 1) * fit.bread @ meat @ fit.bread
    cov = 0.5 * (cov + cov.T)
    fit.covariance = cov
    return cov


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    dof: int
    p_value: float


def wald_linear_restrictions(theta: Any, R: Any, r: Any, cov: Any) -> WaldResult:
    """Wald statistic for ``H0: R theta = r`` against a chi-square with ``rows(R)`` dof."""
    theta = np.asarray(theta, dtype=float).ravel()
    R = np.atleast_2d(np.asarray(R, dtype=float))
    r = np.asarray(r, dtype=float).ravel()
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    q = R.shape[0]
    if R.shape[1] != theta.shape[0] or r.shape[0] != q or cov.shape != (theta.size, theta.size):
        raise ValueError("inconsistent shapes for theta, R, r and cov")
    if np.linalg.matrix_rank(R) < q:
        raise ValueError("restriction matrix R must have full row rank")
    diff = R @ theta - r
    V = R @ cov @ R.T
    cond = np.linalg.cond(V)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularMatrixError("R cov R' is singular", condition=float(cond))
    stat = float(diff @ np.linalg.solve(V, diff))
    if stat < 0:
        if stat < WALD_NEG_FLOOR * max(1.0, float(diff @ diff)):
            raise SingularMatrixError("R cov R' is not positive definite", condition=float(cond))
        stat = 0.0
    return WaldResult(stat, q, float(stats.chi2.sf(stat, q)))


@dataclass(frozen=True)
class Intercepts:
    """Heterogeneity target: the bank intercepts."""


@dataclass(frozen=True)
class SlopeOfFeature:
    """Heterogeneity target: the bank slopes on one feature (index or name)."""

    feature: int | str


def _robust_cov(
    fit: RegressionFit, ds: PanelDataset, spec: CovarianceSpec, block_diagonal: bool
) -> np.ndarray:
    if spec is CovarianceSpec.TIME_CLUSTERED:
        return clustered_covariance(fit, ds.time, spec)
    if block_diagonal:
        # per-bank score sums vanish in a bank-by-bank design, so plain bank
        # clustering has a zero meat; use within-bank serial correlation instead
        cov = within_group_hac_covariance(fit, ds.bank_ids, ds.time)
        fit.covariance_spec = spec
        return cov
    return clustered_covariance(fit, ds.bank_ids, spec)


def heterogeneity_test(
    ds: PanelDataset,
    target: Intercepts | SlopeOfFeature,
    spec: CovarianceSpec | str = CovarianceSpec.BANK_CLUSTERED,
) -> WaldResult:
    """Test whether the targeted coefficient is equal across banks.

    Each bank gets its own block ``(1, X_s)`` in a block-diagonal design; the
    ``S-1`` restrictions are ``theta_s - theta_ref = 0`` for every non-reference
    bank.  Bank clustering uses within-bank Newey-West scores (see
    :func:`within_group_hac_covariance`); time clustering groups rows by period.
    """
    spec = CovarianceSpec(spec)
    if ds.n_banks < 2:
        raise DataError("heterogeneity test needs at least 2 banks")
    if isinstance(target, Intercepts):
        col = 0
    elif isinstance(target, SlopeOfFeature):
        col = 1 + ds.feature_index(target.feature)
    else:
        raise TypeError(f"unknown heterogeneity target {target!r}")
    k = 1 + ds.dim
    S = ds.n_banks
    codes = ds.bank_index
    local = np.column_stack([np.ones(ds.n_rows), ds.features])
    X = np.zeros((ds.n_rows, S * k))
    for s in range(S):
        rows = codes == s
        X[np.ix_(rows, np.arange(s * k, (s + 1) * k))] = local[rows]
    labels = [f"{b}:{c}" for b in ds.banks for c in ("const",) + ds.feature_names]
    fit = weighted_least_squares(X, ds.response, ds.weights, labels)
    cov = _robust_cov(fit, ds, spec, block_diagonal=True)
    R = np.zeros((S - 1, S * k))
    for s in range(S - 1):
        R[s, s * k + col] = 1.0
        R[s, (S - 1) * k + col] = -1.0
    return wald_linear_restrictions(fit.coefficients, R, np.zeros(S - 1), cov)


@dataclass(frozen=True)
class PooledVsFeoResult:
    wald: WaldResult
    beta_pool: float
    beta_f: float

    @property
    def diff_f_minus_pool(self) -> float:
        return self.beta_f - self.beta_pool

    @property
    def diff_pool_minus_f(self) -> float:
        return self.beta_pool - self.beta_f


def pooled_vs_feo_test(
    ds: PanelDataset,
    feature: int | str,
    spec: CovarianceSpec | str = CovarianceSpec.BANK_CLUSTERED,
) -> PooledVsFeoResult:
    """Joint test of ``beta_Pool,j = beta_F,j`` on a stacked, duplicated sample.

    The response is stacked twice against ``diag((1, X), (1, U, X))`` so that
    both fits share one covariance matrix; each cluster contains both copies
    of its rows.
    """
    spec = CovarianceSpec(spec)
    j = ds.feature_index(feature)
    Xp, lp = _design(ds, False)
    Xf, lf = _design(ds, True)
    n, kp = Xp.shape
    kf = Xf.shape[1]
    X = np.zeros((2 * n, kp + kf))
    X[:n, :kp] = Xp
    X[n:, kp:] = Xf
    labels = [f"pool:{c}" for c in lp] + [f"feo:{c}" for c in lf]
    y = np.concatenate([ds.response, ds.response])
    w = np.concatenate([ds.weights, ds.weights])
    fit = weighted_least_squares(X, y, w, labels)
    clusters = panel_clusters(ds, spec)
    cov = clustered_covariance(fit, np.concatenate([clusters, clusters]), spec)
    ip = 1 + j
    iF = kp + (kf - ds.dim) + j
    R = np.zeros((1, kp + kf))
    R[0, ip] = 1.0
    R[0, iF] = -1.0
    wald = wald_linear_restrictions(fit.coefficients, R, [0.0], cov)
    return PooledVsFeoResult(wald, float(fit.coefficients[ip]), float(fit.coefficients[iF]))


def predict_rows(f: Any, ds: PanelDataset) -> np.ndarray:
    """Forecasts for every row; bank-dependent forecasters get the row's bank index."""
    if not getattr(f, "requires_bank", False):
        return np.asarray(f.predict(ds.features), dtype=float).reshape(-1)
    out = np.empty(ds.n_rows)
    codes = ds.bank_index
    for s in range(ds.n_banks):
        rows = codes == s
        out[rows] = np.asarray(f.predict(ds.features[rows], s), dtype=float).reshape(-1)
    return out


@dataclass(frozen=True)
class RelativeDifferences:
    mean: float
    median: float
    per_row: np.ndarray
    n_used: int
    n_excluded: int


def relative_prediction_differences(
    ds: PanelDataset, fA: Any, fB: Any, floor: float = RELATIVE_DIFF_FLOOR
) -> RelativeDifferences:
    """``|(y_A - y_B) / y|`` per row; rows with ``|y| < floor`` are excluded and counted."""
    keep = np.abs(ds.response) >= floor
    if not keep.any():
        raise DataError("every row has a response below the relative-difference floor")
    diff = predict_rows(fA, ds) - predict_rows(fB, ds)
    rel = np.abs(diff[keep] / ds.response[keep])
    return RelativeDifferences(
        float(rel.mean()), float(np.median(rel)), rel, int(keep.sum()), int((~keep).sum())
    )


class LagMode(str, enum.Enum):
    ONE_QUARTER = "one_quarter"
    FOUR_QUARTER_AVERAGE = "four_quarter_average"


def lagged_response(ds: PanelDataset, lag_mode: LagMode | str) -> np.ndarray:
    """Lagged response per row (NaN when any needed period is missing)."""
    lag_mode = LagMode(lag_mode)
    depth = 1 if lag_mode is LagMode.ONE_QUARTER else 4
    keys = ds.bank_ids.tolist()
    if ds.category is not None:
        keys = [f"{c}\x00{b}" for c, b in zip(ds.category.tolist(), keys)]
    lookup = {(b, int(t)): y for b, t, y in zip(keys, ds.time, ds.response)}
    out = np.full(ds.n_rows, np.nan)
    for i, (b, t) in enumerate(zip(keys, ds.time)):
        vals = [lookup.get((b, int(t) - h)) for h in range(1, depth + 1)]
        if all(v is not None for v in vals):
            out[i] = float(np.mean(vals))
    return out


def ar_panel_fit(
    ds: PanelDataset,
    lag_mode: LagMode | str = LagMode.ONE_QUARTER,
    mode: PanelMode | str = PanelMode.POOLED,
) -> RegressionFit:
    """Regress the response on its own lag (or 4-quarter lag average) plus features.

    Rows whose lag cannot be formed are dropped; their count is stored in
    ``fit.meta["n_dropped"]``.
    """
    mode = PanelMode(mode)
    lag = lagged_response(ds, lag_mode)
    keep = np.isfinite(lag)
    if not keep.any():
        raise DataError("no rows left after constructing the lagged response")
    sub = ds.subset(keep)
    fe = mode is PanelMode.FIXED_EFFECTS
    if fe and sub.n_banks < 2:
        raise DataError("fixed effects need at least 2 banks")
    X, labels = _design(sub, fe, [("lag_response", lag[keep])])
    fit = weighted_least_squares(X, sub.response, sub.weights, labels)
    fit.meta["n_dropped"] = int((~keep).sum())
    return fit
