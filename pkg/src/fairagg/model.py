"""Bank models, populations of banks, population moments and linear forecasters.

A bank ``s`` follows ``Y_s = alpha_s + beta_s' X_s + eps_s`` with
``E[X_s] = mu_s`` and ``var[X_s] = Sigma_s``.  A :class:`BankPopulation`
attaches selection probabilities ``p_s`` to a list of banks; the random bank
``S`` drawn with these probabilities turns the collection into a mixture,
which is the object every population estimator consumes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import (
    BankIdentityError,
    DimensionError,
    NotPositiveDefiniteError,
)

PD_PIVOT_TOL = 1e-10
WEIGHT_SUM_TOL = 1e-12


def _frozen(a: Any, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=float, ndmin=ndim)
    arr.setflags(write=False)
    return arr


def check_positive_definite(cov: np.ndarray, bank: int | None = None) -> np.ndarray:
    """Return the Cholesky factor of ``cov`` or raise if it is not PD.

    A factorization that succeeds with a pivot below ``1e-10`` times the
    largest diagonal entry is treated as singular.
    """
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise NotPositiveDefiniteError("covariance matrix is not symmetric", bank=bank)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(
            f"covariance matrix of bank {bank} is not positive definite", bank=bank
        ) from None
    pivots = np.diag(chol) ** 2
    if pivots.min() <= PD_PIVOT_TOL * max(np.diag(cov).max(), 1e-300):
        raise NotPositiveDefiniteError(
            f"covariance matrix of bank {bank} is numerically singular "
            f"(smallest pivot {pivots.min():.3g})",
            bank=bank,
        )
    return chol


@dataclass(frozen=True)
class BankModel:
    """True linear loss model of one bank.

    Attributes
    ----------
    intercept : float
        ``alpha_s``, in loss-rate units.
    slope : ndarray, shape (d,)
        ``beta_s``.
    feature_mean : ndarray, shape (d,)
        ``mu_s``.
    feature_cov : ndarray, shape (d, d)
        ``Sigma_s``; must be symmetric positive definite.
    noise_var : float
        Variance of the error term.
    """

    intercept: float
    slope: np.ndarray
    feature_mean: np.ndarray
    feature_cov: np.ndarray
    noise_var: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "slope", _frozen(self.slope, 1).ravel())
        object.__setattr__(self, "feature_mean", _frozen(self.feature_mean, 1).ravel())
        cov = _frozen(self.feature_cov, 2)
        object.__setattr__(self, "feature_cov", cov)
        object.__setattr__(self, "noise_var", float(self.noise_var))
        d = self.slope.shape[0]
        if self.feature_mean.shape != (d,) or cov.shape != (d, d):
            raise DimensionError(
                f"slope has length {d} but feature_mean has shape "
                f"{self.feature_mean.shape} and feature_cov {cov.shape}"
            )
        if not np.isfinite(self.noise_var) or self.noise_var < 0:
            raise ValueError(f"noise_var must be a nonnegative number, got {self.noise_var}")
        check_positive_definite(cov)

    @classmethod
    def scalar(
        cls, intercept: float, slope: float, mean: float, var: float, noise_var: float = 0.0
    ) -> "BankModel":
        """Single-feature bank with feature variance ``var``."""
        return cls(intercept, [slope], [mean], [[var]], noise_var)

    @property
    def dim(self) -> int:
        return self.slope.shape[0]

    @property
    def mean_loss(self) -> float:
        """``E[Y_s] = alpha_s + beta_s' mu_s``."""
        return self.intercept + float(self.slope @ self.feature_mean)

    def replace(self, **changes: Any) -> "BankModel":
        values = dict(
            intercept=self.intercept,
            slope=self.slope,
            feature_mean=self.feature_mean,
            feature_cov=self.feature_cov,
            noise_var=self.noise_var,
        )
        values.update(changes)
        return BankModel(**values)

    def to_dict(self) -> dict:
        return {
            "intercept": self.intercept,
            "slope": self.slope.tolist(),
            "feature_mean": self.feature_mean.tolist(),
            "feature_cov": self.feature_cov.tolist(),
            "noise_var": self.noise_var,
        }


@dataclass(frozen=True)
class BankPopulation:
    """Banks together with selection probabilities ``p_s``."""

    banks: tuple[BankModel, ...]
    weights: np.ndarray

    def __post_init__(self) -> None:
        banks = tuple(self.banks)
        object.__setattr__(self, "banks", banks)
        w = _frozen(self.weights, 1).ravel()
        object.__setattr__(self, "weights", w)
        if len(banks) < 2:
            raise ValueError(f"a population needs at least 2 banks, got {len(banks)}")
        if w.shape != (len(banks),):
            raise DimensionError(f"{len(banks)} banks but {w.shape[0]} weights")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("bank weights must be strictly positive")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"bank weights must sum to 1, got {w.sum()!r}")
        d = banks[0].dim
        for s, b in enumerate(banks):
            if b.dim != d:
                raise DimensionError(
                    f"bank {s} has feature dimension {b.dim}, expected {d}", bank=s
                )

    @classmethod
    def equal_weights(cls, banks: Sequence[BankModel]) -> "BankPopulation":
        n = len(banks)
        return cls(tuple(banks), np.full(n, 1.0 / n))

    @classmethod
    def from_arrays(
        cls,
        weights: Sequence[float],
        intercepts: Sequence[float],
        slopes: Any,
        means: Any,
        covs: Any,
        noise_vars: Sequence[float] | None = None,
    ) -> "BankPopulation":
        """Build a population from stacked per-bank arrays.

        Scalar-feature populations may pass 1-D ``slopes``/``means`` and
        ``covs`` holding the feature variances.
        """
        n = len(intercepts)
        slopes = np.asarray(slopes, dtype=float).reshape(n, -1)
        means = np.asarray(means, dtype=float).reshape(n, -1)
        d = slopes.shape[1]
        covs = np.asarray(covs, dtype=float).reshape(n, d, d)
        noise = np.zeros(n) if noise_vars is None else np.asarray(noise_vars, float)
        banks = tuple(
            BankModel(intercepts[s], slopes[s], means[s], covs[s], noise[s]) for s in range(n)
        )
        return cls(banks, np.asarray(weights, dtype=float))

    @classmethod
    def from_dict(cls, data: dict) -> "BankPopulation":
        banks = tuple(BankModel(**b) for b in data["banks"])
        weights = data.get("weights")
        if weights is None:
            return cls.equal_weights(banks)
        return cls(banks, np.asarray(weights, dtype=float))

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "banks": [b.to_dict() for b in self.banks]}

    @property
    def n_banks(self) -> int:
        return len(self.banks)

    @property
    def dim(self) -> int:
        return self.banks[0].dim

    @property
    def intercepts(self) -> np.ndarray:
        return np.array([b.intercept for b in self.banks])

    @property
    def slopes(self) -> np.ndarray:
        """Stacked ``beta_s``, shape (S, d)."""
        return np.array([b.slope for b in self.banks])

    @property
    def means(self) -> np.ndarray:
        return np.array([b.feature_mean for b in self.banks])

    @property
    def covs(self) -> np.ndarray:
        return np.array([b.feature_cov for b in self.banks])

    @property
    def noise_vars(self) -> np.ndarray:
        return np.array([b.noise_var for b in self.banks])

    @property
    def bank_mean_losses(self) -> np.ndarray:
        """``E[Y_s]`` for every bank."""
        return self.intercepts + np.einsum("sd,sd->s", self.slopes, self.means)

    def check_bank(self, bank: int) -> int:
        if not 0 <= bank < self.n_banks:
            raise BankIdentityError(f"bank index {bank} out of range 0..{self.n_banks - 1}")
        return int(bank)

    def permuted(self, order: Sequence[int]) -> "BankPopulation":
        order = list(order)
        return BankPopulation(tuple(self.banks[i] for i in order), self.weights[order])

    def with_bank(self, s: int, bank: BankModel) -> "BankPopulation":
        banks = list(self.banks)
        banks[s] = bank
        return BankPopulation(tuple(banks), self.weights)


@dataclass(frozen=True)
class PopulationMoments:
    """Moments of the bank mixture ``(X_S, Y_S)``."""

    bar_mu: np.ndarray
    var_X: np.ndarray
    cov_alpha_mu: np.ndarray
    mean_loss: float
    within_cov: np.ndarray

    @property
    def between_cov(self) -> np.ndarray:
        """``var[mu_S]``, the part of ``var_X`` due to differing bank means."""
        return self.var_X - self.within_cov


def population_moments(pop: BankPopulation) -> PopulationMoments:
    """Mixture moments ``mu_bar``, ``var[X_S]``, ``cov[alpha_S, mu_S]``, ``E[Y_S]``, ``E[Sigma_S]``.

    ``var[X_S]`` is assembled as ``sum_s p_s W_s`` with
    ``W_s = Sigma_s + mu_s mu_s' - mu_bar mu_s'``.
    """
    p = pop.weights
    mus = pop.means
    bar_mu = p @ mus
    W = pop.covs + np.einsum("si,sj->sij", mus, mus) - np.einsum("i,sj->sij", bar_mu, mus)
    var_X = np.einsum("s,sij->ij", p, W)
    var_X = 0.5 * (var_X + var_X.T)
    within = np.einsum("s,sij->ij", p, pop.covs)
    cov_alpha_mu = (p * pop.intercepts) @ (mus - bar_mu)
    return PopulationMoments(
        bar_mu=bar_mu,
        var_X=var_X,
        cov_alpha_mu=cov_alpha_mu,
        mean_loss=float(p @ pop.bank_mean_losses),
        within_cov=within,
    )


def mixture_sample_mean_loss(pop: BankPopulation) -> float:
    """``E[Y_S] = sum_s p_s (alpha_s + beta_s' mu_s)``."""
    return float(pop.weights @ pop.bank_mean_losses)


def population_mse(pop: BankPopulation, intercept: float, slope: Any) -> float:
    """Closed-form ``E[(a + b'X_S - Y_S)^2]`` for an equal-treatment linear rule.

    For each bank the error ``a - alpha_s + (b - beta_s)' X_s - eps_s`` has mean
    ``a - alpha_s + (b - beta_s)' mu_s`` and variance
    ``(b - beta_s)' Sigma_s (b - beta_s) + var[eps_s]``.
    """
    b = np.asarray(slope, dtype=float).reshape(pop.dim)
    diff = b - pop.slopes
    bias = intercept - pop.intercepts + np.einsum("sd,sd->s", diff, pop.means)
    spread = np.einsum("si,sij,sj->s", diff, pop.covs, diff)
    return float(pop.weights @ (bias**2 + spread + pop.noise_vars))


class ForecasterKind(str, enum.Enum):
    POOLED = "pooled"
    FEO = "feo"
    SEO = "seo"
    PTF = "ptf"
    WATE = "wate"
    COND_EXP = "cond_exp"

    @property
    def equal_treatment(self) -> bool:
        """Whether forecasts of this kind never depend on bank identity."""
        return self in (ForecasterKind.POOLED, ForecasterKind.FEO, ForecasterKind.WATE,
                        ForecasterKind.COND_EXP)


def _as_rows(x: Any, d: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if d == 1 and arr.ndim == 1 and arr.shape[0] != 1:
        return arr.reshape(-1, 1), False
    if arr.ndim == 1:
        if arr.shape[0] != d:
            raise DimensionError(f"feature vector has length {arr.shape[0]}, expected {d}")
        return arr.reshape(1, d), True
    if arr.shape[1] != d:
        raise DimensionError(f"feature matrix has {arr.shape[1]} columns, expected {d}")
    return arr, False


@dataclass(frozen=True)
class LinearForecaster:
    """Fitted industry model ``intercept + slope' x`` plus optional per-bank terms.

    ``bank_means``/``bar_mu`` are set for SEO forecasters, which evaluate
    ``intercept + slope'(x - mu_s + mu_bar)``.  ``delta``/``centering`` hold
    the discarded fixed effects of an FEO fit so that the full fixed-effects
    projection can still be evaluated with :meth:`predict_with_effects`.
    """

    kind: ForecasterKind
    intercept: float
    slope: np.ndarray
    n_banks: int | None = None
    bank_means: np.ndarray | None = None
    bar_mu: np.ndarray | None = None
    delta: np.ndarray | None = None
    centering: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ForecasterKind(self.kind))
        object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "slope", _frozen(self.slope, 1).ravel())
        if self.kind is ForecasterKind.SEO and (self.bank_means is None or self.bar_mu is None):
            raise ValueError("an SEO forecaster needs bank_means and bar_mu")

    @property
    def dim(self) -> int:
        return self.slope.shape[0]

    @property
    def requires_bank(self) -> bool:
        return not self.kind.equal_treatment

    def _check_bank(self, bank: int | None) -> None:
        if bank is None:
            if self.requires_bank:
                raise BankIdentityError(f"{self.kind.value} forecasts need a bank index")
            return
        if self.n_banks is not None and not 0 <= bank < self.n_banks:
            raise BankIdentityError(f"bank index {bank} out of range 0..{self.n_banks - 1}")

    def predict(self, x: Any, bank: int | None = None) -> Any:
        self._check_bank(bank)
        rows, single = _as_rows(x, self.dim)
        if self.kind is ForecasterKind.SEO:
            rows = rows - self.bank_means[bank] + self.bar_mu
        out = self.intercept + rows @ self.slope
        return float(out[0]) if single or np.ndim(x) == 0 else out

    def predict_with_effects(self, x: Any, bank: int) -> Any:
        """Evaluate ``intercept + delta' U(bank) + slope' x`` (fixed effects kept)."""
        if self.delta is None or self.centering is None:
            raise BankIdentityError("forecaster carries no fixed effects")
        n = self.centering.shape[0]
        if not 0 <= bank < n:
            raise BankIdentityError(f"bank index {bank} out of range 0..{n - 1}")
        u = -self.centering[:-1].copy()
        if bank < n - 1:
            u[bank] += 1.0
        base = self.predict(x, None if self.requires_bank else bank)
        return base + float(self.delta @ u)


def forecast(f: Any, x: Any, bank: int | None = None) -> Any:
    """Evaluate any fitted forecaster at ``x`` for an optional bank index.

    Equal-treatment kinds (Pooled, FEO, WATE, conditional expectation) accept
    but ignore the bank; SEO and PTF raise :class:`BankIdentityError` without one.
    """
    return f.predict(x, bank)
