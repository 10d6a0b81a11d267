"""Closed-form aggregation of a bank population into industry models.

Every function here works on population quantities (means, covariances,
selection probabilities), never on data.  The sample counterparts live in
:mod:`fairagg.sample`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .errors import (
    BankIdentityError,
    DimensionError,
    HypothesisViolation,
    SingularMatrixError,
)
from .model import (
    BankPopulation,
    ForecasterKind,
    LinearForecaster,
    _as_rows,
    population_moments,
)

SINGULAR_COND = 1e12
PROPORTIONAL_TOL = 1e-9
BLOCK_ORTHOGONALITY_TOL = 1e-10


def _solve(A: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > SINGULAR_COND:
        raise SingularMatrixError(f"{what} is singular", condition=float(cond))
    return np.linalg.solve(A, b)


def sym_sqrt(cov: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Symmetric square root of a PD matrix (or of its inverse)."""
    vals, vecs = np.linalg.eigh(cov)
    power = -0.5 if inverse else 0.5
    return (vecs * vals**power) @ vecs.T


def fit_pooled(pop: BankPopulation) -> LinearForecaster:
    """MSE-optimal equal-treatment linear model.

    ``beta = E[W_S]^{-1} (cov[alpha_S, mu_S] + E[W_S beta_S])`` and the
    intercept matches the mixture mean loss.
    """
    m = population_moments(pop)
    p = pop.weights
    mus = pop.means
    W = pop.covs + np.einsum("si,sj->sij", mus, mus) - np.einsum("i,sj->sij", m.bar_mu, mus)
    rhs = m.cov_alpha_mu + np.einsum("s,sij,sj->i", p, W, pop.slopes)
    slope = _solve(m.var_X, rhs, "var[X_S]")
    return LinearForecaster(
        ForecasterKind.POOLED, m.mean_loss - slope @ m.bar_mu, slope, n_banks=pop.n_banks
    )


def _beta_feo(pop: BankPopulation, within: np.ndarray) -> np.ndarray:
    rhs = np.einsum("s,sij,sj->i", pop.weights, pop.covs, pop.slopes)
    return _solve(within, rhs, "E[Sigma_S]")


def fit_feo(pop: BankPopulation) -> LinearForecaster:
    """Fixed-effects fit with the centered bank dummies discarded.

    ``beta_F = E[Sigma_S]^{-1} E[Sigma_S beta_S]``; for a scalar feature this
    is the ``p_s sigma_s^2``-weighted average of the bank slopes.
    """
    m = population_moments(pop)
    slope = _beta_feo(pop, m.within_cov)
    losses = pop.bank_mean_losses
    delta = (losses[:-1] - losses[-1]) - (pop.means[:-1] - pop.means[-1]) @ slope
    return LinearForecaster(
        ForecasterKind.FEO,
        m.mean_loss - slope @ m.bar_mu,
        slope,
        n_banks=pop.n_banks,
        delta=delta,
        centering=pop.weights,
    )


@dataclass(frozen=True)
class FeoDecomposition:
    """Pooled slope split into the FEO slope and the misdirection term.

    ``beta_pool = beta_f + lambda_ @ delta``.  ``delta`` and the columns of
    ``lambda_`` are ordered as ``other_banks`` (all banks except the
    reference bank, whose dummy is omitted).
    """

    beta_f: np.ndarray
    delta: np.ndarray
    lambda_: np.ndarray
    beta_pool: np.ndarray
    reference_bank: int
    other_banks: tuple[int, ...]
    bank_weights: np.ndarray

    @property
    def misdirection(self) -> np.ndarray:
        """``Lambda delta``, the part of the pooled slope driven by bank identity."""
        return self.lambda_ @ self.delta

    def identity_residual(self) -> np.ndarray:
        return self.beta_pool - self.beta_f - self.misdirection

    def dummy_effect(self, bank: int) -> float:
        """``delta' U(bank)`` using population-centered dummies."""
        return float(self.delta @ self.dummy_vector(bank))

    def dummy_vector(self, bank: int) -> np.ndarray:
        return centered_dummy_vector(self.bank_weights, bank, self.reference_bank)


def centered_dummy_vector(
    weights: np.ndarray, bank: int, reference_bank: int | None = None
) -> np.ndarray:
    """``U(s)`` with components ``1{s=i} - p_i`` for every non-reference bank ``i``."""
    n = len(weights)
    ref = n - 1 if reference_bank is None else reference_bank % n
    others = [i for i in range(n) if i != ref]
    return np.array([(1.0 if bank == i else 0.0) - weights[i] for i in others])


def feo_decomposition(pop: BankPopulation, reference_bank: int = -1) -> FeoDecomposition:
    """Decompose ``beta_Pool = beta_F + Lambda delta``.

    ``delta_s = (alpha_s + beta_s' mu_s) - (alpha_r + beta_r' mu_r) - beta_F'(mu_s - mu_r)``
    for the reference bank ``r`` (last bank by default), and
    ``Lambda = var[X_S]^{-1} cov[X_S, U(S)]`` with ``cov[X_S, U_i] = p_i (mu_i - mu_bar)``.
    ``beta_F`` does not depend on the reference bank; ``delta`` does.
    """
    n = pop.n_banks
    ref = reference_bank % n
    others = tuple(i for i in range(n) if i != ref)
    m = population_moments(pop)
    beta_f = _beta_feo(pop, m.within_cov)
    mus = pop.means
    losses = pop.bank_mean_losses
    idx = list(others)
    delta = (losses[idx] - losses[ref]) - (mus[idx] - mus[ref]) @ beta_f
    cov_xu = (pop.weights[idx] * (mus[idx] - m.bar_mu).T).reshape(pop.dim, len(idx))
    lam = _solve(m.var_X, cov_xu, "var[X_S]")
    beta_pool = fit_pooled(pop).slope
    return FeoDecomposition(beta_f, delta, lam, beta_pool, ref, others, pop.weights)


def fit_seo(pop: BankPopulation) -> LinearForecaster:
    """Mean-adjusted FEO forecast ``alpha_F + beta_F'(x - mu_s + mu_bar)``."""
    feo = fit_feo(pop)
    m = population_moments(pop)
    return LinearForecaster(
        ForecasterKind.SEO,
        feo.intercept,
        feo.slope,
        n_banks=pop.n_banks,
        bank_means=pop.means,
        bar_mu=m.bar_mu,
    )


@dataclass(frozen=True)
class PtfForecaster:
    """Projection to fairness for Gaussian features.

    Bank ``s`` with features ``x`` is mapped to
    ``bar_alpha_o + (sum_i p_i |beta_i_o|) * beta_s_o' z_s / |beta_s_o|`` with
    ``z_s = Sigma_s^{-1/2}(x - mu_s)``.  When all standardized slopes point in
    the same direction (``proportional``) this is ``bar_alpha_o + bar_beta_o' z_s``.
    """

    weights: np.ndarray
    alpha_o: np.ndarray
    beta_o: np.ndarray
    inv_sqrt_cov: np.ndarray
    means: np.ndarray
    proportional: bool

    kind = ForecasterKind.PTF
    requires_bank = True

    @property
    def n_banks(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.beta_o.shape[1]

    @property
    def bar_alpha_o(self) -> float:
        return float(self.weights @ self.alpha_o)

    @property
    def bar_beta_o(self) -> np.ndarray:
        return self.weights @ self.beta_o

    @property
    def mean_norm(self) -> float:
        return float(self.weights @ np.linalg.norm(self.beta_o, axis=1))

    def _z(self, x: Any, bank: int | None) -> tuple[np.ndarray, bool]:
        if bank is None:
            raise BankIdentityError("PTF forecasts need a bank index")
        if not 0 <= bank < self.n_banks:
            raise BankIdentityError(f"bank index {bank} out of range 0..{self.n_banks - 1}")
        rows, single = _as_rows(x, self.dim)
        return (rows - self.means[bank]) @ self.inv_sqrt_cov[bank], single or np.ndim(x) == 0

    def predict(self, x: Any, bank: int | None = None) -> Any:
        if self.proportional:
            return self.standardized_forecast(x, bank)
        z, single = self._z(x, bank)
        b = self.beta_o[bank]
        out = self.bar_alpha_o + self.mean_norm * (z @ b) / np.linalg.norm(b)
        return float(out[0]) if single else out

    def standardized_forecast(self, x: Any, bank: int | None = None) -> Any:
        """``bar_alpha_o + bar_beta_o' z_s``; the PTF only when ``proportional``."""
        z, single = self._z(x, bank)
        out = self.bar_alpha_o + z @ self.bar_beta_o
        return float(out[0]) if single else out


def _pairwise_proportional(vectors: np.ndarray, tol: float = PROPORTIONAL_TOL) -> bool:
    unit = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
    cos = unit @ unit.T
    return bool(np.all(cos >= 1.0 - tol))


def fit_ptf(pop: BankPopulation, gaussian: bool = True) -> PtfForecaster:
    """Projection to fairness under Gaussian features.

    Raises
    ------
    HypothesisViolation
        If the caller does not declare Gaussian features, or if some bank has
        a zero standardized slope (the closed form is then undefined).
    """
    if not gaussian:
        raise HypothesisViolation("the PTF closed form is only available for Gaussian features")
    inv_sqrt = np.array([sym_sqrt(c, inverse=True) for c in pop.covs])
    beta_o = np.array([sym_sqrt(c) @ b for c, b in zip(pop.covs, pop.slopes)])
    norms = np.linalg.norm(beta_o, axis=1)
    zero = np.flatnonzero(norms <= 1e-14 * max(1.0, norms.max()))
    if zero.size:
        raise HypothesisViolation(
            f"bank(s) {zero.tolist()} have a zero slope; PTF needs |beta_s| > 0 for all banks"
        )
    return PtfForecaster(
        weights=pop.weights,
        alpha_o=pop.bank_mean_losses,
        beta_o=beta_o,
        inv_sqrt_cov=inv_sqrt,
        means=pop.means,
        proportional=_pairwise_proportional(beta_o),
    )


def _log_densities(pop: BankPopulation, rows: np.ndarray) -> np.ndarray:
    """Gaussian log densities, shape (n_rows, n_banks)."""
    out = np.empty((rows.shape[0], pop.n_banks))
    d = pop.dim
    for s, b in enumerate(pop.banks):
        chol = np.linalg.cholesky(b.feature_cov)
        z = np.linalg.solve(chol, (rows - b.feature_mean).T)
        out[:, s] = (
            -0.5 * np.sum(z**2, axis=0)
            - np.log(np.diag(chol)).sum()
            - 0.5 * d * np.log(2 * np.pi)
        )
    return out


@dataclass(frozen=True)
class ConditionalExpectationForecaster:
    """``E[Y_S | X_S = x]`` under Gaussian feature densities (equal treatment)."""

    population: BankPopulation

    kind = ForecasterKind.COND_EXP
    requires_bank = False

    def predict(self, x: Any, bank: int | None = None) -> Any:
        pop = self.population
        if bank is not None:
            pop.check_bank(bank)
        rows, single = _as_rows(x, pop.dim)
        if not np.all(np.isfinite(rows)):
            raise ValueError("conditional expectation needs finite features")
        logw = _log_densities(pop, rows) + np.log(pop.weights)
        top = logw.max(axis=1, keepdims=True)
        if not np.all(np.isfinite(top)):
            raise ArithmeticError(
                "all bank densities underflow even on the log scale at the requested point"
            )
        w = np.exp(logw - top)
        w /= w.sum(axis=1, keepdims=True)
        local = pop.intercepts + rows @ pop.slopes.T
        out = np.sum(w * local, axis=1)
        return float(out[0]) if single or np.ndim(x) == 0 else out

    def posterior(self, x: Any) -> np.ndarray:
        """Bank probabilities ``P(S = s | X_S = x)``."""
        rows, _ = _as_rows(x, self.population.dim)
        logw = _log_densities(self.population, rows) + np.log(self.population.weights)
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        return w / w.sum(axis=1, keepdims=True)


def fit_conditional_expectation(pop: BankPopulation) -> ConditionalExpectationForecaster:
    return ConditionalExpectationForecaster(pop)


def conditional_expectation_forecast(pop: BankPopulation, x: Any) -> Any:
    """Bayes-weighted average of the bank models at ``x``.

    Weights ``p_s g_s(x)`` are normalized on the log scale (max shift), so
    points far in the tails do not underflow.
    """
    return ConditionalExpectationForecaster(pop).predict(x)


def fit_wate(pop: BankPopulation, combo_weights: Sequence[float] | None = None) -> LinearForecaster:
    """Convex combination of bank slopes with a zero-mean-error intercept.

    With the default weights ``p_s`` this is the average treatment effect.
    """
    if combo_weights is None:
        w = pop.weights
    else:
        w = np.asarray(combo_weights, dtype=float).ravel()
        if w.shape != (pop.n_banks,):
            raise DimensionError(f"need {pop.n_banks} combination weights, got {w.shape[0]}")
        if np.any(w < 0) or not np.isfinite(w).all() or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("combination weights must be nonnegative and sum to 1")
    m = population_moments(pop)
    slope = w @ pop.slopes
    return LinearForecaster(
        ForecasterKind.WATE, m.mean_loss - slope @ m.bar_mu, slope, n_banks=pop.n_banks
    )


@dataclass(frozen=True)
class InteractionPopulation:
    """Population whose features split into a block without and a block with bank interactions.

    The first ``n_x`` features form the ``X`` block; the remaining ones form
    the ``V`` block (slopes ``gamma_s``, means ``nu_s``).  Within every bank
    the two blocks must be uncorrelated.
    """

    population: BankPopulation
    n_x: int

    def __post_init__(self) -> None:
        d = self.population.dim
        if not 0 <= self.n_x <= d:
            raise DimensionError(f"n_x={self.n_x} outside 0..{d}")
        for s, c in enumerate(self.population.covs):
            cross = c[: self.n_x, self.n_x :]
            if cross.size and np.abs(cross).max() > BLOCK_ORTHOGONALITY_TOL:
                raise HypothesisViolation(
                    f"bank {s}: X and V blocks are correlated (max |cov| {np.abs(cross).max():.3g})"
                )

    @property
    def gammas(self) -> np.ndarray:
        return self.population.slopes[:, self.n_x :]

    @property
    def nus(self) -> np.ndarray:
        return self.population.means[:, self.n_x :]


def fit_feo_with_interactions(ipop: InteractionPopulation) -> tuple[np.ndarray, np.ndarray]:
    """FEO with bank x ``V`` interactions.

    Returns ``(beta_f, gamma_f)``: the usual FEO slope computed from the
    ``X`` block alone, and the plain probability-weighted average of the
    ``V`` slopes.  With every feature in ``V`` this is the average treatment
    effect.
    """
    pop = ipop.population
    k = ipop.n_x
    if k:
        covs = pop.covs[:, :k, :k]
        within = np.einsum("s,sij->ij", pop.weights, covs)
        rhs = np.einsum("s,sij,sj->i", pop.weights, covs, pop.slopes[:, :k])
        beta_f = _solve(within, rhs, "E[Sigma_S^X]")
    else:
        beta_f = np.zeros(0)
    gamma_f = pop.weights @ ipop.gammas
    return beta_f, gamma_f
