"""Fairness and externality diagnostics on bank populations.

Per-bank bias of each aggregation method, derivatives of forecasts and
biases with respect to one bank's parameters (with sign classification),
misdirection covariances, demographic-parity statistics and the implicit
weights that pooled and FEO slopes put on the bank slopes.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import stats

from .errors import DimensionError, HypothesisViolation
from .model import BankPopulation, ForecasterKind, population_moments, population_mse
from .population import (
    ConditionalExpectationForecaster,
    feo_decomposition,
    fit_feo,
    fit_pooled,
    fit_ptf,
    fit_seo,
    fit_wate,
    sym_sqrt,
)

GH_NODES = 64
MC_DRAWS = 1_000_000


@dataclass(frozen=True)
class BiasReport:
    """``per_bank[s] = E[Y_hat_s - Y_s]`` and its ``p``-weighted sum.

    ``se`` is set only for Monte Carlo evaluations.
    """

    per_bank: np.ndarray
    weighted_sum: float
    method: ForecasterKind
    se: np.ndarray | None = None


def _kind(method: Any) -> ForecasterKind:
    return ForecasterKind(method.value if isinstance(method, ForecasterKind) else str(method).lower())


def population_bias(
    pop: BankPopulation, method: ForecasterKind | str, gaussian: bool = True, seed: int = 0
) -> BiasReport:
    """Expected forecast error per bank.

    Linear equal-treatment methods: ``E[Y_S] - E[Y_s] + beta'(mu_s - mu_bar)``.
    SEO and PTF: ``E[Y_S] - E[Y_s]``.  Conditional expectation: Gauss-Hermite
    quadrature (64 nodes) for one feature, Monte Carlo with ``10^6`` draws per
    bank otherwise.
    """
    kind = _kind(method)
    m = population_moments(pop)
    losses = pop.bank_mean_losses
    se = None
    if kind in (ForecasterKind.POOLED, ForecasterKind.FEO, ForecasterKind.WATE):
        fit = {ForecasterKind.POOLED: fit_pooled, ForecasterKind.FEO: fit_feo,
               ForecasterKind.WATE: fit_wate}[kind]
        beta = fit(pop).slope
        per = m.mean_loss - losses + (pop.means - m.bar_mu) @ beta
    elif kind is ForecasterKind.SEO:
        fit_seo(pop)
        per = m.mean_loss - losses
    elif kind is ForecasterKind.PTF:
        fit_ptf(pop, gaussian=gaussian)
        per = m.mean_loss - losses
    else:
        if not gaussian:
            raise HypothesisViolation("the conditional expectation needs Gaussian feature densities")
        f = ConditionalExpectationForecaster(pop)
        if pop.dim == 1:
            t, wts = np.polynomial.hermite.hermgauss(GH_NODES)
            means = np.array([
                wts @ f.predict(b.feature_mean[0] + np.sqrt(2 * b.feature_cov[0, 0]) * t)
                for b in pop.banks
            ]) / np.sqrt(np.pi)
        else:
            from .simulation import bank_stream

            means, ses = [], []
            for s, b in enumerate(pop.banks):
                z = bank_stream(seed, 0, s).standard_normal((MC_DRAWS, pop.dim))
                vals = f.predict(b.feature_mean + z @ sym_sqrt(b.feature_cov))
                means.append(vals.mean())
                ses.append(vals.std(ddof=1) / np.sqrt(MC_DRAWS))
            means, se = np.array(means), np.array(ses)
        per = means - losses
    return BiasReport(per, float(pop.weights @ per), kind, se)


@dataclass(frozen=True)
class PointForecast:
    """Forecast at feature value ``x`` (identical for all banks)."""

    x: float


@dataclass(frozen=True)
class MeanForecast:
    """Expected forecast for bank ``l``, i.e. the forecast at ``mu_l``."""

    bank: int


@dataclass(frozen=True)
class Bias:
    """Expected forecast error for bank ``l``."""

    bank: int


class Parameter(str, enum.Enum):
    MU = "mu"
    ALPHA = "alpha"
    BETA = "beta"


class SignRule(str, enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    NOT_IMPLIED = "condition not met"
    NO_SIMPLE_RULE = "no simple rule"

    @property
    def sign(self) -> int | None:
        return {SignRule.POSITIVE: 1, SignRule.NEGATIVE: -1}.get(self)


@dataclass(frozen=True)
class SensitivityReport:
    method: ForecasterKind
    parameter: Parameter
    bank: int
    target: Any
    value: float
    sign_rule: SignRule

    @property
    def rule_holds(self) -> bool | None:
        """Whether the derivative has the sign the rule predicts (None without a prediction)."""
        s = self.sign_rule.sign
        return None if s is None else bool(np.sign(self.value) == s)


def _scalar(pop: BankPopulation) -> tuple[np.ndarray, ...]:
    if pop.dim != 1:
        raise DimensionError(f"sensitivities need a scalar feature, got d={pop.dim}")
    return (pop.weights, pop.intercepts, pop.slopes[:, 0], pop.means[:, 0], pop.covs[:, 0, 0])


def _check_method(method: Any) -> ForecasterKind:
    kind = _kind(method)
    if kind not in (ForecasterKind.FEO, ForecasterKind.POOLED):
        raise ValueError(f"sensitivities are defined for FEO and pooled models, not {kind.value}")
    return kind


def slope_derivative(pop: BankPopulation, method: Any, parameter: Any, bank: int) -> float:
    """``d beta / d theta_s`` for the FEO or pooled slope (scalar feature)."""
    kind = _check_method(method)
    par = Parameter(parameter)
    p, a, b, mu, v = _scalar(pop)
    s = pop.check_bank(bank)
    if kind is ForecasterKind.FEO:
        return float(p[s] * v[s] / (p @ v)) if par is Parameter.BETA else 0.0
    mbar = p @ mu
    D = p @ v + p @ (mu - mbar) ** 2
    beta = fit_pooled(pop).slope[0]
    if par is Parameter.ALPHA:
        return float(p[s] * (mu[s] - mbar) / D)
    if par is Parameter.BETA:
        return float(p[s] * (v[s] + mu[s] * (mu[s] - mbar)) / D)
    dN = p[s] * (a[s] - p @ a) + p[s] * (2 * mu[s] * b[s] - mbar * b[s] - p @ (mu * b))
    dD = 2 * p[s] * (mu[s] - mbar)
    return float((dN - beta * dD) / D)


def sensitivity_value(pop: BankPopulation, method: Any, parameter: Any, bank: int, target: Any) -> float:
    """Analytic derivative of ``target`` with respect to bank ``bank``'s parameter."""
    kind = _check_method(method)
    par = Parameter(parameter)
    p, a, b, mu, v = _scalar(pop)
    s = pop.check_bank(bank)
    beta = (fit_feo(pop) if kind is ForecasterKind.FEO else fit_pooled(pop)).slope[0]
    mbar = p @ mu
    dbeta = slope_derivative(pop, kind, par, s)
    d_mean_loss = {Parameter.MU: p[s] * b[s], Parameter.ALPHA: p[s], Parameter.BETA: p[s] * mu[s]}[par]
    d_mbar = p[s] if par is Parameter.MU else 0.0
    if isinstance(target, PointForecast):
        return float(d_mean_loss + dbeta * (target.x - mbar) - beta * d_mbar)
    if not isinstance(target, (MeanForecast, Bias)):
        raise TypeError(f"unknown sensitivity target {target!r}")
    l = pop.check_bank(target.bank)
    d_mu_l = 1.0 if (par is Parameter.MU and l == s) else 0.0
    value = d_mean_loss + dbeta * (mu[l] - mbar) + beta * (d_mu_l - d_mbar)
    if isinstance(target, Bias) and l == s:
        value -= {Parameter.MU: b[s], Parameter.ALPHA: 1.0, Parameter.BETA: mu[s]}[par]
    return float(value)


def target_value(pop: BankPopulation, method: Any, target: Any) -> float:
    """Evaluate a sensitivity target directly from a fresh fit (no derivative formulas)."""
    kind = _check_method(method)
    f = fit_feo(pop) if kind is ForecasterKind.FEO else fit_pooled(pop)
    if isinstance(target, PointForecast):
        return float(f.predict(target.x))
    bank = pop.banks[target.bank]
    mean = float(f.predict(bank.feature_mean))
    return mean - bank.mean_loss if isinstance(target, Bias) else mean


def _from_sign(x: float) -> SignRule:
    if x > 0:
        return SignRule.POSITIVE
    if x < 0:
        return SignRule.NEGATIVE
    return SignRule.NOT_IMPLIED


def sign_rule(
    pop: BankPopulation,
    method: Any,
    parameter: Any,
    bank: int,
    target: Any,
    literal: bool = False,
) -> SignRule:
    """Sign predicted by the sufficient conditions for a scalar population.

    The conditions assume nonnegative feature means and slopes; where a rule
    depends on that convention and it does not hold, ``NOT_IMPLIED`` is
    returned.  The FEO slope rule for another bank's mean forecast or bias is
    ``mu_s + mu_l > mu_bar``; that condition alone is not sufficient when bank
    ``s`` has an above-average feature variance, so by default it is
    tightened to also require ``mu_l >= mu_bar`` or ``sigma_s^2 <= E[sigma^2]``.
    ``literal=True`` applies the untightened condition.
    """
    kind = _check_method(method)
    par = Parameter(parameter)
    p, a, b, mu, v = _scalar(pop)
    s = pop.check_bank(bank)
    mbar = p @ mu
    conv = bool(np.all(mu >= 0) and np.all(b >= 0))
    feo = kind is ForecasterKind.FEO
    beta_f = fit_feo(pop).slope[0]
    W_s = v[s] + mu[s] * (mu[s] - mbar)

    if isinstance(target, PointForecast):
        x = target.x
        if feo:
            if par is Parameter.MU:
                return _from_sign(b[s] - beta_f)
            if par is Parameter.ALPHA:
                return SignRule.POSITIVE
            return SignRule.POSITIVE if conv and x > mbar else SignRule.NOT_IMPLIED
        if par is Parameter.MU:
            return SignRule.NO_SIMPLE_RULE
        if par is Parameter.ALPHA:
            return SignRule.POSITIVE if (mu[s] - mbar) * (x - mbar) > 0 else SignRule.NOT_IMPLIED
        return SignRule.POSITIVE if conv and W_s * (x - mbar) > 0 else SignRule.NOT_IMPLIED

    l = pop.check_bank(target.bank)
    is_bias = isinstance(target, Bias)
    same = l == s
    if feo:
        if par is Parameter.MU:
            if same:
                if is_bias:
                    return _from_sign(beta_f - b[s])
                return SignRule.POSITIVE if conv and (b[s] > 0 or beta_f > 0) else SignRule.NOT_IMPLIED
            return _from_sign(b[s] - beta_f)
        if par is Parameter.ALPHA:
            return SignRule.NEGATIVE if (is_bias and same) else SignRule.POSITIVE
        if same and is_bias:
            return SignRule.NEGATIVE if conv and mu[s] < mbar else SignRule.NOT_IMPLIED
        ok = conv and mu[s] + mu[l] > mbar
        if not literal:
            ok = ok and (mu[l] >= mbar or v[s] <= p @ v)
        return SignRule.POSITIVE if ok else SignRule.NOT_IMPLIED
    if par is Parameter.MU or (is_bias and same):
        return SignRule.NO_SIMPLE_RULE
    if par is Parameter.ALPHA:
        if same:
            return SignRule.POSITIVE
        return SignRule.POSITIVE if (mu[s] - mbar) * (mu[l] - mbar) > 0 else SignRule.NOT_IMPLIED
    return SignRule.POSITIVE if conv and W_s * (mu[l] - mbar) > 0 else SignRule.NOT_IMPLIED


def sensitivity(
    pop: BankPopulation, method: Any, parameter: Any, bank: int, target: Any, literal: bool = False
) -> SensitivityReport:
    """Derivative of a forecast or bias with respect to one bank's ``mu``, ``alpha`` or ``beta``.

    Examples
    --------
    >>> from fairagg.scenarios import SIM_A
    >>> sensitivity(SIM_A, "feo", "beta", 0, PointForecast(3.0)).value
    1.0
    """
    kind = _check_method(method)
    par = Parameter(parameter)
    return SensitivityReport(
        kind,
        par,
        bank,
        target,
        sensitivity_value(pop, kind, par, bank, target),
        sign_rule(pop, kind, par, bank, target, literal=literal),
    )


def perturbed(pop: BankPopulation, parameter: Any, bank: int, amount: float) -> BankPopulation:
    """Copy of ``pop`` with one scalar parameter of ``bank`` shifted by ``amount``."""
    par = Parameter(parameter)
    b = pop.banks[bank]
    if par is Parameter.MU:
        nb = b.replace(feature_mean=b.feature_mean + amount)
    elif par is Parameter.ALPHA:
        nb = b.replace(intercept=b.intercept + amount)
    else:
        nb = b.replace(slope=b.slope + amount)
    return pop.with_bank(bank, nb)


def finite_difference(
    pop: BankPopulation, method: Any, parameter: Any, bank: int, target: Any, rel_step: float = 1e-6
) -> float:
    """Central difference of :func:`target_value` with step ``rel_step * max(1, |theta|)``."""
    par = Parameter(parameter)
    b = pop.banks[bank]
    theta = {Parameter.MU: b.feature_mean[0], Parameter.ALPHA: b.intercept,
             Parameter.BETA: b.slope[0]}[par]
    h = rel_step * max(1.0, abs(theta))
    up = target_value(perturbed(pop, par, bank, h), method, target)
    dn = target_value(perturbed(pop, par, bank, -h), method, target)
    return (up - dn) / (2 * h)


@dataclass(frozen=True)
class MisdirectionReport:
    """Population MSEs of ``E[Y_S] + (beta_F + gamma)'(x - mu_bar)`` and of FEO,
    with the covariances between the slope deviation and bank identity."""

    mse_gamma: float
    mse_feo: float
    cov_i: float
    cov_ii: float

    @property
    def improves(self) -> bool:
        return self.mse_gamma < self.mse_feo

    @property
    def consistent(self) -> bool:
        """An MSE improvement must come with positive covariances."""
        return (not self.improves) or (self.cov_i > 0 and self.cov_ii > 0)


def misdirection_check(pop: BankPopulation, gamma: Any) -> MisdirectionReport:
    """``cov_i = gamma' var[X_S] Lambda delta``; ``cov_ii = sum_s p_s gamma'(mu_s - mu_bar) delta'U(s)``."""
    g = np.asarray(gamma, dtype=float).reshape(pop.dim)
    m = population_moments(pop)
    dec = feo_decomposition(pop)
    b_feo = dec.beta_f
    b = b_feo + g
    mse_feo = population_mse(pop, m.mean_loss - b_feo @ m.bar_mu, b_feo)
    mse_g = population_mse(pop, m.mean_loss - b @ m.bar_mu, b)
    cov_i = float(g @ m.var_X @ dec.lambda_ @ dec.delta)
    effects = np.array([dec.dummy_effect(s) for s in range(pop.n_banks)])
    cov_ii = float(pop.weights @ (((pop.means - m.bar_mu) @ g) * effects))
    return MisdirectionReport(mse_g, mse_feo, cov_i, cov_ii)


@dataclass(frozen=True)
class ParityReport:
    """Forecast distribution by bank.

    ``weak_dp_cov[i] = cov(Y_hat, U_i)`` for the centered dummy of every
    non-reference bank, with Monte Carlo standard errors ``weak_dp_se``.
    """

    means: np.ndarray
    variances: np.ndarray
    max_ks: float
    ks: dict[tuple[int, int], float]
    weak_dp_cov: np.ndarray
    weak_dp_se: np.ndarray

    def parity_holds(self, threshold: float = 0.01) -> bool:
        return self.max_ks < threshold


def demographic_parity_stats(
    pop: BankPopulation, forecaster: Any, n_samples: int = 100_000, rng_seed: int = 0
) -> ParityReport:
    """Simulate ``X_s ~ N(mu_s, Sigma_s)`` per bank and compare forecast distributions."""
    if n_samples < 100:
        raise ValueError("need at least 100 samples per bank")
    from .simulation import bank_stream

    draws = []
    for s, bank in enumerate(pop.banks):
        z = bank_stream(rng_seed, 0, s).standard_normal((n_samples, pop.dim))
        x = bank.feature_mean + z @ sym_sqrt(bank.feature_cov)
        if pop.dim == 1:
            x = x[:, 0]
        yhat = forecaster.predict(x, s) if getattr(forecaster, "requires_bank", False) \
            else forecaster.predict(x)
        draws.append(np.asarray(yhat, dtype=float).reshape(-1))
    means = np.array([d.mean() for d in draws])
    variances = np.array([d.var(ddof=1) for d in draws])
    ks = {
        (i, j): float(stats.ks_2samp(draws[i], draws[j]).statistic)
        for i, j in itertools.combinations(range(pop.n_banks), 2)
    }
    p = pop.weights
    overall = p @ means
    cov = p[:-1] * (means[:-1] - overall)
    var_means = variances / n_samples
    se = []
    for i in range(pop.n_banks - 1):
        coef = -p.copy() * p[i]
        coef[i] += p[i]
        se.append(np.sqrt(np.sum(coef**2 * var_means)))
    return ParityReport(means, variances, max(ks.values()), ks, cov, np.array(se))


@dataclass(frozen=True)
class ConvexWeights:
    """Implicit weights on the bank slopes.

    ``feo_weights`` are ``p_s sigma_s^2 / sum p sigma^2``; ``pooled_weights``
    are ``p_s W_s / sum p W`` with ``W_s = sigma_s^2 + mu_s (mu_s - mu_bar)``.
    The pooled slope additionally contains ``pooled_alpha_term =
    cov[alpha_S, mu_S] / var[X_S]``, which is not a weighting of slopes.
    """

    feo_weights: np.ndarray
    feo_convex: bool
    pooled_weights: np.ndarray
    pooled_convex: bool
    pooled_alpha_term: float


def convex_weights_check(pop: BankPopulation) -> ConvexWeights:
    p, a, b, mu, v = _scalar(pop)
    fw = p * v / (p @ v)
    mbar = p @ mu
    W = v + mu * (mu - mbar)
    pw = p * W / (p @ W)
    m = population_moments(pop)
    return ConvexWeights(
        fw,
        bool(np.all(fw >= 0) and abs(fw.sum() - 1) < 1e-12),
        pw,
        bool(np.all(pw >= 0)),
        float(m.cov_alpha_mu[0] / m.var_X[0, 0]),
    )
