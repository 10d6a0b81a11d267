"""Synthetic populations, simulated panels and a Monte Carlo harness.

Random streams are keyed by ``(seed, replication, bank)`` through
:class:`numpy.random.SeedSequence` and a counter-based Philox generator, so a
bank's rows never depend on how banks or replications are scheduled across
threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .model import BankModel, BankPopulation
from .panel import PanelDataset
from .population import sym_sqrt
from .sample import PanelMode, fit_panel

COV_JITTER = 1e-3


def _check_range(name: str, r: Sequence[float]) -> tuple[float, float]:
    lo, hi = float(r[0]), float(r[1])
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
        raise ValueError(f"{name} range must satisfy min <= max, got ({lo}, {hi})")
    return lo, hi


@dataclass(frozen=True)
class SimConfig:
    """Parameter ranges for random bank populations.

    ``cov_factor_range`` bounds the entries of the ``d x d`` factor ``A`` in
    ``Sigma_s = A A' + 1e-3 I``.  ``weight_scheme`` is ``"equal"`` or
    ``"random"`` (uniform draws, normalized).
    """

    n_banks: int = 2
    feature_dim: int = 1
    rows_per_bank: int = 1000
    alpha_range: tuple[float, float] = (-1.0, 1.0)
    beta_range: tuple[float, float] = (-1.0, 1.0)
    mu_range: tuple[float, float] = (-1.0, 1.0)
    cov_factor_range: tuple[float, float] = (-1.0, 1.0)
    noise_range: tuple[float, float] = (0.25, 0.25)
    weight_scheme: str = "equal"
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("n_banks", "feature_dim", "rows_per_bank"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("alpha_range", "beta_range", "mu_range", "cov_factor_range", "noise_range"):
            object.__setattr__(self, name, _check_range(name, getattr(self, name)))
        if self.noise_range[0] < 0:
            raise ValueError("noise variances must be nonnegative")
        if self.weight_scheme not in ("equal", "random"):
            raise ValueError(f"weight_scheme must be 'equal' or 'random', got {self.weight_scheme!r}")


def sample_population(cfg: SimConfig, rng: np.random.Generator | None = None) -> BankPopulation:
    """Draw every bank parameter uniformly from its configured range."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    S, d = cfg.n_banks, cfg.feature_dim
    if S < 2:
        raise ValueError("a population needs at least 2 banks")
    banks = []
    for _ in range(S):
        A = rng.uniform(*cfg.cov_factor_range, size=(d, d))
        banks.append(
            BankModel(
                rng.uniform(*cfg.alpha_range),
                rng.uniform(*cfg.beta_range, size=d),
                rng.uniform(*cfg.mu_range, size=d),
                A @ A.T + COV_JITTER * np.eye(d),
                rng.uniform(*cfg.noise_range),
            )
        )
    if cfg.weight_scheme == "equal":
        w = np.full(S, 1.0 / S)
    else:
        w = rng.uniform(0.1, 1.0, size=S)
        w /= w.sum()
        w[-1] = 1.0 - w[:-1].sum()
    return BankPopulation(tuple(banks), w)


def bank_stream(seed: int, replication: int, bank: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, replication, bank])))


def bank_label(s: int) -> str:
    return f"B{s + 1:03d}"


def simulate_panel(
    pop: BankPopulation,
    rows_per_bank: int | Sequence[int],
    seed: int | np.random.Generator = 0,
    replication: int = 0,
) -> PanelDataset:
    """Draw ``X ~ N(mu_s, Sigma_s)``, ``eps ~ N(0, noise_var_s)`` and ``y = alpha_s + beta_s'X + eps``.

    Row weights are ``p_s / n_s`` so each bank carries its population weight.
    Time is the row number within the bank.
    """
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(0, 2**63 - 1))
    counts = np.broadcast_to(np.asarray(rows_per_bank, dtype=int), (pop.n_banks,))
    if np.any(counts < 1):
        raise ValueError("every bank needs at least one row")
    parts = []
    for s, bank in enumerate(pop.banks):
        n = int(counts[s])
        rng = bank_stream(seed, replication, s)
        z = rng.standard_normal((n, pop.dim))
        eps = rng.standard_normal(n) * np.sqrt(bank.noise_var)
        x = bank.feature_mean + z @ sym_sqrt(bank.feature_cov)
        y = bank.intercept + x @ bank.slope + eps
        parts.append((s, n, x, y))
    return PanelDataset(
        np.concatenate([np.full(n, bank_label(s)) for s, n, _, _ in parts]),
        np.concatenate([np.arange(n) for _, n, _, _ in parts]),
        np.concatenate([y for *_, y in parts]),
        np.vstack([x for _, _, x, _ in parts]),
        np.concatenate([np.full(n, pop.weights[s] / n) for s, n, _, _ in parts]),
        tuple(f"x{j + 1}" for j in range(pop.dim)),
    )


def _coef_pooled(ds: PanelDataset) -> np.ndarray:
    f = fit_panel(ds, PanelMode.POOLED).forecaster
    return np.concatenate([[f.intercept], f.slope])


def _coef_feo(ds: PanelDataset) -> np.ndarray:
    f = fit_panel(ds, PanelMode.FIXED_EFFECTS).forecaster
    return np.concatenate([[f.intercept], f.slope])


ESTIMATORS: dict[str, Callable[[PanelDataset], np.ndarray]] = {
    "pooled": _coef_pooled,
    "feo": _coef_feo,
}


def thread_count(requested: int | None = None) -> int:
    """Worker count: ``requested``, capped by ``FAIRAGG_THREADS`` when set."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("FAIRAGG_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"FAIRAGG_THREADS must be an integer, got {cap!r}") from None
    return max(1, n)


@dataclass(frozen=True)
class MonteCarloResult:
    """Cross-replication mean and standard error of ``(intercept, slope...)``."""

    mean: np.ndarray
    se: np.ndarray
    estimates: np.ndarray


def monte_carlo_estimate(
    pop: BankPopulation,
    estimator: str,
    rows: int,
    replications: int,
    seed: int = 0,
    threads: int | None = None,
) -> MonteCarloResult:
    """Fit ``estimator`` on ``replications`` independent panels of ``rows`` total rows.

    Rows are split evenly across banks.  Registered estimators:
    ``"pooled"`` and ``"feo"``.
    """
    try:
        fn = ESTIMATORS[estimator]
    except KeyError:
        raise KeyError(f"unknown estimator {estimator!r}; choose from {sorted(ESTIMATORS)}") from None
    if replications < 2:
        raise ValueError("need at least 2 replications for a standard error")
    per_bank = max(rows // pop.n_banks, 1)

    def one(rep: int) -> np.ndarray:
        return fn(simulate_panel(pop, per_bank, seed, rep))

    workers = min(thread_count(threads), replications)
    if workers == 1:
        est = [one(r) for r in range(replications)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            est = list(ex.map(one, range(replications)))
    est = np.array(est)
    return MonteCarloResult(
        est.mean(axis=0), est.std(axis=0, ddof=1) / np.sqrt(replications), est
    )
