"""Canonical hand-checkable populations.

* ``SIM_A``: Simpson's paradox.  No bank has a predictive slope, but the
  bank with the higher intercept also has the higher feature mean.
* ``SIM_B``: equal feature means, heterogeneous slopes and feature variances.
* ``SIM_C``: heterogeneous feature variances, used for projection to fairness.
* ``SIM_D``: two uncorrelated feature blocks ``[X, V]``; ``V`` carries
  heterogeneous slopes and is the block that gets bank interactions.

Noise variances only matter for simulated panels; they do not enter any of
the closed forms checked against these fixtures.
"""

from __future__ import annotations

from .model import BankModel, BankPopulation

SIM_A = BankPopulation.equal_weights(
    [
        BankModel.scalar(0.0, 0.0, 0.0, 1.0, noise_var=0.25),
        BankModel.scalar(1.0, 0.0, 2.0, 1.0, noise_var=0.25),
    ]
)

SIM_B = BankPopulation.equal_weights(
    [
        BankModel.scalar(0.0, 1.0, 0.0, 1.0, noise_var=0.25),
        BankModel.scalar(0.0, 3.0, 0.0, 3.0, noise_var=0.25),
    ]
)

SIM_C = BankPopulation.equal_weights(
    [
        BankModel.scalar(0.0, 1.0, 0.0, 1.0, noise_var=0.25),
        BankModel.scalar(1.0, 2.0, 0.0, 4.0, noise_var=0.25),
    ]
)

# feature order is [X, V]
SIM_D = BankPopulation.equal_weights(
    [
        BankModel(0.0, [1.0, 1.0], [0.0, 1.0], [[1.0, 0.0], [0.0, 1.0]], noise_var=0.25),
        BankModel(1.0, [1.0, 3.0], [1.0, 2.0], [[1.0, 0.0], [0.0, 1.0]], noise_var=0.25),
    ]
)

SCENARIOS: dict[str, BankPopulation] = {
    "sim-a": SIM_A,
    "sim-b": SIM_B,
    "sim-c": SIM_C,
    "sim-d": SIM_D,
}


def get_scenario(name: str) -> BankPopulation:
    try:
        return SCENARIOS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
