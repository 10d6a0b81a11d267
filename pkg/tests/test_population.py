import numpy as np
import pytest
from hypothesis import given, strategies as st

from fairagg import (
    SIM_A,
    SIM_B,
    SIM_C,
    SIM_D,
    BankIdentityError,
    BankModel,
    BankPopulation,
    HypothesisViolation,
    InteractionPopulation,
    NotPositiveDefiniteError,
    SingularMatrixError,
    conditional_expectation_forecast,
    feo_decomposition,
    fit_conditional_expectation,
    fit_feo,
    fit_feo_with_interactions,
    fit_pooled,
    fit_ptf,
    fit_seo,
    fit_wate,
    population_moments,
    population_mse,
)
from fairagg.population import centered_dummy_vector
from oracles import mixture_mse, normal_equation_fit, ptf_quantile_mapping, random_population
from scipy import stats


def test_pooled_sim_a():
    f = fit_pooled(SIM_A)
    assert f.slope[0] == pytest.approx(0.25, abs=1e-12)
    assert f.intercept == pytest.approx(0.25, abs=1e-12)


def test_pooled_sim_b_equals_feo():
    assert fit_pooled(SIM_B).slope[0] == pytest.approx(2.5)
    assert fit_feo(SIM_B).slope[0] == pytest.approx(2.5)


def test_pooled_identical_banks():
    b = BankModel.scalar(0.4, -1.2, 0.5, 2.0)
    f = fit_pooled(BankPopulation.equal_weights([b, b]))
    assert f.slope[0] == pytest.approx(-1.2) and f.intercept == pytest.approx(0.4)


def test_feo_sim_a():
    f = fit_feo(SIM_A)
    assert f.slope[0] == pytest.approx(0.0, abs=1e-12)
    assert f.intercept == pytest.approx(0.5, abs=1e-12)


def test_feo_equal_covariance_is_ate():
    pop = BankPopulation.from_arrays([0.2, 0.3, 0.5], [0, 1, 2], [1.0, 2.0, 4.0], [0, 1, 3], [2, 2, 2])
    assert fit_feo(pop).slope[0] == pytest.approx(0.2 + 0.6 + 2.0)


def test_near_singular_covariance_rejected():
    with pytest.raises(NotPositiveDefiniteError):
        BankModel(0.0, [1.0, 1.0], [0, 0], [[1.0, 1 - 1e-15], [1 - 1e-15, 1.0]])


def test_solver_reports_condition():
    from fairagg.population import _solve

    with pytest.raises(SingularMatrixError) as exc:
        _solve(np.array([[1.0, 1.0], [1.0, 1.0 + 1e-14]]), np.ones(2), "test matrix")
    assert exc.value.condition > 1e12


def test_decomposition_sim_a():
    dec = feo_decomposition(SIM_A)
    assert dec.delta == pytest.approx([-1.0])
    assert dec.lambda_[0, 0] == pytest.approx(-0.25)
    assert dec.beta_pool[0] == pytest.approx(0.25)
    assert dec.beta_f[0] + dec.misdirection[0] == pytest.approx(0.25)
    assert dec.reference_bank == 1


def test_decomposition_sim_b_and_identical():
    assert feo_decomposition(SIM_B).delta == pytest.approx([0.0])
    b = BankModel.scalar(0.4, -1.2, 0.5, 2.0)
    dec = feo_decomposition(BankPopulation.equal_weights([b, b, b]))
    assert np.allclose(dec.delta, 0) and np.allclose(dec.beta_pool, dec.beta_f)


def test_decomposition_reference_bank_changes_delta_only():
    pop = random_population(np.random.default_rng(5), 4, 2)
    a, b = feo_decomposition(pop), feo_decomposition(pop, reference_bank=0)
    assert np.allclose(a.beta_f, b.beta_f)
    assert not np.allclose(a.delta, b.delta)
    assert np.allclose(b.identity_residual(), 0, atol=1e-10)
    for s in range(4):
        assert a.dummy_effect(s) == pytest.approx(b.dummy_effect(s))


def test_centered_dummy_vector():
    assert centered_dummy_vector(np.array([0.5, 0.5]), 0) == pytest.approx([0.5])
    assert centered_dummy_vector(np.full(3, 1 / 3), 2) == pytest.approx([-1 / 3, -1 / 3])


def test_seo_examples():
    seo = fit_seo(SIM_A)
    assert seo.predict(3.0, 0) == pytest.approx(0.5) and seo.predict(-1.0, 1) == pytest.approx(0.5)
    assert fit_seo(SIM_B).predict(1.0, 0) == pytest.approx(2.5)
    b = BankModel.scalar(0.4, -1.2, 0.5, 2.0)
    pop = BankPopulation.equal_weights([b, b])
    assert fit_seo(pop).predict(1.0, 1) == pytest.approx(fit_feo(pop).predict(1.0))
    with pytest.raises(BankIdentityError):
        seo.predict(1.0)


def test_ptf_sim_c():
    ptf = fit_ptf(SIM_C)
    assert ptf.predict(2.0, 0) == pytest.approx(5.5, abs=1e-12)
    assert ptf.predict(2.0, 1) == pytest.approx(3.0, abs=1e-12)
    assert ptf.proportional
    assert ptf.bar_alpha_o == pytest.approx(0.5)


@pytest.mark.parametrize("x", np.linspace(-3, 3, 13))
@pytest.mark.parametrize("bank", [0, 1])
def test_ptf_matches_quantile_mapping(x, bank):
    pop = BankPopulation.from_arrays([0.3, 0.7], [0.2, -0.4], [1.5, -0.5], [0.0, 1.0], [2.0, 0.5])
    assert fit_ptf(pop).predict(x, bank) == pytest.approx(ptf_quantile_mapping(pop, x, bank), abs=1e-9)


def test_ptf_identical_banks_is_common_model():
    b = BankModel.scalar(0.4, 1.2, 0.5, 2.0)
    ptf = fit_ptf(BankPopulation.equal_weights([b, b]))
    assert ptf.predict(1.3, 0) == pytest.approx(0.4 + 1.2 * 1.3)


def test_ptf_errors():
    pop = BankPopulation.from_arrays([0.5, 0.5], [0, 0], [0.0, 1.0], [0, 0], [1, 1])
    with pytest.raises(HypothesisViolation):
        fit_ptf(pop)
    with pytest.raises(HypothesisViolation):
        fit_ptf(SIM_C, gaussian=False)
    with pytest.raises(BankIdentityError):
        fit_ptf(SIM_C).predict(1.0)


def test_ptf_nonproportional_uses_mean_norm():
    b1 = BankModel(0.0, [1.0, 0.0], [0, 0], np.eye(2))
    b2 = BankModel(0.0, [0.0, 2.0], [0, 0], np.eye(2))
    ptf = fit_ptf(BankPopulation.equal_weights([b1, b2]))
    assert not ptf.proportional
    # bank 1 at x = (1, 0): z = x, beta_o/|beta_o| = (1, 0), mean norm 1.5
    assert ptf.predict([1.0, 0.0], 0) == pytest.approx(1.5)


def test_ptf_proportional_moments_identical_across_banks():
    pop = BankPopulation.from_arrays([0.4, 0.6], [0.0, 1.0], [1.0, 0.5], [1.0, 2.0], [1.0, 16.0])
    ptf = fit_ptf(pop)
    assert ptf.proportional
    for s in range(2):
        # forecast is affine in z_s ~ N(0, 1): mean bar_alpha_o, variance |bar_beta_o|^2
        a = ptf.predict(pop.means[s, 0], s)
        slope = ptf.predict(pop.means[s, 0] + np.sqrt(pop.covs[s, 0, 0]), s) - a
        assert a == pytest.approx(ptf.bar_alpha_o)
        assert slope**2 == pytest.approx(float(ptf.bar_beta_o @ ptf.bar_beta_o))


def test_conditional_expectation_sim_a():
    assert conditional_expectation_forecast(SIM_A, 1.0) == pytest.approx(0.5)
    phi0, phi2 = stats.norm.pdf(0), stats.norm.pdf(-2)
    assert conditional_expectation_forecast(SIM_A, 0.0) == pytest.approx(phi2 / (phi0 + phi2), abs=1e-12)
    assert conditional_expectation_forecast(SIM_A, 0.0) == pytest.approx(0.11920, abs=1e-5)


def test_conditional_expectation_tails_and_identical():
    f = fit_conditional_expectation(SIM_A)
    assert f.predict(-200.0) == pytest.approx(0.0)
    assert f.predict(200.0) == pytest.approx(1.0)
    assert f.posterior(1.0)[0] == pytest.approx([0.5, 0.5])
    b = BankModel.scalar(0.4, 1.2, 0.5, 2.0)
    assert conditional_expectation_forecast(BankPopulation.equal_weights([b, b]), 2.0) == pytest.approx(2.8)


def test_wate():
    assert fit_wate(SIM_B).slope[0] == pytest.approx(2.0)
    assert fit_wate(SIM_B, [1.0, 0.0]).slope[0] == pytest.approx(1.0)
    f = fit_wate(SIM_A)
    assert f.slope[0] == 0 and f.intercept == pytest.approx(0.5)
    with pytest.raises(ValueError):
        fit_wate(SIM_B, [0.7, 0.7])
    with pytest.raises(ValueError):
        fit_wate(SIM_B, [1.5, -0.5])


def test_interactions_sim_d():
    beta_f, gamma_f = fit_feo_with_interactions(InteractionPopulation(SIM_D, 1))
    assert beta_f == pytest.approx([1.0], abs=1e-12)
    assert gamma_f == pytest.approx([2.0], abs=1e-12)


def test_interactions_all_in_v_block_is_ate():
    beta_f, gamma_f = fit_feo_with_interactions(InteractionPopulation(SIM_B, 0))
    assert beta_f.size == 0
    assert gamma_f == pytest.approx([2.0], abs=1e-12)
    assert fit_feo(SIM_B).slope[0] == pytest.approx(2.5)


def test_interactions_empty_v_block_is_feo():
    pop = random_population(np.random.default_rng(2), 3, 2)
    beta_f, gamma_f = fit_feo_with_interactions(InteractionPopulation(pop, 2))
    assert gamma_f.size == 0
    assert np.allclose(beta_f, fit_feo(pop).slope)


def test_interactions_reject_correlated_blocks():
    b = BankModel(0.0, [1.0, 1.0], [0, 0], [[1.0, 0.3], [0.3, 1.0]])
    with pytest.raises(HypothesisViolation):
        InteractionPopulation(BankPopulation.equal_weights([b, b]), 1)


def test_interactions_simulation_oracle():
    # dummies x V interactions in a least-squares fit on simulated rows
    from fairagg import simulate_panel

    ds = simulate_panel(SIM_D, 200_000, seed=11)
    p = ds.weight_shares()
    u = (ds.bank_index == 0).astype(float) - p[0]
    X, V = ds.features[:, 0], ds.features[:, 1]
    design = np.column_stack([np.ones(ds.n_rows), u, X, V, u * (V - V.mean())])
    coef, *_ = np.linalg.lstsq(design, ds.response, rcond=None)
    assert coef[2] == pytest.approx(1.0, abs=0.01)
    assert coef[3] == pytest.approx(2.0, abs=0.01)


@given(st.integers(0, 100_000), st.integers(2, 6), st.integers(1, 3))
def test_closed_forms_match_normal_equations(seed, S, d):
    pop = random_population(np.random.default_rng(seed), S, d)
    pooled, feo = fit_pooled(pop), fit_feo(pop)
    c = normal_equation_fit(pop, False)
    assert np.allclose(np.r_[pooled.intercept, pooled.slope], c, atol=1e-9)
    c = normal_equation_fit(pop, True)
    assert np.allclose(feo.slope, c[S:], atol=1e-9)
    assert np.allclose(feo.delta, c[1:S], atol=1e-9)
    assert feo.intercept == pytest.approx(c[0], abs=1e-9)


@given(st.integers(0, 100_000), st.integers(2, 6), st.integers(1, 3))
def test_prop4_identity(seed, S, d):
    dec = feo_decomposition(random_population(np.random.default_rng(seed), S, d))
    assert np.abs(dec.identity_residual()).max() < 1e-10


@given(st.integers(0, 100_000), st.integers(2, 5), st.integers(1, 3))
def test_equal_means_pooled_equals_feo(seed, S, d):
    rng = np.random.default_rng(seed)
    pop = random_population(rng, S, d)
    mu = rng.normal(size=d)
    pop = BankPopulation(tuple(b.replace(feature_mean=mu) for b in pop.banks), pop.weights)
    assert np.allclose(fit_pooled(pop).slope, fit_feo(pop).slope, atol=1e-10)


@given(st.integers(0, 100_000), st.integers(2, 5))
def test_beta_f_ignores_means(seed, S):
    rng = np.random.default_rng(seed)
    pop = random_population(rng, S, 2)
    moved = BankPopulation(
        tuple(b.replace(feature_mean=rng.normal(size=2) * 3) for b in pop.banks), pop.weights
    )
    assert np.allclose(fit_feo(pop).slope, fit_feo(moved).slope, atol=1e-12)


@given(st.integers(0, 100_000), st.integers(2, 5), st.integers(1, 3))
def test_pooled_is_mse_optimal(seed, S, d):
    rng = np.random.default_rng(seed)
    pop = random_population(rng, S, d)
    f = fit_pooled(pop)
    best = population_mse(pop, f.intercept, f.slope)
    assert best == pytest.approx(mixture_mse(pop, f.intercept, f.slope), rel=1e-10)
    m = population_moments(pop)
    for _ in range(100):
        b = f.slope + rng.normal(scale=0.3, size=d)
        assert population_mse(pop, m.mean_loss - b @ m.bar_mu, b) >= best - 1e-12


@given(st.integers(0, 100_000), st.integers(2, 6))
def test_feo_scalar_weights_convex(seed, S):
    pop = random_population(np.random.default_rng(seed), S, 1)
    w = pop.weights * pop.covs[:, 0, 0]
    w /= w.sum()
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0)
    assert fit_feo(pop).slope[0] == pytest.approx(w @ pop.slopes[:, 0])
