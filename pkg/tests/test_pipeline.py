import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from fairagg import DataError, build_regression_frame, clean, compute_rates, macro_pc1, stress_weights
from fairagg.pipeline import quarter_index, quarter_label, stress_lambda, winsorize


def quarters(start, n):
    t0 = quarter_index(start)
    return [quarter_label(t0 + i) for i in range(n)]


def raw_bank(bank="B1", category="cc", n=4, start="2000-Q1", seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return pd.DataFrame({
        "bank_id": bank,
        "quarter": quarters(start, n),
        "category": category,
        "charge_offs": rng.uniform(5, 15, n) * scale,
        "recoveries": rng.uniform(0, 3, n) * scale,
        "loans": rng.uniform(900, 1100, n) * scale,
        "past_due": rng.uniform(10, 50, n) * scale,
        "allowances": rng.uniform(10, 30, n) * scale,
    })


def rates_frame(banks, n, category="cc", seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for b in banks:
        for i, q in enumerate(quarters("1990-Q1", n)):
            rows.append((b, category, q, quarter_index(q), 1000.0, rng.uniform(-0.01, 0.05),
                         rng.uniform(0, 0.15), 0.02))
    return pd.DataFrame(rows, columns=["bank_id", "category", "quarter", "time", "loans", "loss_rate",
                                       "past_due_rate", "allowance_rate"])


# rates


def test_quarter_parsing():
    assert quarter_index("2001-Q3") - quarter_index("2000-Q4") == 3
    assert quarter_label(quarter_index("1999-Q1")) == "1999-Q1"
    with pytest.raises(DataError):
        quarter_index("2001Q3")


def test_loss_rate_arithmetic():
    raw = pd.DataFrame({
        "bank_id": ["A", "A"], "quarter": ["2000-Q1", "2000-Q2"], "category": ["cc", "cc"],
        "charge_offs": [0.0, 10.0], "recoveries": [0.0, 2.0], "loans": [1000.0, 1200.0],
        "past_due": [0.0, 30.0], "allowances": [0.0, 50.0],
    })
    rates, report = compute_rates(raw)
    assert len(rates) == 1 and report["missing_prior_loans"] == 1
    row = rates.iloc[0]
    assert row.loss_rate == pytest.approx(0.008)
    assert row.past_due_rate == pytest.approx(0.03)
    assert row.allowance_rate == pytest.approx(0.05)


def test_recoveries_equal_charge_offs_gives_zero():
    raw = raw_bank()
    raw["recoveries"] = raw["charge_offs"]
    rates, _ = compute_rates(raw)
    assert np.all(rates.loss_rate == 0)


def test_allowance_rate_uses_total_loans():
    a, b = raw_bank(category="cc", seed=1), raw_bank(category="mort", seed=2)
    rates, _ = compute_rates(pd.concat([a, b]))
    r = rates[(rates.category == "cc") & (rates.quarter == "2000-Q2")].iloc[0]
    total = a.loans.iloc[0] + b.loans.iloc[0]
    assert r.allowance_rate == pytest.approx(a.allowances.iloc[1] / total)


def test_zero_prior_loans_dropped_and_counted():
    raw = raw_bank(n=5)
    raw.loc[1, "loans"] = 0.0
    rates, report = compute_rates(raw)
    assert report["zero_prior_loans"] == 1 and len(rates) == 3


def test_compute_rates_errors():
    raw = raw_bank()
    with pytest.raises(DataError):
        compute_rates(raw.drop(columns="past_due"))
    bad = raw.copy()
    bad.loc[0, "loans"] = -1.0
    with pytest.raises(DataError):
        compute_rates(bad)
    with pytest.raises(DataError):
        compute_rates(pd.concat([raw, raw.iloc[:1]]))


@given(st.floats(1e-3, 1e6), st.integers(0, 1000))
def test_rates_scale_invariant(c, seed):
    raw = pd.concat([raw_bank("A", seed=seed, n=6), raw_bank("B", seed=seed + 1, n=6)])
    scaled = raw.copy()
    cols = ["charge_offs", "recoveries", "loans", "past_due", "allowances"]
    scaled.loc[scaled.bank_id == "A", cols] *= c
    a, _ = compute_rates(raw)
    b, _ = compute_rates(scaled)
    for col in ("loss_rate", "past_due_rate", "allowance_rate"):
        assert np.allclose(a[col], b[col], rtol=1e-12, atol=0)


# clean


def test_winsorize_percentiles():
    v = np.arange(1, 101) / 100
    w = winsorize(v)
    assert w.min() == pytest.approx(0.05) and w.max() == pytest.approx(0.95)
    assert np.array_equal(w[4:95], v[4:95])
    assert np.sum(w != v) == 4 + 5


def test_clean_drops_and_reports():
    df = rates_frame(["A", "B"], 80)
    df.loc[3, "loss_rate"] = 0.6
    df.loc[5, "loss_rate"] = -0.51
    df.loc[7, "past_due_rate"] = 0.25
    out, report = clean(df)
    assert report["loss_rate_out_of_range"] == 2
    assert report["past_due_rate_above_max"] == 1
    assert len(out) == 160 - 3
    assert out.loss_rate.between(-0.5, 0.5).all()


def test_clean_excludes_short_history():
    df = pd.concat([rates_frame(["A"], 80), rates_frame(["SHORT"], 60, seed=1)])
    out, report = clean(df)
    assert "SHORT" not in set(out.bank_id)
    assert report["short_history_banks"] == 1 and report["short_history_rows"] == 60


def test_clean_winsorizes_per_category():
    a = rates_frame(["A"], 80, "cc")
    b = rates_frame(["A"], 80, "mort", seed=3)
    b["past_due_rate"] = b["past_due_rate"] * 0.1
    out, _ = clean(pd.concat([a, b]))
    for cat, src in (("cc", a), ("mort", b)):
        lo, hi = np.quantile(src.past_due_rate, [0.05, 0.95], method="inverted_cdf")
        got = out.loc[out.category == cat, "past_due_rate"]
        assert got.min() == pytest.approx(lo) and got.max() == pytest.approx(hi)


def test_clean_empty_raises():
    with pytest.raises(DataError):
        clean(rates_frame(["A"], 10))


@given(st.integers(0, 1000))
def test_clean_idempotent(seed):
    df = rates_frame(["A", "B", "C"], 75, seed=seed)
    once, _ = clean(df)
    twice, report = clean(once)
    pd.testing.assert_frame_equal(once, twice)
    assert report["winsorized_low"] == report["winsorized_high"] == 0


# macro factor


def macro_table(cols, start="1990-Q1"):
    n = len(next(iter(cols.values())))
    return pd.DataFrame({"quarter": quarters(start, n), **cols})


def test_pc1_correlated_pairs():
    x = np.random.default_rng(0).normal(size=50)
    pc = macro_pc1(macro_table({"a": x, "b": 3 * x + 1}))
    assert pc.loadings.to_numpy() == pytest.approx([np.sqrt(0.5)] * 2)
    pc = macro_pc1(macro_table({"a": x, "b": -x}), sign_column="b")
    assert pc.loadings.to_numpy() == pytest.approx([-np.sqrt(0.5), np.sqrt(0.5)])


def test_pc1_normalization_and_extension():
    rng = np.random.default_rng(1)
    base = rng.normal(size=(60, 1))
    X = base + 0.5 * rng.normal(size=(60, 4))
    m = macro_table({f"c{i}": X[:, i] for i in range(4)})
    pc = macro_pc1(m, fit_range=("1990-Q1", "2001-Q4"))
    assert np.linalg.norm(pc.loadings) == pytest.approx(1.0, abs=1e-12)
    fit = pc.series.loc[quarter_index("1990-Q1"):quarter_index("2001-Q4")]
    assert len(fit) == 48
    assert abs(fit.mean()) < 1e-10 and abs(fit.var(ddof=1) - 1) < 1e-10
    # out-of-range quarters use frozen loadings and standardization
    z = (X[-1] - pc.mean.to_numpy()) / pc.sd.to_numpy()
    assert pc.series.iloc[-1] == pytest.approx(z @ pc.loadings.to_numpy() / np.sqrt(pc.eigenvalue))


def test_pc1_sign_follows_unemployment():
    x = np.random.default_rng(2).normal(size=40)
    pc = macro_pc1(macro_table({"gdp_growth": x, "unemployment_change": -x}))
    assert pc.loadings["unemployment_change"] > 0


def test_pc1_independent_columns_eigenvalue():
    X = np.random.default_rng(3).normal(size=(10_000, 7))
    pc = macro_pc1(macro_table({f"c{i}": X[:, i] for i in range(7)}, start="1000-Q1"))
    assert abs(pc.eigenvalue - 1) < 0.1


def test_pc1_errors():
    x = np.random.default_rng(4).normal(size=20)
    with pytest.raises(DataError):
        macro_pc1(macro_table({"a": x, "b": np.ones(20)}))
    with pytest.raises(DataError):
        macro_pc1(macro_table({"a": x, "b": x}), fit_range=("1980-Q1", "1991-Q1"))
    gappy = macro_table({"a": x, "b": -x}).drop(index=5)
    with pytest.raises(DataError):
        macro_pc1(gappy)


# stress weights


def test_stress_lambda_example():
    pc = np.array([-2.0, 0.0, 8.0])
    assert stress_lambda(pc) == pytest.approx(np.log(2) / 10, rel=1e-15)
    w = stress_weights(pc, np.ones(3))
    assert w.max() / w.min() == 2.0
    lam = np.log(2) / 10
    assert w / w[0] == pytest.approx(np.exp(lam * pc) / np.exp(lam * pc[0]), rel=1e-14)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=50), st.floats(1.01, 10))
def test_stress_ratio_exact(pc, ratio):
    pc = np.array(pc)
    if np.ptp(pc) < 1e-6:
        return
    w = stress_weights(pc, np.ones_like(pc), ratio)
    assert w[np.argmax(pc)] / w[np.argmin(pc)] == pytest.approx(ratio, rel=1e-15)


def test_stress_weights_errors_and_loans():
    with pytest.raises(ValueError):
        stress_weights([0.0, 1.0], [1.0, 1.0], ratio=1.0)
    with pytest.raises(DataError):
        stress_weights([1.0, 1.0], [1.0, 1.0])
    pc = np.array([0.0, 0.5, 1.0])
    assert np.array_equal(stress_weights(pc, 2 * np.ones(3)), 2 * stress_weights(pc, np.ones(3)))


# regression frame


def macro_series(times, seed=0):
    return pd.Series(np.random.default_rng(seed).normal(size=len(times)), index=times)


def test_frame_lag_zero_keeps_all_rows():
    rates = rates_frame(["A", "B"], 8)
    rf = build_regression_frame(rates, macro_series(sorted(set(rates.time))), lag=0)
    assert len(rf.data) == 16 and rf.report["missing_lagged_feature"] == 0
    assert np.allclose(rf.data.past_due_rate.to_numpy(), rates.past_due_rate.to_numpy())


def test_frame_lag_four_on_eight_quarters():
    rates = rates_frame(["A"], 8)
    rf = build_regression_frame(rates, macro_series(sorted(set(rates.time))), lag=4)
    assert len(rf.data) == 4 and rf.report["missing_lagged_feature"] == 4
    first = rf.data.iloc[0]
    assert first.past_due_rate == rates.past_due_rate.iloc[0]
    assert first.response == rates.loss_rate.iloc[4]


def test_frame_missing_feature_counted():
    rates = rates_frame(["A"], 12)
    rates = rates.drop(index=3).reset_index(drop=True)
    rf = build_regression_frame(rates, macro_series(range(rates.time.min(), rates.time.max() + 1)), lag=4)
    # 11 responses; quarters 0-2 have no lag at all and quarter 7 lost its lag
    assert len(rf.data) == 11 - 3 - 1
    assert rf.report["missing_lagged_feature"] == 3 + 1


def test_frame_weights_and_panel():
    rates = rates_frame(["A", "B"], 10)
    rates.loc[rates.bank_id == "B", "loans"] = 2000.0
    times = sorted(set(rates.time))
    rf = build_regression_frame(rates, macro_series(times), lag=2)
    a = rf.data[rf.data.bank_id == "A"].weight.to_numpy()
    b = rf.data[rf.data.bank_id == "B"].weight.to_numpy()
    assert np.allclose(b, 2 * a)
    assert rf.data.weight.max() / rf.data.weight.min() == pytest.approx(4.0)
    ds = rf.panel("cc")
    assert ds.n_rows == 16 and ds.feature_names == ("past_due_rate", "macro_pc")
    with pytest.raises(DataError):
        rf.panel("nope")
    with pytest.raises(ValueError):
        build_regression_frame(rates, macro_series(times), lag=-1)
