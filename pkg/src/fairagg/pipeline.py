"""From raw bank filings to a stress-weighted, lagged regression frame.

Steps: :func:`compute_rates` -> :func:`clean` -> :func:`macro_pc1` ->
:func:`stress_weights` -> :func:`build_regression_frame`.  Each step returns
its exclusion counts so the CLI can write them next to the data.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import pandas as pd

from .errors import DataError
from .panel import PanelDataset

RAW_COLUMNS = (
    "bank_id", "quarter", "category", "charge_offs", "recoveries", "loans", "past_due", "allowances",
)
MACRO_COLUMNS = (
    "income_growth",
    "gdp_growth",
    "hpi_change",
    "cpi_inflation",
    "unemployment_change",
    "dow_change",
    "treasury_spread_change",
)
LOSS_RATE_BOUNDS = (-0.5, 0.5)
PAST_DUE_MAX = 0.2
MIN_QUARTERS = 72
WINSOR_PCT = (0.05, 0.95)

_QUARTER = re.compile(r"^(\d{4})-Q([1-4])$")


def quarter_index(q: str) -> int:
    """``"YYYY-Qn"`` -> ``4*YYYY + n - 1``."""
    m = _QUARTER.match(str(q).strip())
    if not m:
        raise DataError(f"quarter {q!r} is not of the form YYYY-Qn")
    return 4 * int(m.group(1)) + int(m.group(2)) - 1


def quarter_label(t: int) -> str:
    return f"{t // 4}-Q{t % 4 + 1}"


def _read_csv(path: str | os.PathLike, what: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise DataError(f"{what} file not found: {os.fspath(path)}")
    try:
        return pd.read_csv(path, comment="#", dtype={"bank_id": str, "category": str, "quarter": str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot parse {what} file {os.fspath(path)}: {exc}") from None


def read_raw_panel(path: str | os.PathLike) -> pd.DataFrame:
    df = _read_csv(path, "raw panel")
    missing = [c for c in RAW_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"raw panel is missing column(s) {missing}")
    return df


def read_macro(path: str | os.PathLike) -> pd.DataFrame:
    df = _read_csv(path, "macro")
    if "quarter" not in df.columns:
        raise DataError("macro file needs a 'quarter' column")
    return df


def compute_rates(raw: pd.DataFrame) -> tuple[pd.DataFrame, dict[str, int]]:
    """Loss, past-due and allowance rates normalized by prior-quarter loans.

    ``loss_rate = (charge_offs - recoveries) / loans[t-1]`` and
    ``past_due_rate = past_due / loans[t-1]`` within (bank, category);
    ``allowance_rate = allowances / (loans[t-1] summed over the bank's categories)``.
    Rows without a usable prior-quarter denominator are dropped and counted.
    """
    missing = [c for c in RAW_COLUMNS if c not in raw.columns]
    if missing:
        raise DataError(f"raw panel is missing column(s) {missing}")
    df = raw.loc[:, list(RAW_COLUMNS)].copy()
    df["bank_id"] = df["bank_id"].astype(str)
    df["category"] = df["category"].astype(str)
    df["time"] = [quarter_index(q) for q in df["quarter"]]
    num = ["charge_offs", "recoveries", "loans", "past_due", "allowances"]
    df[num] = df[num].apply(pd.to_numeric, errors="coerce")
    if (df["loans"] < 0).any():
        raise DataError("loans must be nonnegative")
    if df.duplicated(["bank_id", "category", "time"]).any():
        raise DataError("duplicate (bank_id, category, quarter) rows in raw panel")
    df = df.sort_values(["category", "bank_id", "time"], kind="mergesort").reset_index(drop=True)

    prev = df[["bank_id", "category", "time", "loans"]].copy()
    prev["time"] += 1
    df = df.merge(
        prev.rename(columns={"loans": "prior_loans"}), on=["bank_id", "category", "time"], how="left"
    )
    totals = prev.groupby(["bank_id", "time"], as_index=False)["loans"].sum(min_count=1)
    df = df.merge(totals.rename(columns={"loans": "prior_total_loans"}), on=["bank_id", "time"], how="left")

    report = {"missing_prior_loans": 0, "zero_prior_loans": 0, "missing_values": 0}
    no_prior = df["prior_loans"].isna()
    zero_prior = ~no_prior & (df["prior_loans"] == 0)
    bad_vals = ~no_prior & ~zero_prior & df[["charge_offs", "recoveries", "past_due"]].isna().any(axis=1)
    report["missing_prior_loans"] = int(no_prior.sum())
    report["zero_prior_loans"] = int(zero_prior.sum())
    report["missing_values"] = int(bad_vals.sum())
    df = df.loc[~(no_prior | zero_prior | bad_vals)].copy()
    df["loss_rate"] = (df["charge_offs"] - df["recoveries"]) / df["prior_loans"]
    df["past_due_rate"] = df["past_due"] / df["prior_loans"]
    tot = df["prior_total_loans"].where(df["prior_total_loans"] > 0)
    df["allowance_rate"] = df["allowances"] / tot
    out = df[["bank_id", "category", "quarter", "time", "loans", "loss_rate", "past_due_rate",
              "allowance_rate"]].reset_index(drop=True)
    return out, report


def winsorize(values: Any, lower: float = WINSOR_PCT[0], upper: float = WINSOR_PCT[1]) -> np.ndarray:
    """Clamp at empirical percentiles taken as order statistics (inverted-CDF quantiles).

    With order statistics as cut points a second pass leaves the data
    unchanged, which keeps :func:`clean` idempotent.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return v.copy()
    lo, hi = np.quantile(v, [lower, upper], method="inverted_cdf")
    return np.clip(v, lo, hi)


def clean(rates: pd.DataFrame) -> tuple[pd.DataFrame, dict[str, int]]:
    """Apply the cleaning rules.

    1. drop ``loss_rate`` outside ``[-0.5, 0.5]``;
    2. drop ``past_due_rate > 0.2``;
    3. drop (bank, category) histories shorter than 72 quarters;
    4. winsorize ``past_due_rate`` at the 5th/95th percentiles within each category.
    """
    # positional index: winsorizing selects rows by label
    df = rates.reset_index(drop=True)
    report: dict[str, int] = {}
    lo, hi = LOSS_RATE_BOUNDS
    bad = (df["loss_rate"] < lo) | (df["loss_rate"] > hi)
    report["loss_rate_out_of_range"] = int(bad.sum())
    df = df.loc[~bad]
    bad = df["past_due_rate"] > PAST_DUE_MAX
    report["past_due_rate_above_max"] = int(bad.sum())
    df = df.loc[~bad]
    n_q = df.groupby(["category", "bank_id"])["time"].transform("nunique")
    short = n_q < MIN_QUARTERS
    report["short_history_banks"] = int(
        df.loc[short, ["category", "bank_id"]].drop_duplicates().shape[0]
    )
    report["short_history_rows"] = int(short.sum())
    df = df.loc[~short].copy()
    if df.empty:
        raise DataError("no rows left after cleaning")
    n_low = n_high = 0
    for _, idx in df.groupby("category").groups.items():
        v = df.loc[idx, "past_due_rate"].to_numpy()
        w = winsorize(v)
        n_low += int(np.sum(w > v))
        n_high += int(np.sum(w < v))
        df.loc[idx, "past_due_rate"] = w
    report["winsorized_low"] = n_low
    report["winsorized_high"] = n_high
    return df.reset_index(drop=True), report


@dataclass(frozen=True)
class MacroPC:
    """First principal component of the standardized macro variables.

    ``series`` is indexed by integer quarter index.  It equals
    ``Z v / sqrt(lambda_1)`` with ``Z`` standardized using the fit-range
    mean and SD, so it has mean 0 and variance 1 over the fit range.
    """

    loadings: pd.Series
    eigenvalue: float
    explained: float
    mean: pd.Series
    sd: pd.Series
    series: pd.Series


def macro_pc1(
    macro: pd.DataFrame,
    fit_range: tuple[str, str] | None = None,
    columns: Sequence[str] | None = None,
    sign_column: str | None = None,
) -> MacroPC:
    """PC1 of the macro table, fitted on ``fit_range`` and extended with frozen loadings.

    The sign is chosen so the loading on ``sign_column`` (default
    ``unemployment_change`` when present, else the first column) is positive.
    """
    if columns is None:
        columns = [c for c in MACRO_COLUMNS if c in macro.columns] or [
            c for c in macro.columns if c != "quarter"
        ]
    columns = list(columns)
    missing = [c for c in columns if c not in macro.columns]
    if missing:
        raise DataError(f"macro table is missing column(s) {missing}")
    t = np.array([quarter_index(q) for q in macro["quarter"]])
    order = np.argsort(t, kind="stable")
    t = t[order]
    X = macro[columns].to_numpy(dtype=float)[order]
    if np.any(np.diff(t) != 1):
        gap = int(np.flatnonzero(np.diff(t) != 1)[0])
        raise DataError(f"macro quarters are not consecutive after {quarter_label(int(t[gap]))}")
    if fit_range is None:
        lo_t, hi_t = int(t[0]), int(t[-1])
    else:
        lo_t, hi_t = quarter_index(fit_range[0]), quarter_index(fit_range[1])
    if lo_t < t[0] or hi_t > t[-1] or lo_t >= hi_t:
        raise DataError("fit range must lie within the macro data and span at least two quarters")
    fit = (t >= lo_t) & (t <= hi_t)
    if not np.all(np.isfinite(X[fit])):
        raise DataError("missing macro values inside the fit range")
    mean = X[fit].mean(axis=0)
    sd = X[fit].std(axis=0, ddof=1)
    if np.any(sd == 0):
        bad = [c for c, s in zip(columns, sd) if s == 0]
        raise DataError(f"macro column(s) {bad} are constant over the fit range")
    Z = (X - mean) / sd
    corr = np.corrcoef(Z[fit], rowvar=False)
    vals, vecs = np.linalg.eigh(corr)
    v = vecs[:, -1]
    lam = float(vals[-1])
    sign_col = sign_column or ("unemployment_change" if "unemployment_change" in columns else columns[0])
    if sign_col not in columns:
        raise DataError(f"sign column {sign_col!r} is not among the macro columns")
    if v[columns.index(sign_col)] < 0:
        v = -v
    pc = Z @ v / np.sqrt(lam)
    return MacroPC(
        loadings=pd.Series(v, index=columns),
        eigenvalue=lam,
        explained=lam / float(np.sum(vals)),
        mean=pd.Series(mean, index=columns),
        sd=pd.Series(sd, index=columns),
        series=pd.Series(pc, index=t),
    )


def stress_lambda(macro_pc: Any, ratio: float = 2.0) -> float:
    """``ln(ratio) / (max - min)`` of the macro factor."""
    pc = np.asarray(macro_pc, dtype=float)
    span = float(pc.max() - pc.min())
    if not ratio > 1:
        raise ValueError(f"stress ratio must exceed 1, got {ratio}")
    if span <= 0:
        raise DataError("the macro factor is constant; stress weights are undefined")
    return float(np.log(ratio) / span)


def stress_weights(macro_pc: Any, loans: Any, ratio: float = 2.0) -> np.ndarray:
    """``exp(lam * pc) * loans`` normalized so the least stressed period has factor 1.

    Evaluated as ``ratio ** ((pc - min) / (max - min)) * loans``, which makes
    the worst-to-best weight ratio at equal loans exactly ``ratio``.
    """
    pc = np.asarray(macro_pc, dtype=float)
    stress_lambda(pc, ratio)
    lo, hi = float(pc.min()), float(pc.max())
    return ratio ** ((pc - lo) / (hi - lo)) * np.asarray(loans, dtype=float)


@dataclass
class RegressionFrame:
    """Lagged regression rows: response at ``t``, features at ``t - lag``, weights at ``t``."""

    data: pd.DataFrame
    report: dict[str, int]
    lag: int
    stress_lambda: float
    feature_names: tuple[str, ...] = ("past_due_rate", "macro_pc")
    meta: dict = field(default_factory=dict)

    def panel(self, category: str | None = None) -> PanelDataset:
        df = self.data if category is None else self.data.loc[self.data["category"] == category]
        if df.empty:
            raise DataError(f"no rows for category {category!r}")
        return PanelDataset(
            df["bank_id"].to_numpy(),
            df["time"].to_numpy(),
            df["response"].to_numpy(),
            df[list(self.feature_names)].to_numpy(),
            df["weight"].to_numpy(),
            self.feature_names,
            df["category"].to_numpy(),
        )


def build_regression_frame(
    rates: pd.DataFrame, macro_series: pd.Series, lag: int = 4, ratio: float = 2.0
) -> RegressionFrame:
    """Join ``loss_rate[t]`` with ``past_due_rate[t-lag]`` and ``macro_pc[t-lag]``.

    ``macro_series`` is indexed by integer quarter index.  Stress weights use
    the macro factor and loans at ``t``; ``lam`` is computed over the
    quarters present in the frame.
    """
    if lag < 0:
        raise ValueError("lag must be nonnegative")
    df = rates[["bank_id", "category", "time", "loans", "loss_rate", "past_due_rate"]].copy()
    lagged = df[["bank_id", "category", "time", "past_due_rate"]].copy()
    lagged["time"] += lag
    df = df.drop(columns="past_due_rate").merge(lagged, on=["bank_id", "category", "time"], how="left")
    macro = pd.Series(macro_series)
    df["macro_pc"] = (df["time"] - lag).map(macro)
    df["macro_now"] = df["time"].map(macro)
    report = {
        "missing_lagged_feature": int(df["past_due_rate"].isna().sum()),
        "missing_macro": int((df["past_due_rate"].notna() & (df["macro_pc"].isna() | df["macro_now"].isna())).sum()),
    }
    df = df.dropna(subset=["past_due_rate", "macro_pc", "macro_now", "loss_rate"])
    no_loans = ~(df["loans"] > 0)
    report["nonpositive_loans"] = int(no_loans.sum())
    df = df.loc[~no_loans]
    if df.empty:
        raise DataError("regression frame is empty after the lag join")
    lam = stress_lambda(df["macro_now"].to_numpy(), ratio)
    df["weight"] = stress_weights(df["macro_now"].to_numpy(), df["loans"].to_numpy(), ratio)
    df["quarter"] = [quarter_label(int(t)) for t in df["time"]]
    df = df.rename(columns={"loss_rate": "response"})
    df = df.sort_values(["category", "bank_id", "time"], kind="mergesort").reset_index(drop=True)
    cols = ["bank_id", "category", "quarter", "time", "response", "past_due_rate", "macro_pc",
            "macro_now", "loans", "weight"]
    return RegressionFrame(df[cols], report, lag, lam)
