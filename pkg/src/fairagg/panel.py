"""Long-format panel data and its CSV representation."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import pandas as pd

from .errors import DataError

REQUIRED_COLUMNS = ("bank_id", "time", "response", "weight")
DATA_FLOAT_FORMAT = "%.12g"


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PanelDataset:
    """Observations ``(bank_id, time, response, features, weight)``.

    ``time`` is an integer period index (quarters count up by one).  When a
    ``category`` column is present the uniqueness key is
    ``(category, bank_id, time)``; otherwise it is ``(bank_id, time)``.
    """

    bank_ids: np.ndarray
    time: np.ndarray
    response: np.ndarray
    features: np.ndarray
    weights: np.ndarray
    feature_names: tuple[str, ...] = ()
    category: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        bank_ids = np.asarray(self.bank_ids).astype(str)
        n = bank_ids.shape[0]
        time = np.asarray(self.time)
        if time.dtype.kind == "f":
            if not np.all(np.isfinite(time)) or np.any(time != np.round(time)):
                raise DataError("time must hold integer period indices")
        time = time.astype(np.int64)
        response = np.asarray(self.response, dtype=float).ravel()
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim == 1:
            feats = feats.reshape(n, -1) if n else feats.reshape(0, 1)
        weights = np.asarray(self.weights, dtype=float).ravel()
        for name, arr in (("time", time), ("response", response), ("weights", weights)):
            if arr.shape[0] != n:
                raise DataError(f"{name} has {arr.shape[0]} rows, expected {n}")
        if feats.shape[0] != n:
            raise DataError(f"features have {feats.shape[0]} rows, expected {n}")
        names = tuple(self.feature_names) or tuple(f"x{j + 1}" for j in range(feats.shape[1]))
        if len(names) != feats.shape[1]:
            raise DataError(f"{len(names)} feature names for {feats.shape[1]} feature columns")
        if not (np.all(np.isfinite(response)) and np.all(np.isfinite(feats))):
            raise DataError("response and features must be finite (filter missing values first)")
        if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
            raise DataError("weights must be strictly positive")
        cat = None if self.category is None else np.asarray(self.category).astype(str)
        key = pd.DataFrame({"b": bank_ids, "t": time})
        if cat is not None:
            key["c"] = cat
        dup = key.duplicated().to_numpy()
        if dup.any():
            i = int(np.flatnonzero(dup)[0])
            raise DataError(f"duplicate observation for bank {bank_ids[i]!r} at time {time[i]}")
        object.__setattr__(self, "bank_ids", _readonly(bank_ids))
        object.__setattr__(self, "time", _readonly(time))
        object.__setattr__(self, "response", _readonly(response))
        object.__setattr__(self, "features", _readonly(feats))
        object.__setattr__(self, "weights", _readonly(weights))
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "category", None if cat is None else _readonly(cat))
        banks, codes = np.unique(bank_ids, return_inverse=True)
        object.__setattr__(self, "_banks", tuple(banks.tolist()))
        object.__setattr__(self, "_codes", _readonly(codes.ravel()))

    @property
    def n_rows(self) -> int:
        return self.response.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def banks(self) -> tuple[str, ...]:
        """Distinct bank ids in sorted order; the last one is the reference bank."""
        return self._banks

    @property
    def n_banks(self) -> int:
        return len(self.banks)

    @property
    def bank_index(self) -> np.ndarray:
        """Integer code of each row's bank in :attr:`banks`."""
        return self._codes

    def weight_shares(self) -> np.ndarray:
        """``p_hat_s``: share of total weight held by each bank."""
        totals = np.bincount(self.bank_index, weights=self.weights, minlength=self.n_banks)
        return totals / totals.sum()

    def bank_counts(self) -> np.ndarray:
        return np.bincount(self.bank_index, minlength=self.n_banks)

    def feature_index(self, feature: int | str) -> int:
        if isinstance(feature, (int, np.integer)):
            if not 0 <= feature < self.dim:
                raise DataError(f"feature index {feature} out of range 0..{self.dim - 1}")
            return int(feature)
        try:
            return self.feature_names.index(feature)
        except ValueError:
            raise DataError(
                f"unknown feature {feature!r}; available: {list(self.feature_names)}"
            ) from None

    def subset(self, mask: Any) -> "PanelDataset":
        mask = np.asarray(mask)
        return PanelDataset(
            self.bank_ids[mask],
            self.time[mask],
            self.response[mask],
            self.features[mask],
            self.weights[mask],
            self.feature_names,
            None if self.category is None else self.category[mask],
        )

    def select_features(self, features: Sequence[int | str]) -> "PanelDataset":
        idx = [self.feature_index(f) for f in features]
        return PanelDataset(
            self.bank_ids,
            self.time,
            self.response,
            self.features[:, idx],
            self.weights,
            tuple(self.feature_names[i] for i in idx),
            self.category,
        )

    def sorted(self) -> "PanelDataset":
        """Rows ordered by (category, bank, time)."""
        keys = [self.time, self.bank_ids]
        if self.category is not None:
            keys.append(self.category)
        return self.subset(np.lexsort(keys))

    def categories(self) -> tuple[str, ...]:
        if self.category is None:
            return ()
        return tuple(np.unique(self.category).tolist())

    def by_category(self) -> dict[str, "PanelDataset"]:
        if self.category is None:
            raise DataError("dataset has no category column")
        return {c: self.subset(self.category == c) for c in self.categories()}

    def to_frame(self) -> pd.DataFrame:
        cols: dict[str, Any] = {"bank_id": self.bank_ids, "time": self.time}
        if self.category is not None:
            cols["category"] = self.category
        cols["response"] = self.response
        cols["weight"] = self.weights
        for j, name in enumerate(self.feature_names):
            cols[name] = self.features[:, j]
        return pd.DataFrame(cols)

    @classmethod
    def from_frame(cls, df: pd.DataFrame, features: Sequence[str] | None = None) -> "PanelDataset":
        missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
        if missing:
            raise DataError(f"panel is missing required column(s) {missing}")
        if features is None:
            skip = set(REQUIRED_COLUMNS) | {"category"}
            features = [c for c in df.columns if c not in skip]
        if not features:
            raise DataError("panel has no feature columns")
        used = list(REQUIRED_COLUMNS) + list(features)
        if df[used].isna().any().any():
            bad = [c for c in used if df[c].isna().any()]
            raise DataError(f"missing values in column(s) {bad}")
        try:
            numeric = df[list(features) + ["response", "weight"]].astype(float)
        except ValueError as exc:
            raise DataError(f"non-numeric panel value: {exc}") from None
        return cls(
            df["bank_id"].astype(str).to_numpy(),
            df["time"].to_numpy(),
            numeric["response"].to_numpy(),
            numeric[list(features)].to_numpy(),
            numeric["weight"].to_numpy(),
            tuple(features),
            df["category"].astype(str).to_numpy() if "category" in df.columns else None,
        )


def read_panel_csv(path: str | os.PathLike) -> PanelDataset:
    """Read a panel CSV (``#`` lines are comments)."""
    if not os.path.exists(path):
        raise DataError(f"panel file not found: {os.fspath(path)}")
    try:
        df = pd.read_csv(path, comment="#", dtype={"bank_id": str, "category": str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot parse panel file {os.fspath(path)}: {exc}") from None
    if df.empty:
        raise DataError(f"panel file {os.fspath(path)} has no rows")
    return PanelDataset.from_frame(df)


def write_panel_csv(
    ds: PanelDataset, path: str | os.PathLike, header: str | None = None
) -> None:
    """Write ``ds`` with 12 significant digits and LF line endings."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(header.rstrip("\n") + "\n")
        ds.to_frame().to_csv(fh, index=False, float_format=DATA_FLOAT_FORMAT, lineterminator="\n")
