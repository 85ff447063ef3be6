"""Train-fitted preprocessing: availability filter, imputation, encoding,
min-max scaling, SMOTE, and correlation-filter feature selection.

Everything here is fitted on training rows and replayed unchanged on any
other rows through :class:`PreprocessPlan`.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .features import FeatureNameMap, Sample, lag_name, split_lag_name

DEFAULT_AVAILABILITY = 0.6
DEFAULT_TOP_K = 40
DEFAULT_SMOTE_K = 5
RELIABILITY_CUTOFF = 0.7


class PreprocessError(ValueError):
    pass


def availability_filter(X: np.ndarray, names: Sequence[str], threshold: float = DEFAULT_AVAILABILITY) -> list[str]:
    """Names of columns whose non-missing (non-NaN) fraction is >= threshold."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        return list(names) if threshold <= 0 else []
    present = 1.0 - np.isnan(X).mean(axis=0)
    return [n for n, frac in zip(names, present) if frac >= threshold]


def _fit_linear(A: np.ndarray, b: np.ndarray, rcond: float) -> tuple[np.ndarray, float]:
    """Least squares with intercept on standardized predictors.

    Singular values below ``rcond`` times the largest are discarded, which
    keeps collinear survey columns stable without biasing exact fits.
    """
    y_mean = float(b.mean())
    if A.shape[1] == 0:
        return np.zeros(0), y_mean
    mu = A.mean(axis=0)
    sd = A.std(axis=0)
    sd[sd == 0] = 1.0
    Z = (A - mu) / sd
    U, s, Vt = np.linalg.svd(Z, full_matrices=False)
    keep = s > rcond * (s[0] if s.size else 0.0)
    if not keep.any():
        return np.zeros(A.shape[1]), y_mean
    beta = Vt[keep].T @ ((U[:, keep].T @ (b - y_mean)) / s[keep])
    w = beta / sd
    return w, y_mean - float(mu @ w)


class IterativeImputer:
    """Round-robin regression imputer.

    Missing cells start at the column means; each column is then regressed
    on all other columns and its missing cells replaced by the prediction,
    until ``max_iter`` rounds or the largest cell change drops below ``tol``.
    """

    def __init__(self, max_iter: int = 10, tol: float = 1e-3, rcond: float = 1e-3):
        self.max_iter = max_iter
        self.tol = tol
        self.rcond = rcond
        self.means_: np.ndarray | None = None
        self.coef_: np.ndarray | None = None
        self.intercept_: np.ndarray | None = None
        self.n_iter_ = 0

    def fit_transform(self, X: np.ndarray) -> np.ndarray:
        X = np.array(X, dtype=float)
        mask = np.isnan(X)
        n, p = X.shape
        if n and mask.all(axis=0).any():
            bad = int(np.flatnonzero(mask.all(axis=0))[0])
            raise PreprocessError(f"column {bad} has no observed training values")
        self.means_ = np.nanmean(X, axis=0) if n else np.zeros(p)
        filled = np.where(mask, self.means_, X)
        self.coef_ = np.zeros((p, max(p - 1, 0)))
        self.intercept_ = self.means_.copy()
        self.n_iter_ = 0
        for _ in range(self.max_iter):
            self.n_iter_ += 1
            change = 0.0
            for j in range(p):
                others = np.arange(p) != j
                obs = ~mask[:, j]
                w, c = _fit_linear(filled[obs][:, others], X[obs, j], self.rcond)
                self.coef_[j], self.intercept_[j] = w, c
                miss = mask[:, j]
                if miss.any():
                    pred = filled[miss][:, others] @ w + c
                    change = max(change, float(np.max(np.abs(pred - filled[miss, j]))))
                    filled[miss, j] = pred
            if not mask.any() or change < self.tol:
                break
        return filled

    def fit(self, X: np.ndarray) -> "IterativeImputer":
        self.fit_transform(X)
        return self

    def transform(self, X: np.ndarray) -> np.ndarray:
        if self.means_ is None:
            raise PreprocessError("imputer is not fitted")
        X = np.array(X, dtype=float)
        mask = np.isnan(X)
        filled = np.where(mask, self.means_, X)
        p = X.shape[1]
        for j in range(p):
            miss = mask[:, j]
            if miss.any():
                others = np.arange(p) != j
                filled[miss, j] = filled[miss][:, others] @ self.coef_[j] + self.intercept_[j]
        return filled

    def to_dict(self) -> dict:
        return {
            "means": self.means_.tolist(),
            "coef": self.coef_.tolist(),
            "intercept": self.intercept_.tolist(),
            "n_iter": self.n_iter_,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IterativeImputer":
        imp = cls()
        imp.means_ = np.array(d["means"], dtype=float)
        p = imp.means_.size
        imp.coef_ = np.array(d["coef"], dtype=float).reshape(p, max(p - 1, 0))
        imp.intercept_ = np.array(d["intercept"], dtype=float)
        imp.n_iter_ = int(d.get("n_iter", 0))
        return imp


def iterative_impute(train: np.ndarray, apply: np.ndarray | None = None, **kwargs) -> np.ndarray:
    """Complete ``train`` (or ``apply`` using regressions fitted on ``train``)."""
    imp = IterativeImputer(**kwargs)
    completed = imp.fit_transform(train)
    return completed if apply is None else imp.transform(apply)


class CategoricalEncoder:
    """Mode imputation followed by one-hot encoding with training categories."""

    def __init__(self):
        self.categories_: dict[str, list[str]] = {}
        self.modes_: dict[str, str] = {}

    def fit(self, columns: dict[str, Sequence[str | None]]) -> "CategoricalEncoder":
        for name, values in columns.items():
            observed = [v for v in values if v is not None]
            if not observed:
                raise PreprocessError(f"categorical column {name!r} has no observed training values")
            counts = Counter(observed)
            top = max(counts.values())
            self.modes_[name] = min(v for v, c in counts.items() if c == top)
            self.categories_[name] = sorted(counts)
        return self

    @property
    def output_names(self) -> list[str]:
        return [f"{name}={cat}" for name, cats in self.categories_.items() for cat in cats]

    def transform(self, columns: dict[str, Sequence[str | None]]) -> np.ndarray:
        blocks = []
        for name, cats in self.categories_.items():
            values = [self.modes_[name] if v is None else v for v in columns[name]]
            blocks.append(np.array([[1.0 if v == c else 0.0 for c in cats] for v in values]).reshape(len(values), len(cats)))
        if not blocks:
            n = len(next(iter(columns.values()))) if columns else 0
            return np.zeros((n, 0))
        return np.hstack(blocks)


def encode_categoricals(train: dict[str, Sequence[str | None]]) -> tuple[np.ndarray, dict[str, list[str]]]:
    enc = CategoricalEncoder().fit(train)
    return enc.transform(train), dict(enc.categories_)


class MinMaxScaler:
    """x' = (x - min) / (max - min); constant columns use a unit range."""

    def fit(self, X: np.ndarray) -> "MinMaxScaler":
        X = np.asarray(X, dtype=float)
        self.min_ = X.min(axis=0) if X.shape[0] else np.zeros(X.shape[1])
        self.max_ = X.max(axis=0) if X.shape[0] else np.ones(X.shape[1])
        return self

    def transform(self, X: np.ndarray) -> np.ndarray:
        span = self.max_ - self.min_
        span = np.where(span == 0, 1.0, span)
        return (np.asarray(X, dtype=float) - self.min_) / span

    def fit_transform(self, X: np.ndarray) -> np.ndarray:
        return self.fit(X).transform(X)


def minmax_scale(train: np.ndarray, apply: np.ndarray | None = None) -> np.ndarray:
    scaler = MinMaxScaler().fit(train)
    return scaler.transform(train if apply is None else apply)


def _knn_minority(Xm: np.ndarray, k: int) -> np.ndarray:
    sq = np.einsum("ij,ij->i", Xm, Xm)
    d2 = sq[:, None] + sq[None, :] - 2.0 * Xm @ Xm.T
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, np.inf)
    # stable sort so equidistant neighbors resolve by row index
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def smote(
    X: np.ndarray, y: np.ndarray, k: int = DEFAULT_SMOTE_K, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Oversample the minority class to a 1:1 balance.

    Synthetic rows are appended after the original rows. Each one is
    ``x + u * (x_nn - x)`` with ``x`` a uniformly drawn minority row, ``x_nn``
    one of its ``k`` nearest minority neighbors, and ``u ~ U(0, 1)``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(int)
    classes, counts = np.unique(y, return_counts=True)
    if classes.size != 2:
        raise PreprocessError("SMOTE needs exactly two classes in the training labels")
    if counts[0] == counts[1]:
        return X.copy(), y.copy()
    minority = classes[np.argmin(counts)]
    n_min, n_maj = counts.min(), counts.max()
    if n_min < 2:
        raise PreprocessError(
            f"minority class has {n_min} row(s); SMOTE needs at least 2. "
            "Review the adherence thresholds or the data."
        )
    if k < 1:
        raise ValueError("k must be >= 1")
    Xm = X[y == minority]
    k_eff = min(k, n_min - 1)
    nbrs = _knn_minority(Xm, k_eff)
    n_new = n_maj - n_min
    rng = np.random.default_rng(seed)
    base = rng.integers(0, n_min, size=n_new)
    pick = rng.integers(0, k_eff, size=n_new)
    u = rng.random(n_new)
    synth = Xm[base] + u[:, None] * (Xm[nbrs[base, pick]] - Xm[base])
    return np.vstack([X, synth]), np.concatenate([y, np.full(n_new, minority)])


def point_biserial(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pearson correlation of every column with a binary label (0 if undefined)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    xc = X - X.mean(axis=0)
    yc = y - y.mean()
    denom = np.sqrt((xc ** 2).sum(axis=0) * (yc ** 2).sum())
    num = xc.T @ yc
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 0, num / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(r, -1.0, 1.0)


def select_features(
    X: np.ndarray, y: np.ndarray, names: Sequence[str], top_k: int = DEFAULT_TOP_K
) -> list[str]:
    """Top ``top_k`` names by |point-biserial r|, ties broken by name."""
    r = np.abs(point_biserial(X, y))
    order = sorted(range(len(names)), key=lambda i: (-r[i], names[i]))
    return [names[i] for i in order[:top_k]]


def expand_lags(selected: Sequence[str], lags: int, channels: Sequence[str] | None = None) -> list[str]:
    """Include every lag of any dynamic channel selected at one or more lags."""
    picked: list[str] = []
    static: list[str] = []
    for name in selected:
        parsed = split_lag_name(name)
        if parsed is None:
            static.append(name)
        elif parsed[1] not in picked:
            picked.append(parsed[1])
    if channels is not None:
        picked = [c for c in channels if c in picked]
    return [lag_name(k, c) for k in range(1, lags + 1) for c in picked] + static


def cronbach_alpha(items: np.ndarray) -> float:
    """Internal consistency of an (n_respondents, k_items) score matrix."""
    items = np.asarray(items, dtype=float)
    if items.ndim != 2 or items.shape[1] < 2:
        raise ValueError("Cronbach's alpha needs at least two items")
    if items.shape[0] < 2:
        raise ValueError("Cronbach's alpha needs at least two respondents")
    k = items.shape[1]
    total_var = items.sum(axis=1).var(ddof=1)
    if total_var == 0:
        raise ValueError("total score has zero variance")
    return k / (k - 1) * (1.0 - items.var(axis=0, ddof=1).sum() / total_var)


def is_reliable(items: np.ndarray, cutoff: float = RELIABILITY_CUTOFF) -> bool:
    return cronbach_alpha(items) >= cutoff


@dataclass
class Design:
    """Model-ready arrays for a set of samples under one plan.

    ``dynamic`` is (n, lags, channels) with lag t-1 first; ``synthetic`` flags
    SMOTE rows, which carry an empty subject id.
    """

    dynamic: np.ndarray
    static: np.ndarray
    y: np.ndarray
    subject_ids: list[str] = field(default_factory=list)
    synthetic: np.ndarray | None = None

    def __len__(self) -> int:
        return self.y.shape[0]

    def flat(self) -> np.ndarray:
        return np.hstack([self.dynamic.reshape(len(self), -1), self.static])

    def sequence(self) -> np.ndarray:
        """Dynamic tensor ordered oldest lag first, as the LSTM consumes it."""
        return self.dynamic[:, ::-1, :]

    @classmethod
    def from_flat(cls, flat: np.ndarray, y: np.ndarray, lags: int, channels: int, **kw) -> "Design":
        n_dyn = lags * channels
        return cls(flat[:, :n_dyn].reshape(-1, lags, channels), flat[:, n_dyn:], np.asarray(y).astype(int), **kw)

    def subset(self, idx) -> "Design":
        idx = np.asarray(idx)
        idx = np.flatnonzero(idx) if idx.dtype == bool else idx.astype(int)
        return Design(
            self.dynamic[idx], self.static[idx], self.y[idx],
            [self.subject_ids[i] for i in idx] if self.subject_ids else [],
            None if self.synthetic is None else self.synthetic[idx],
        )


def _numeric_matrix(samples: Sequence[Sample], name_map: FeatureNameMap) -> np.ndarray:
    n = len(samples)
    dyn = np.array([s.dynamic.reshape(-1) for s in samples], dtype=float).reshape(n, -1)
    stat = np.array(
        [[s.static.get(k, math.nan) for k in name_map.static_names] for s in samples], dtype=float
    ).reshape(n, len(name_map.static_names))
    return np.hstack([dyn, stat])


@dataclass
class PreprocessPlan:
    name_map: FeatureNameMap
    kept_static: list[str]
    kept_categorical: list[str]
    imputer: IterativeImputer
    encoder: CategoricalEncoder
    scaler_names: list[str]
    scaler: MinMaxScaler
    selected: list[str]
    expanded: list[str]
    meta: dict = field(default_factory=dict)

    @property
    def channels(self) -> list[str]:
        chans = []
        for name in self.expanded:
            parsed = split_lag_name(name)
            if parsed and parsed[1] not in chans:
                chans.append(parsed[1])
        return chans

    @property
    def static_features(self) -> list[str]:
        return [n for n in self.expanded if split_lag_name(n) is None]

    @property
    def feature_names(self) -> list[str]:
        """Flat model-input names: dynamic lag-major, then static."""
        return self.expanded

    def _scaled_all(self, samples: Sequence[Sample]) -> np.ndarray:
        nm = self.name_map
        full = _numeric_matrix(samples, nm)
        n_dyn = nm.lags * len(nm.channels)
        dyn = full[:, :n_dyn]
        idx = [nm.static_names.index(k) for k in self.kept_static]
        stat = full[:, n_dyn:][:, idx]
        if stat.shape[1]:
            stat = self.imputer.transform(stat)
        cat = self.encoder.transform({c: [s.categorical.get(c) for s in samples] for c in self.kept_categorical})
        return self.scaler.transform(np.hstack([dyn, stat, cat]))

    def transform(self, samples: Sequence[Sample]) -> Design:
        scaled = self._scaled_all(samples)
        pos = {n: i for i, n in enumerate(self.scaler_names)}
        chans = self.channels
        lags = self.name_map.lags
        dyn_cols = [pos[lag_name(k, c)] for k in range(1, lags + 1) for c in chans]
        stat_cols = [pos[n] for n in self.static_features]
        n = len(samples)
        return Design(
            dynamic=scaled[:, dyn_cols].reshape(n, lags, len(chans)),
            static=scaled[:, stat_cols],
            y=np.array([int(s.label) for s in samples], dtype=int),
            subject_ids=[s.subject_id for s in samples],
            synthetic=np.zeros(n, dtype=bool),
        )

    def to_dict(self) -> dict:
        return {
            "name_map": self.name_map.to_dict(),
            "kept_static": self.kept_static,
            "kept_categorical": self.kept_categorical,
            "imputer": self.imputer.to_dict(),
            "categories": self.encoder.categories_,
            "modes": self.encoder.modes_,
            "scaler": {"names": self.scaler_names, "min": self.scaler.min_.tolist(), "max": self.scaler.max_.tolist()},
            "selected": self.selected,
            "expanded": self.expanded,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessPlan":
        enc = CategoricalEncoder()
        enc.categories_ = {k: list(v) for k, v in d["categories"].items()}
        enc.modes_ = dict(d["modes"])
        # keep encoder column order identical to the fitted order
        enc.categories_ = {k: enc.categories_[k] for k in d["kept_categorical"]}
        scaler = MinMaxScaler()
        scaler.min_ = np.array(d["scaler"]["min"], dtype=float)
        scaler.max_ = np.array(d["scaler"]["max"], dtype=float)
        return cls(
            name_map=FeatureNameMap.from_dict(d["name_map"]),
            kept_static=list(d["kept_static"]),
            kept_categorical=list(d["kept_categorical"]),
            imputer=IterativeImputer.from_dict(d["imputer"]),
            encoder=enc,
            scaler_names=list(d["scaler"]["names"]),
            scaler=scaler,
            selected=list(d["selected"]),
            expanded=list(d["expanded"]),
            meta=dict(d.get("meta", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "PreprocessPlan":
        return cls.from_dict(json.loads(text))


def fit_plan(
    samples: Sequence[Sample],
    name_map: FeatureNameMap,
    *,
    availability: float = DEFAULT_AVAILABILITY,
    top_k: int = DEFAULT_TOP_K,
    smote_k: int = DEFAULT_SMOTE_K,
    seed: int = 0,
    fold: int | None = None,
) -> PreprocessPlan:
    """Fit every preprocessing stage on ``samples`` (training rows only)."""
    if not samples:
        raise PreprocessError("cannot fit a preprocessing plan on zero samples")
    full = _numeric_matrix(samples, name_map)
    n_dyn = name_map.lags * len(name_map.channels)
    static_raw = full[:, n_dyn:]
    kept_static = availability_filter(static_raw, name_map.static_names, availability)
    cat_cols = {c: [s.categorical.get(c) for s in samples] for c in name_map.categorical_names}
    cat_present = np.array([[v is not None for v in vals] for vals in cat_cols.values()]).T
    kept_categorical = [
        c for c, frac in zip(name_map.categorical_names, cat_present.mean(axis=0) if cat_present.size else [])
        if frac >= availability
    ]

    imputer = IterativeImputer()
    idx = [name_map.static_names.index(k) for k in kept_static]
    stat = static_raw[:, idx]
    stat = imputer.fit_transform(stat) if stat.shape[1] else stat
    if not stat.shape[1]:
        imputer.means_ = np.zeros(0)
        imputer.coef_ = np.zeros((0, 0))
        imputer.intercept_ = np.zeros(0)
    encoder = CategoricalEncoder().fit({c: cat_cols[c] for c in kept_categorical})
    cat = encoder.transform({c: cat_cols[c] for c in kept_categorical})

    X = np.hstack([full[:, :n_dyn], stat, cat])
    scaler_names = name_map.dynamic_names + kept_static + encoder.output_names
    scaler = MinMaxScaler().fit(X)
    Xs = scaler.transform(X)
    y = np.array([int(s.label) for s in samples])
    if len(np.unique(y)) == 2 and min(np.bincount(y)) >= 2:
        Xs, y = smote(Xs, y, k=smote_k, seed=seed)
    selected = select_features(Xs, y, scaler_names, top_k)
    expanded = expand_lags(selected, name_map.lags, name_map.channels)
    # keep static columns in scaler order for a stable layout
    expanded = [n for n in expanded if split_lag_name(n)] + [
        n for n in scaler_names if split_lag_name(n) is None and n in expanded
    ]
    return PreprocessPlan(
        name_map=name_map,
        kept_static=kept_static,
        kept_categorical=kept_categorical,
        imputer=imputer,
        encoder=encoder,
        scaler_names=scaler_names,
        scaler=scaler,
        selected=selected,
        expanded=expanded,
        meta={"seed": seed, "fold": fold, "n_train_rows": len(samples)},
    )


def smote_design(design: Design, k: int = DEFAULT_SMOTE_K, seed: int = 0) -> Design:
    """Rebalance a training design; synthetic rows are flagged and subject-less."""
    lags, chans = design.dynamic.shape[1], design.dynamic.shape[2]
    flat, y = smote(design.flat(), design.y, k=k, seed=seed)
    n_new = len(y) - len(design)
    return Design.from_flat(
        flat, y, lags, chans,
        subject_ids=list(design.subject_ids) + [""] * n_new,
        synthetic=np.concatenate([np.zeros(len(design), dtype=bool), np.ones(n_new, dtype=bool)]),
    )
