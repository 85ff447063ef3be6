"""Nested subject-level cross-validation, metrics and Table-style reports."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model as mdl
from .features import FeatureNameMap, Sample
from .model import ModelConfig
from .preprocess import (
    DEFAULT_AVAILABILITY,
    DEFAULT_SMOTE_K,
    DEFAULT_TOP_K,
    Design,
    PreprocessPlan,
    fit_plan,
    smote_design,
)

log = logging.getLogger(__name__)

METRICS = ("accuracy", "precision", "recall", "specificity")
HYBRID = "Our Approach"
LOGISTIC = "Logistic Regression"

DEFAULT_GRID = {
    "lstm_hidden": [8, 16, 32],
    "fnn_hidden": [8, 16],
    "final_hidden": [8],
    "dropout_rate": [0.2, 0.5],
    "learning_rate": [1e-3, 1e-2],
}


def expand_grid(grid: dict[str, Sequence] | Sequence[dict]) -> list[dict]:
    """Cartesian product of a parameter grid, in key order."""
    if isinstance(grid, dict):
        keys = list(grid)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    return [dict(p) for p in grid]


# --- splitting -------------------------------------------------------------

@dataclass
class Fold:
    index: int
    test: list[str]
    train: list[str]
    validation: list[str]

    @property
    def outer_train(self) -> list[str]:
        return sorted(self.train + self.validation)


@dataclass
class SplitPlan:
    k: int
    seed: int
    folds: list[Fold]


def split_subject_kfold(subject_ids: Sequence[str], k: int = 5, seed: int = 0, val_fraction: float = 0.2) -> SplitPlan:
    """Seeded subject-level k-fold split with an inner validation slice per fold."""
    subjects = sorted(set(subject_ids))
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(subjects):
        raise ValueError(f"k={k} exceeds the number of subjects ({len(subjects)})")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    shuffled = [subjects[i] for i in rng.permutation(len(subjects))]
    groups = np.array_split(np.arange(len(shuffled)), k)
    folds = []
    for i, g in enumerate(groups):
        test = sorted(shuffled[j] for j in g)
        rest = [s for s in shuffled if s not in set(test)]
        inner = np.random.default_rng(np.random.SeedSequence([seed, 202, i]))
        rest = [rest[j] for j in inner.permutation(len(rest))]
        n_val = max(1, int(round(val_fraction * len(rest)))) if len(rest) > 1 else 0
        folds.append(Fold(i, test, sorted(rest[n_val:]), sorted(rest[:n_val])))
    return SplitPlan(k, seed, folds)


# --- metrics ---------------------------------------------------------------

def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass
class MetricSet:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float | None:
        return _ratio(self.tp + self.tn, self.n)

    @property
    def precision(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> float | None:
        return _ratio(self.tn, self.tn + self.fp)

    def values(self) -> dict[str, float | None]:
        return {m: getattr(self, m) for m in METRICS}

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn, **self.values()}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricSet":
        return cls(int(d["tp"]), int(d["fp"]), int(d["tn"]), int(d["fn"]))


def compute_metrics(y_true, y_pred) -> MetricSet:
    """Confusion counts with adherent (1) as the positive class."""
    t = np.asarray(y_true).astype(int)
    p = np.asarray(y_pred).astype(int)
    if t.shape != p.shape:
        raise ValueError("label arrays differ in length")
    return MetricSet(
        tp=int(np.sum((t == 1) & (p == 1))),
        fp=int(np.sum((t == 0) & (p == 1))),
        tn=int(np.sum((t == 0) & (p == 0))),
        fn=int(np.sum((t == 1) & (p == 0))),
    )


# --- report ----------------------------------------------------------------

@dataclass
class ModelResult:
    folds: list[MetricSet] = field(default_factory=list)

    def summary(self) -> dict[str, tuple[float | None, float | None]]:
        """Mean and population std over folds, ignoring undefined values."""
        out = {}
        for m in METRICS:
            vals = [getattr(f, m) for f in self.folds if getattr(f, m) is not None]
            if vals:
                arr = np.array(vals, dtype=float)
                out[m] = (float(arr.mean()), float(arr.std(ddof=0)))
            else:
                out[m] = (None, None)
        return out

    def mean(self, metric: str) -> float | None:
        return self.summary()[metric][0]


@dataclass
class FoldRecord:
    index: int
    test_subjects: list[str]
    n_test: int
    majority_rate: float
    chosen: dict | None = None
    best_epoch: int | None = None
    aborted: str | None = None


@dataclass
class CVReport:
    task: str
    seed: int
    k: int
    models: dict[str, ModelResult] = field(default_factory=dict)
    folds: list[FoldRecord] = field(default_factory=list)

    @property
    def majority_rate(self) -> float:
        rates = [f.majority_rate for f in self.folds if f.aborted is None]
        return float(np.mean(rates)) if rates else math.nan

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "seed": self.seed,
            "k": self.k,
            "models": {
                name: {
                    "folds": [f.to_dict() for f in res.folds],
                    "summary": {m: {"mean": mu, "std": sd} for m, (mu, sd) in res.summary().items()},
                }
                for name, res in self.models.items()
            },
            "folds": [asdict(f) for f in self.folds],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CVReport":
        return cls(
            task=d["task"],
            seed=int(d["seed"]),
            k=int(d["k"]),
            models={
                name: ModelResult([MetricSet.from_dict(f) for f in body["folds"]])
                for name, body in d["models"].items()
            },
            folds=[FoldRecord(**f) for f in d["folds"]],
        )


def format_mean_std(mean: float | None, std: float | None) -> str:
    if mean is None:
        return "n/a"
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


def emit_report(report: CVReport, out_dir: str | Path, stem: str = "cv_report") -> dict[str, Path]:
    """Write ``<stem>.csv`` (model x metric, percent mean ± std) and ``<stem>.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Model", "Accuracy (%)", "Precision (%)", "Recall (%)", "Specificity (%)"])
        for name, res in report.models.items():
            s = res.summary()
            w.writerow([name, *(format_mean_std(*s[m]) for m in METRICS)])
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"csv": csv_path, "json": json_path}


def read_report(path: str | Path) -> CVReport:
    return CVReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# --- nested CV -------------------------------------------------------------

def unit_seed(master: int, *path: int) -> int:
    """Deterministic per-work-unit seed, independent of execution order."""
    return int(np.random.SeedSequence([master, *path]).generate_state(1)[0])


def _by_subjects(samples: Sequence[Sample], subjects: Sequence[str]) -> list[Sample]:
    keep = set(subjects)
    return [s for s in samples if s.subject_id in keep]


def fit_fold_plan(
    samples: Sequence[Sample],
    fold: Fold,
    name_map: FeatureNameMap,
    seed: int,
    availability: float = DEFAULT_AVAILABILITY,
    top_k: int = DEFAULT_TOP_K,
    smote_k: int = DEFAULT_SMOTE_K,
) -> PreprocessPlan:
    """Fit a fold's plan; only rows of the fold's outer-train subjects are read."""
    return fit_plan(
        _by_subjects(samples, fold.outer_train),
        name_map,
        availability=availability,
        top_k=top_k,
        smote_k=smote_k,
        seed=unit_seed(seed, fold.index, 0),
        fold=fold.index,
    )


def balanced(design: Design, k: int = DEFAULT_SMOTE_K, seed: int = 0) -> Design:
    counts = np.bincount(design.y, minlength=2)
    if counts.min() < 2 or counts[0] == counts[1]:
        return design
    return smote_design(design, k=k, seed=seed)


@dataclass
class FoldTrace:
    """Subject ids of every structure built for one fold (for leakage audits)."""

    fold: Fold
    plan: PreprocessPlan
    plan_subjects: set[str]
    training_subjects: dict[str, set[str]]
    evaluation: dict[str, Design]


def run_nested_cv(
    task: str,
    samples: Sequence[Sample],
    name_map: FeatureNameMap,
    grid: dict | Sequence[dict] | None = None,
    seed: int = 0,
    k: int = 5,
    base_config: dict | None = None,
    availability: float = DEFAULT_AVAILABILITY,
    top_k: int = DEFAULT_TOP_K,
    smote_k: int = DEFAULT_SMOTE_K,
    logistic_l2: float = 1e-4,
    traces: list[FoldTrace] | None = None,
    progress: Callable[[str], None] | None = None,
) -> CVReport:
    """Nested subject-level CV for the hybrid model and the logistic baseline.

    Per outer fold: fit the preprocessing plan on outer-train subjects, grid
    search on the inner train/validation split by best validation loss, retrain
    the chosen configuration on all outer-train rows (still early-stopped on
    the validation subjects), and score the untouched outer-test subjects.
    """
    points = expand_grid(grid if grid is not None else DEFAULT_GRID)
    if not points:
        raise ValueError("hyperparameter grid is empty")
    base = dict(base_config or {})
    say = progress or (lambda msg: log.info(msg))
    split = split_subject_kfold([s.subject_id for s in samples], k=k, seed=seed)
    report = CVReport(task=task, seed=seed, k=k, models={HYBRID: ModelResult(), LOGISTIC: ModelResult()})

    for fold in split.folds:
        test = _by_subjects(samples, fold.test)
        outer = _by_subjects(samples, fold.outer_train)
        inner = _by_subjects(samples, fold.train)
        val = _by_subjects(samples, fold.validation)
        y_test = np.array([int(s.label) for s in test])
        majority = float(max(y_test.mean(), 1 - y_test.mean())) if len(y_test) else math.nan
        record = FoldRecord(fold.index, list(fold.test), len(test), majority)
        report.folds.append(record)

        reason = None
        if len({s.label for s in outer}) < 2:
            reason = "outer-train set lacks one of the classes"
        elif len({s.label for s in inner}) < 2:
            reason = "inner-train set lacks one of the classes"
        elif not val or not test:
            reason = "empty validation or test set"
        if reason:
            record.aborted = reason
            log.warning("fold %d aborted: %s", fold.index, reason)
            continue

        plan = fit_fold_plan(samples, fold, name_map, seed, availability, top_k, smote_k)
        d_inner = balanced(plan.transform(inner), smote_k, unit_seed(seed, fold.index, 1))
        d_outer = balanced(plan.transform(outer), smote_k, unit_seed(seed, fold.index, 2))
        d_val = plan.transform(val)
        d_test = plan.transform(test)

        best = None
        for g, point in enumerate(points):
            cfg = ModelConfig(**{**base, **point, "seed": unit_seed(seed, fold.index, 10 + g)})
            _, hist = mdl.train(cfg, d_inner, d_val)
            score = min(hist.val_loss) if hist.val_loss else math.inf
            say(f"[{task}] fold {fold.index} grid {g + 1}/{len(points)} {point} val_loss={score:.4f}")
            if best is None or score < best[0]:
                best = (score, cfg, hist.best_epoch, point)
        _, cfg, best_epoch, point = best
        params, _ = mdl.train(cfg, d_outer, d_val)
        record.chosen = dict(point)
        record.best_epoch = best_epoch
        report.models[HYBRID].folds.append(compute_metrics(d_test.y, mdl.predict(params, d_test)))

        lr_cfg = ModelConfig(**{**base, "learning_rate": 1e-2, "max_epochs": 100,
                                "seed": unit_seed(seed, fold.index, 5)})
        lr_params, _ = mdl.logistic_baseline(d_outer, d_val, lr_cfg, l2=logistic_l2)
        lr_pred = mdl.classify(mdl.logistic_proba(lr_params, d_test.flat()))
        report.models[LOGISTIC].folds.append(compute_metrics(d_test.y, lr_pred))

        if traces is not None:
            traces.append(FoldTrace(
                fold=fold,
                plan=plan,
                plan_subjects={s.subject_id for s in outer},
                training_subjects={
                    "inner_train": {x for x in d_inner.subject_ids if x},
                    "outer_train": {x for x in d_outer.subject_ids if x},
                    "validation": set(d_val.subject_ids),
                },
                evaluation={"validation": d_val, "test": d_test},
            ))
    return report
