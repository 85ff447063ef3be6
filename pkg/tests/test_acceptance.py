"""Acceptance criteria, one test per criterion.

Each test carries an ``acceptance`` marker; the conftest prints a single
PASS/FAIL line per criterion at the end of the run. Criteria 6-8 share one
run of the full CLI chain on the default 32-subject, 240-day cohort with the
default hyperparameter grid.
"""

import json
import math
import time
from dataclasses import replace
from datetime import datetime, timedelta

import numpy as np
import pytest

from adhere_ml import cli, harness, ingest
from adhere_ml import explain as xp
from adhere_ml import model as mdl
from adhere_ml import preprocess as pp
from adhere_ml.ingest import DoseEvent
from adhere_ml.model import ModelConfig
from adhere_ml.preprocess import Design

from oracles import label_days_bruteforce, point_to_segment_distance, random_events, weekly_from_daily


def acceptance(number, title):
    return pytest.mark.acceptance(number, title)


# 1 ---------------------------------------------------------------------------------

@acceptance(1, "analytic gradients match central differences (max rel err < 1e-4, >= 200 coords, < 10 s)")
def test_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    cfg = ModelConfig(lstm_hidden=4, fnn_hidden=3, final_hidden=3)
    seq = rng.normal(size=(10, 7, 6))
    static = rng.normal(size=(10, 5))
    y = (rng.random(10) < 0.5).astype(float)
    params = mdl.init_params(cfg, 6, 5, seed=1)
    _, grads = mdl.loss_and_grads(params, seq, static, y)
    coords = [(name, idx) for name in sorted(params) for idx in np.ndindex(params[name].shape)]
    picks = rng.choice(len(coords), size=min(240, len(coords)), replace=False)
    h = 1e-5
    worst = 0.0
    for p in picks:
        name, idx = coords[p]
        orig = params[name][idx]
        params[name][idx] = orig + h
        up = mdl.loss_and_grads(params, seq, static, y)[0]
        params[name][idx] = orig - h
        down = mdl.loss_and_grads(params, seq, static, y)[0]
        params[name][idx] = orig
        num = (up - down) / (2 * h)
        worst = max(worst, abs(num - grads[name][idx]) / max(abs(num), abs(grads[name][idx]), 1e-8))
    elapsed = time.perf_counter() - t0
    print(f"criterion 1: {len(picks)} coordinates, max relative error {worst:.2e}, {elapsed:.2f} s")
    assert len(picks) >= 200
    assert worst < 1e-4
    assert elapsed < 10


# 2 ---------------------------------------------------------------------------------

@acceptance(2, "attribution completeness < 1e-3 at 64 steps, shrinking at 256; linear model exact to 1e-10")
def test_attribution_completeness():
    rng = np.random.default_rng(7)
    n, lags, chans = 200, 5, 3
    dyn = rng.random((n, lags, chans))
    stat = rng.random((n, 4))
    y = ((dyn[:, 0, 0] + stat[:, 1] + 0.2 * rng.normal(size=n)) > 1.0).astype(int)
    d = Design(dyn, stat, y)
    cfg = ModelConfig(lstm_hidden=6, fnn_hidden=4, final_hidden=4, max_epochs=20, batch_size=32, seed=3)
    params, _ = mdl.train(cfg, d.subset(range(150)), d.subset(range(150, n)))
    f = xp.HybridLogit(params, lags, chans)
    X = d.flat()
    baseline = X.mean(axis=0)
    r64 = np.array([xp.integrated_gradients(f, x, baseline, steps=64).residual for x in X[:25]])
    r256 = np.array([xp.integrated_gradients(f, x, baseline, steps=256).residual for x in X[:25]])
    print(f"criterion 2: max residual {r64.max():.2e} at 64 steps, {r256.max():.2e} at 256 steps")
    assert r64.max() < 1e-3
    assert np.all(r256 <= r64)
    assert r256.max() < r64.max()

    w = rng.normal(size=9)
    lin = xp.LinearLogit(w, -0.4)
    x, base = rng.normal(size=9), rng.normal(size=9)
    a = xp.integrated_gradients(lin, x, base, steps=64)
    err = np.max(np.abs(a.values - w * (x - base)))
    print(f"criterion 2: linear-model attribution error {err:.1e}")
    assert err < 1e-10


# 3 ---------------------------------------------------------------------------------

@acceptance(3, "labeler equals brute-force oracle on 1000 random event lists; weekly equals recomputation")
def test_labeler_oracle_equivalence():
    rng = np.random.default_rng(99)
    mismatches = 0
    weekly_checked = 0
    for trial in range(1000):
        start = datetime(2022, 1, 3) + timedelta(days=int(rng.integers(0, 7)))
        events = [DoseEvent(s, t) for s, t in random_events(rng, n_max=20, start=start)]
        days = ingest.label_daily(events)
        got = {(lab.subject_id, lab.date): (lab.adherent, lab.opening_hour) for lab in days}
        if got != label_days_bruteforce(events):
            mismatches += 1
        weeks = ingest.label_weekly(days)
        direct = weekly_from_daily(days)
        got_weeks = {(w.subject_id, w.week_start): (w.adherent_fraction, w.adherent, w.weekend_adh_level)
                     for w in weeks}
        assert got_weeks == direct
        weekly_checked += len(weeks)
    print(f"criterion 3: 1000 trials, {mismatches} daily mismatches, {weekly_checked} weeks checked")
    assert mismatches == 0
    assert weekly_checked > 0


# 4 ---------------------------------------------------------------------------------

@acceptance(4, "no test subject in training, no SMOTE rows in evaluation, plans blind to test rows")
def test_pipeline_hygiene(small_cohort):
    samples, nm = small_cohort["daily"], small_cohort["daily_map"]
    traces = []
    grid = {"lstm_hidden": [4], "fnn_hidden": [4], "final_hidden": [4], "dropout_rate": [0.2],
            "learning_rate": [1e-2]}
    harness.run_nested_cv("daily", samples, nm, grid=grid, seed=1, k=5,
                          base_config={"max_epochs": 3}, traces=traces)
    assert len(traces) == 5
    for t in traces:
        test = set(t.fold.test)
        assert not test & t.plan_subjects
        for subjects in t.training_subjects.values():
            assert not test & subjects
        for design in t.evaluation.values():
            assert design.synthetic is None or not design.synthetic.any()
            assert "" not in design.subject_ids
        sentinel = [
            replace(s, dynamic=np.full_like(s.dynamic, -7e5), label=not s.label,
                    static={k: math.nan for k in s.static}, categorical={k: "??" for k in s.categorical})
            if s.subject_id in test else s
            for s in samples
        ]
        a = harness.fit_fold_plan(samples, t.fold, nm, seed=1)
        b = harness.fit_fold_plan(sentinel, t.fold, nm, seed=1)
        assert a.to_json() == b.to_json()
        assert a.to_json() == t.plan.to_json()
    print("criterion 4: 5 folds checked for leaks, synthetic rows and sentinel-invariant plans")


# 5 ---------------------------------------------------------------------------------

@acceptance(5, "SMOTE rows lie on minority kNN segments (< 1e-9) and classes balance")
def test_smote_geometry():
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(40, 90))
        X = rng.normal(size=(n, 4))
        y = (rng.random(n) < 0.3).astype(int)
        k = 5
        Xs, ys = pp.smote(X, y, k=k, seed=seed)
        counts = np.bincount(ys)
        assert counts[0] == counts[1]
        minority = int(np.argmin(np.bincount(y)))
        Xm = X[y == minority]
        kk = min(k, len(Xm) - 1)
        d2 = ((Xm[:, None, :] - Xm[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        nbrs = np.argsort(d2, axis=1, kind="stable")[:, :kk]
        for row in Xs[n:]:
            dist = min(point_to_segment_distance(row, Xm[i], Xm[j]) for i in range(len(Xm)) for j in nbrs[i])
            worst = max(worst, dist)
    print(f"criterion 5: worst distance to a minority segment {worst:.1e}")
    assert worst < 1e-9


# 6-8: one full CLI run on the default cohort --------------------------------------------

@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_run")
    base = ["--out-dir", str(out), "--seed", "0"]
    timings = {}
    for cmd in ["simulate", "label", "featurize"]:
        assert cli.main([cmd, *base]) == 0
    assert cli.main(["featurize", *base, "--task", "weekly"]) == 0
    t0 = time.perf_counter()
    assert cli.main(["evaluate", *base]) == 0
    timings["daily"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    assert cli.main(["evaluate", *base, "--task", "weekly"]) == 0
    timings["weekly"] = time.perf_counter() - t0
    for cmd in ["train-final", "explain", "report"]:
        assert cli.main([cmd, *base]) == 0
    return out, timings


@acceptance(6, "daily synthetic run < 10 min; accuracy >= majority + 5 pp; specificity >= 0.60; hybrid >= logistic")
def test_synthetic_end_to_end_daily(full_run):
    out, timings = full_run
    report = harness.read_report(out / "daily_cv_report.json")
    assert not any(f.aborted for f in report.folds)
    hybrid = report.models[harness.HYBRID].summary()
    logistic = report.models[harness.LOGISTIC].summary()
    acc, specificity = hybrid["accuracy"][0], hybrid["specificity"][0]
    print(
        f"criterion 6: nested CV {timings['daily']:.0f} s; hybrid accuracy {100 * acc:.2f}% vs majority "
        f"{100 * report.majority_rate:.2f}%; specificity {specificity:.3f}; logistic accuracy "
        f"{100 * logistic['accuracy'][0]:.2f}%"
    )
    assert timings["daily"] < 600
    assert acc >= report.majority_rate + 0.05
    assert specificity >= 0.60
    assert acc >= logistic["accuracy"][0]


@acceptance(7, "weekly synthetic run completes with four metrics and non-degenerate confusion counts per fold")
def test_synthetic_end_to_end_weekly(full_run):
    out, timings = full_run
    report = harness.read_report(out / "weekly_cv_report.json")
    assert len(report.folds) == 5 and not any(f.aborted for f in report.folds)
    for name, res in report.models.items():
        assert len(res.folds) == 5
        for m in res.folds:
            assert min(m.tp, m.fp, m.tn, m.fn) > 0, (name, m)
            assert all(v is not None for v in m.values().values())
    s = report.models[harness.HYBRID].summary()
    print(f"criterion 7: weekly CV {timings['weekly']:.0f} s; hybrid "
          + ", ".join(f"{m} {harness.format_mean_std(*s[m])}" for m in harness.METRICS))


@acceptance(8, "'t-1 is_adherent' in the daily top 3; an is_Weekend lag in the top 10")
def test_attribution_fidelity(full_run):
    out, _ = full_run
    rows = (out / "daily_importance.csv").read_text().splitlines()[1:]
    ranking = [r.split(",")[0] for r in rows]
    weekend = [i + 1 for i, name in enumerate(ranking) if name.endswith(" is_Weekend")]
    rank = ranking.index("t-1 is_adherent") + 1
    print(f"criterion 8: 't-1 is_adherent' rank {rank}; best is_Weekend lag rank {weekend[0]}; "
          f"top 5 {ranking[:5]}")
    assert rank <= 3
    assert weekend[0] <= 10


# 9 ---------------------------------------------------------------------------------

@acceptance(9, "two CLI chains with identical seeds give byte-identical outputs")
def test_cli_determinism(tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"lstm_hidden": [4, 8], "fnn_hidden": [4], "final_hidden": [4],
                                "dropout_rate": [0.2], "learning_rate": [1e-2]}))
    small = ["--n-subjects", "10", "--n-days", "120", "--k", "3", "--max-epochs", "5", "--n-explain", "30",
             "--grid", str(grid), "--seed", "7"]
    for run in ("a", "b"):
        for cmd in ["simulate", "label", "featurize", "evaluate", "train-final", "explain", "report"]:
            assert cli.main([cmd, "--out-dir", str(tmp_path / run), *small]) == 0
    a = sorted(p.name for p in (tmp_path / "a").iterdir())
    b = sorted(p.name for p in (tmp_path / "b").iterdir())
    assert a == b
    differing = [n for n in a if (tmp_path / "a" / n).read_bytes() != (tmp_path / "b" / n).read_bytes()]
    print(f"criterion 9: {len(a)} files compared, {len(differing)} differ")
    assert differing == []


# 10 --------------------------------------------------------------------------------

@acceptance(10, "Cronbach alpha 1 for duplicates; min-max spans [0, 1]; imputer recovers y = 2x to 1e-6")
def test_numeric_utilities():
    rng = np.random.default_rng(5)
    item = rng.normal(size=40)
    alpha = pp.cronbach_alpha(np.column_stack([item] * 4))
    X = rng.normal(size=(50, 6)) * rng.uniform(0.1, 100, size=6) + rng.normal(size=6)
    Xs = pp.MinMaxScaler().fit(X).transform(X)
    x = rng.uniform(-5, 5, size=60)
    Z = np.column_stack([x, 2 * x])
    miss = rng.choice(60, size=12, replace=False)
    Z[miss, 1] = np.nan
    err = np.max(np.abs(pp.IterativeImputer().fit_transform(Z)[miss, 1] - 2 * x[miss]))
    print(f"criterion 10: alpha {alpha:.12f}; scaled min {Xs.min(0).min()} max {Xs.max(0).max()}; "
          f"imputation error {err:.1e}")
    assert alpha == pytest.approx(1.0, abs=1e-12)
    assert np.all(Xs.min(axis=0) == 0.0) and np.all(Xs.max(axis=0) == 1.0)
    assert err < 1e-6
