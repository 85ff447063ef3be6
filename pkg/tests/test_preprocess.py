import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adhere_ml import preprocess as pp
from adhere_ml.preprocess import PreprocessError

from oracles import point_to_segment_distance


# --- availability ------------------------------------------------------------------

def test_availability_threshold_inclusive():
    X = np.array([[1, np.nan, np.nan], [2, 1, np.nan], [3, 1, 1], [4, 1, np.nan], [5, np.nan, np.nan]], float)
    # column b is 60% available and kept; column c is 20% available
    assert pp.availability_filter(X, ["a", "b", "c"], 0.6) == ["a", "b"]


# --- imputation ----------------------------------------------------------------------

def test_imputer_recovers_exact_linear_relation():
    x = np.linspace(-3, 5, 40)
    X = np.column_stack([x, 2 * x])
    X[[3, 10, 25], 1] = np.nan
    X[[7, 30], 0] = np.nan
    out = pp.IterativeImputer().fit_transform(X)
    np.testing.assert_allclose(out[[3, 10, 25], 1], 2 * x[[3, 10, 25]], atol=1e-6)
    np.testing.assert_allclose(out[[7, 30], 0], x[[7, 30]], atol=1e-6)


def test_imputer_leaves_observed_cells_and_applies_to_new_rows():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 3))
    X[:, 2] = X[:, 0] - X[:, 1]
    mask = rng.random(X.shape) < 0.1
    Xm = np.where(mask, np.nan, X)
    imp = pp.IterativeImputer().fit(Xm)
    out = imp.transform(Xm)
    np.testing.assert_array_equal(out[~mask], X[~mask])
    new = np.array([[1.0, 2.0, np.nan]])
    assert imp.transform(new)[0, 2] == pytest.approx(-1.0, abs=1e-2)
    back = pp.IterativeImputer.from_dict(imp.to_dict())
    np.testing.assert_array_equal(back.transform(new), imp.transform(new))


def test_imputer_rejects_column_without_observations():
    X = np.array([[1.0, np.nan], [2.0, np.nan], [3.0, np.nan]])
    with pytest.raises(PreprocessError, match="column 1"):
        pp.IterativeImputer().fit_transform(X)


# --- categoricals and scaling --------------------------------------------------------

def test_categorical_mode_imputation_and_unseen_zero():
    enc = pp.CategoricalEncoder().fit({"group": ["PN", "UC", None, "UC"]})
    assert enc.output_names == ["group=PN", "group=UC"]
    out = enc.transform({"group": ["PN", None, "XX"]})
    assert out.tolist() == [[1, 0], [0, 1], [0, 0]]


def test_minmax_train_spans_unit_interval_and_test_not_clamped():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(30, 4)) * [1, 10, 100, 0.1]
    scaler = pp.MinMaxScaler().fit(X)
    Xs = scaler.transform(X)
    np.testing.assert_array_equal(Xs.min(axis=0), 0.0)
    np.testing.assert_array_equal(Xs.max(axis=0), 1.0)
    beyond = scaler.transform(X.max(axis=0, keepdims=True) + 1.0)
    assert np.all(beyond > 1.0)


def test_minmax_constant_column():
    X = np.array([[3.0, 1.0], [3.0, 2.0]])
    out = pp.minmax_scale(X, np.array([[4.0, 1.5]]))
    assert out.tolist() == [[1.0, 0.5]]
    assert pp.minmax_scale(X)[:, 0].tolist() == [0.0, 0.0]


# --- SMOTE ---------------------------------------------------------------------------

def _knn(Xm, k):
    """Brute-force k nearest minority neighbors (excluding self), index tie-break."""
    out = []
    for i, row in enumerate(Xm):
        d = [(float(np.sum((row - other) ** 2)), j) for j, other in enumerate(Xm) if j != i]
        out.append({j for _, j in sorted(d)[:k]})
    return out


def smote_geometry_violations(X, y, Xs, ys, k):
    minority = np.argmin(np.bincount(y))
    Xm = X[y == minority]
    nbrs = _knn(Xm, min(k, len(Xm) - 1))
    worst = 0.0
    for row in Xs[len(X):]:
        best = min(
            point_to_segment_distance(row, Xm[i], Xm[j])
            for i in range(len(Xm)) for j in nbrs[i]
        )
        worst = max(worst, best)
    return worst


def test_smote_geometry_and_balance():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(60, 3))
    y = (rng.random(60) < 0.25).astype(int)
    Xs, ys = pp.smote(X, y, k=5, seed=4)
    assert np.bincount(ys)[0] == np.bincount(ys)[1]
    np.testing.assert_array_equal(Xs[:60], X)
    assert smote_geometry_violations(X, y, Xs, ys, 5) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(13, 30), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_smote_geometry_property(n_min, n_maj, k, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n_min + n_maj, 2))
    y = np.array([1] * n_min + [0] * n_maj)
    Xs, ys = pp.smote(X, y, k=k, seed=seed)
    assert (ys == 1).sum() == (ys == 0).sum() == n_maj
    assert smote_geometry_violations(X, y, Xs, ys, k) < 1e-9


def test_smote_edge_cases():
    X = np.arange(10, dtype=float)[:, None]
    with pytest.raises(PreprocessError):
        pp.smote(X, np.array([1] + [0] * 9))
    with pytest.raises(PreprocessError):
        pp.smote(X, np.zeros(10, int))
    Xs, ys = pp.smote(X[:4], np.array([0, 0, 1, 1]))
    assert Xs.shape == (4, 1)
    # two minority rows: every synthetic row lies between them
    Xs, ys = pp.smote(X, np.array([1, 1] + [0] * 8), k=5)
    assert np.all((Xs[10:] >= 0) & (Xs[10:] <= 1))


def test_smote_is_seeded():
    rng = np.random.default_rng(3)
    X, y = rng.normal(size=(40, 2)), (rng.random(40) < 0.3).astype(int)
    np.testing.assert_array_equal(pp.smote(X, y, seed=1)[0], pp.smote(X, y, seed=1)[0])
    assert not np.array_equal(pp.smote(X, y, seed=1)[0], pp.smote(X, y, seed=2)[0])


# --- feature selection ---------------------------------------------------------------

def test_point_biserial_matches_pearson():
    rng = np.random.default_rng(5)
    y = (rng.random(80) < 0.4).astype(int)
    X = rng.normal(size=(80, 3)) + y[:, None] * [0.0, 1.0, -2.0]
    expected = [np.corrcoef(X[:, j], y)[0, 1] for j in range(3)]
    np.testing.assert_allclose(pp.point_biserial(X, y), expected, atol=1e-12)
    assert pp.point_biserial(np.ones((5, 1)), np.array([0, 1, 0, 1, 1]))[0] == 0.0


def test_select_features_ties_by_name():
    y = np.array([0, 1, 0, 1])
    X = np.column_stack([y, y, 1 - y, [0, 0, 1, 1]])
    assert pp.select_features(X, y, ["b", "a", "c", "d"], top_k=2) == ["a", "b"]


def test_expand_lags():
    out = pp.expand_lags(["t-3 Night", "psup", "t-1 is_adherent", "t-2 Night"], 3, ["is_adherent", "Night"])
    assert out == [
        "t-1 is_adherent", "t-1 Night", "t-2 is_adherent", "t-2 Night", "t-3 is_adherent", "t-3 Night", "psup",
    ]


# --- reliability ---------------------------------------------------------------------

def test_cronbach_alpha():
    a = np.array([1.0, 2.0, 4.0, 3.0, 5.0])
    assert pp.cronbach_alpha(np.column_stack([a, a, a])) == pytest.approx(1.0)
    items = np.array([[1, 2], [2, 2], [3, 4], [4, 3]], float)
    # k/(k-1) * (1 - sum item var / total var) with sample variances
    item_var = 5 / 3 + 11 / 12
    total_var = np.var([3, 4, 7, 7], ddof=1)
    assert pp.cronbach_alpha(items) == pytest.approx(2 * (1 - item_var / total_var))
    assert pp.is_reliable(np.column_stack([a, a]))
    with pytest.raises(ValueError):
        pp.cronbach_alpha(a[:, None])


# --- plans ---------------------------------------------------------------------------

def test_plan_round_trip_and_transform(small_cohort):
    samples, nm = small_cohort["daily"], small_cohort["daily_map"]
    train = [s for s in samples if s.subject_id < "S07"]
    test = [s for s in samples if s.subject_id >= "S07"]
    plan = pp.fit_plan(train, nm, top_k=10, seed=1)
    d = plan.transform(train)
    flat = d.flat()
    assert flat.shape[1] == len(plan.feature_names)
    assert np.all(np.isfinite(flat))
    # every selected dynamic channel appears at every lag
    lags = {pp.split_lag_name(n)[0] for n in plan.feature_names if pp.split_lag_name(n)}
    assert lags == set(range(1, 8))
    again = pp.PreprocessPlan.from_json(plan.to_json())
    np.testing.assert_array_equal(again.transform(test).flat(), plan.transform(test).flat())
    assert again.to_json() == plan.to_json()


def test_plan_is_deterministic(small_cohort):
    samples, nm = small_cohort["daily"], small_cohort["daily_map"]
    assert pp.fit_plan(samples, nm, seed=3).to_json() == pp.fit_plan(samples, nm, seed=3).to_json()


def test_smote_design_flags_synthetic(small_cohort):
    samples, nm = small_cohort["daily"], small_cohort["daily_map"]
    plan = pp.fit_plan(samples, nm)
    d = pp.smote_design(plan.transform(samples), seed=0)
    n_real = len(samples)
    assert not d.synthetic[:n_real].any() and d.synthetic[n_real:].all()
    assert all(s == "" for s in d.subject_ids[n_real:])
    assert np.bincount(d.y)[0] == np.bincount(d.y)[1]


def test_design_sequence_is_oldest_first():
    dyn = np.arange(12, dtype=float).reshape(1, 3, 4)
    d = pp.Design(dyn, np.zeros((1, 0)), np.array([1]))
    np.testing.assert_array_equal(d.sequence()[0, 0], dyn[0, 2])
    back = pp.Design.from_flat(d.flat(), d.y, 3, 4)
    np.testing.assert_array_equal(back.dynamic, dyn)


def test_empty_plan_rejected(small_cohort):
    with pytest.raises(PreprocessError):
        pp.fit_plan([], small_cohort["daily_map"])
