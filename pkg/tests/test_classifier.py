import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from evade_bench import (REJECT, ComposedMap, AffineMap, IdentityMap, OneVsAllSVM, TanhRandomMap,
                         cv_select, load_model, make_blobs, save_model)
from evade_bench.classifier import DEFAULT_C_GRID, DEFAULT_GAMMA_GRID


def linear_pair():
    # f_0 = x_0, f_1 = -x_0
    return OneVsAllSVM.from_parameters(np.eye(2), [[1.0, 0.0], [-1.0, 0.0]], [0.0, 0.0],
                                       kernel="linear")


@pytest.fixture(scope="module")
def blob_clf(three_blobs):
    return OneVsAllSVM(kernel="rbf", C=1.0, gamma=0.3).fit(three_blobs.X, three_blobs.y)


def fd_grad(fun, x, h=1e-6):
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def test_one_dimensional_pair():
    clf = OneVsAllSVM(kernel="linear", C=10.0).fit([[-1.0], [1.0]], [0, 1])
    assert clf.predict([[-1.0], [1.0]]).tolist() == [0, 1]


def test_three_blob_train_accuracy(blob_clf, three_blobs):
    assert np.mean(blob_clf.predict(three_blobs.X) == three_blobs.y) >= 0.99


def test_training_is_deterministic(three_blobs):
    a = OneVsAllSVM(gamma=0.3).fit(three_blobs.X, three_blobs.y)
    b = OneVsAllSVM(gamma=0.3).fit(three_blobs.X, three_blobs.y)
    np.testing.assert_allclose(a.dual_coef_, b.dual_coef_, atol=1e-10, rtol=0)


def test_dual_feasibility(three_blobs):
    C = 0.5
    clf = OneVsAllSVM(gamma=0.3, C=C).fit(three_blobs.X, three_blobs.y)
    svs = clf.feature_map_.transform(three_blobs.X)
    for k, beta in enumerate(clf.dual_coef_):
        assert np.all(np.abs(beta) <= C + 1e-12)
        assert abs(beta.sum()) < 1e-6
        pos = np.isin(clf.support_vectors_.tolist(), svs[three_blobs.y == k].tolist()).all(1)
        assert np.all(beta[pos] >= 0) and np.all(beta[~pos] <= 0)


def test_fit_errors():
    with pytest.raises(ValueError, match="absent"):
        OneVsAllSVM().fit([[0.0], [1.0]], [0, 2])
    with pytest.raises(ValueError, match="C must"):
        OneVsAllSVM(C=0).fit([[0.0], [1.0]], [0, 1])
    with pytest.raises(ValueError, match="expects"):
        OneVsAllSVM(feature_map=IdentityMap(3)).fit([[0.0], [1.0]], [0, 1])


def test_linear_discriminant_example():
    clf = linear_pair()
    assert clf.discriminants([2.0, 5.0]).tolist() == [2.0, -2.0]
    assert len(clf.discriminants([0.0, 0.0])) == clf.num_classes


def test_rbf_lone_support_vector():
    z = np.array([0.3, -1.2])
    clf = OneVsAllSVM.from_parameters([z], [[1.0], [-1.0]], [0.0, 0.0], gamma=1.0)
    assert clf.discriminants(z)[0] == 1.0
    assert np.all(clf.grad_discriminant(z, 0) == 0.0)


def test_linear_gradient_example():
    clf = OneVsAllSVM.from_parameters(np.eye(2), [[1.0, 2.0], [0.0, 0.0]], [0.0, 0.0],
                                      kernel="linear")
    for x in ([0.0, 0.0], [5.0, -3.0]):
        assert clf.grad_discriminant(x, 0).tolist() == [1.0, 2.0]


def test_predict_examples():
    clf = linear_pair().with_reject(True)
    S = np.array([[0.3, -0.1, -0.5], [-0.2, -0.1, -0.5]])
    assert clf.predict_from_scores(S).tolist() == [0, REJECT]
    assert clf.with_reject(False).predict_from_scores(S).tolist() == [0, 1]
    assert clf.predict_from_scores([[0.2, 0.2]]).tolist() == [0]


def test_discriminants_subtract_thresholds():
    clf = linear_pair().with_reject(True, thresholds=[0.5, 0.25])
    np.testing.assert_array_equal(clf.discriminants([2.0, 0.0]), [1.5, -2.25])
    np.testing.assert_array_equal(clf.discriminants([2.0, 0.0], calibrated=False), [2.0, -2.0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_reject_gate_property(seed):
    rng = np.random.default_rng(seed)
    ds = make_blobs(c=3, d=2, n_per_class=15, seed=seed % 7)
    clf = _cached_clf(seed % 7)
    X = rng.normal(0, 8, (20, 2))
    strict, gated = clf.with_reject(False), clf.with_reject(True, thresholds=rng.uniform(0, 0.5, 3))
    S = gated.decision_function(X)
    assert np.array_equal(strict.predict(X), np.argmax(strict.decision_function(X), axis=1))
    for s, p in zip(S, gated.predict(X)):
        if p == REJECT:
            assert np.all(s <= 0)
        else:
            assert s[p] > 0 and p == np.argmax(s)
    assert np.all(strict.predict(X) >= 0)
    del ds


_CLF_CACHE = {}


def _cached_clf(seed):
    if seed not in _CLF_CACHE:
        ds = make_blobs(c=3, d=2, n_per_class=15, seed=seed)
        _CLF_CACHE[seed] = OneVsAllSVM(gamma=0.1).fit(ds.X, ds.y)
    return _CLF_CACHE[seed]


@pytest.mark.parametrize("kernel", ["linear", "rbf"])
def test_gradients_match_finite_differences(kernel):
    rng = np.random.default_rng(2)
    ds = make_blobs(c=3, d=4, n_per_class=12, seed=5)
    fmap = ComposedMap([AffineMap(4, 5, seed=1), TanhRandomMap(5, 5, seed=2)])
    clf = OneVsAllSVM(kernel=kernel, gamma=0.5, feature_map=fmap).fit(ds.X, ds.y)
    for _ in range(20):
        x = ds.X[rng.integers(ds.n_samples)] + rng.normal(0, 0.5, 4)
        k = int(rng.integers(3))
        fd = fd_grad(lambda v: clf.discriminants(v)[k], x)
        g = clf.grad_discriminant(x, k)
        assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-2)


def test_cap_behaviour_far_from_data(blob_clf):
    gamma = blob_clf.kernel_.gamma
    far = blob_clf.support_vectors_.mean(0) + np.array([1.0, 1.0]) * 100 / np.sqrt(gamma)
    assert np.min(np.linalg.norm(blob_clf.support_vectors_ - far, axis=1)) >= 10 / np.sqrt(gamma)
    f = blob_clf.discriminants(far, calibrated=False)
    assert np.all(np.abs(f - blob_clf.intercept_) < 1e-6)


def test_calibration_zero_increase_is_identity(blob_clf, three_blobs):
    clf = blob_clf.with_reject(True)
    clf.calibrate_thresholds(three_blobs.X, three_blobs.y, 0.0)
    assert np.all(clf.thresholds_ == 0.0)


def test_calibration_quantile_example():
    clf = linear_pair().with_reject(True)
    # class-0 positives score f_0 = x_0 in {-1, 1, 2, 3}; one class-1 sample
    X = np.array([[-1.0, 0], [1.0, 0], [2.0, 0], [3.0, 0], [-4.0, 0]])
    y = np.array([0, 0, 0, 0, 1])
    rep = clf.calibrate_thresholds(X, y, 0.25)
    assert rep[0]["fnr_before"] == 0.25 and rep[0]["fnr_after"] == 0.5
    t = clf.thresholds_[0]
    assert 1.0 <= t < 2.0
    assert clf.predict([[1.0, 0.0]])[0] == REJECT and clf.predict([[2.0, 0.0]])[0] == 0


def test_calibration_unreachable_and_missing_class():
    clf = linear_pair()
    with pytest.raises(ValueError, match="unreachable"):
        clf.calibrate_thresholds([[-1.0, 0.0], [-2.0, 0.0], [-3.0, 0.0]], [1, 0, 0], 0.5)
    with pytest.raises(ValueError, match="no positives"):
        clf.calibrate_thresholds([[1.0, 0.0]], [0], 0.1)
    with pytest.raises(ValueError):
        clf.calibrate_thresholds([[1.0, 0.0], [-1.0, 0]], [0, 1], 1.0)


def test_calibration_monotone(three_blobs):
    clf = OneVsAllSVM(gamma=0.3).fit(three_blobs.X[::2], three_blobs.y[::2])
    Xv, yv = three_blobs.X[1::2], three_blobs.y[1::2]
    prev_t, prev_recall = np.zeros(3), np.ones(3)
    for inc in (0.0, 0.05, 0.1, 0.2, 0.4):
        c = clf.with_reject(True)
        c.calibrate_thresholds(Xv, yv, inc)
        recall = np.array([np.mean(c.predict(Xv[yv == k]) == k) for k in range(3)])
        assert np.all(c.thresholds_ >= prev_t) and np.all(recall <= prev_recall)
        prev_t, prev_recall = c.thresholds_, recall


def test_cv_grid_sizes():
    ds = make_blobs(c=3, d=2, n_per_class=9, seed=1)
    _, _, table = cv_select(ds.X, ds.y, kernel="rbf", C_grid=DEFAULT_C_GRID,
                            gamma_grid=DEFAULT_GAMMA_GRID, folds=3)
    assert len(table) == 35
    _, g, table = cv_select(ds.X, ds.y, kernel="linear", C_grid=DEFAULT_C_GRID,
                            gamma_grid=DEFAULT_GAMMA_GRID)
    assert len(table) == 7 and g is None
    C, g, table = cv_select(ds.X, ds.y, C_grid=[3.0], gamma_grid=[0.2])
    assert (C, g, len(table)) == (3.0, 0.2, 1)
    assert set(table[0]) == {"C", "gamma", "mean_accuracy", "fold_0", "fold_1", "fold_2"}


def test_cv_ties_prefer_small_values():
    ds = make_blobs(c=2, d=2, n_per_class=12, centers=[[0, 0], [20, 20]], spread=0.1, seed=0)
    C, g, table = cv_select(ds.X, ds.y, C_grid=[10.0, 1.0], gamma_grid=[0.1, 0.01])
    assert all(r["mean_accuracy"] == 1.0 for r in table)
    assert (C, g) == (1.0, 0.01)


def test_cv_fold_missing_class():
    X = np.arange(7.0)[:, None]
    with pytest.raises(ValueError):
        cv_select(X, [0, 0, 0, 0, 0, 1, 1], folds=3, C_grid=[1.0], gamma_grid=[1.0])


def test_estimator_api(three_blobs):
    clf = OneVsAllSVM(C=2.0, gamma=0.3)
    params = clf.get_params()
    assert params["C"] == 2.0 and params["kernel"] == "rbf"
    c2 = clone(clf).set_params(C=5.0)
    assert c2.C == 5.0 and clf.C == 2.0
    assert clf.fit(three_blobs.X, three_blobs.y).score(three_blobs.X, three_blobs.y) >= 0.99


def test_standardize_stage_recorded(three_blobs):
    clf = OneVsAllSVM(gamma=0.3, standardize=True).fit(three_blobs.X * 100, three_blobs.y)
    Z = clf.feature_map_.transform(three_blobs.X * 100)
    np.testing.assert_allclose(Z.mean(0), 0.0, atol=1e-10)
    np.testing.assert_allclose(Z.std(0), 1.0, atol=1e-10)
    assert clf.score(three_blobs.X * 100, three_blobs.y) >= 0.99


@pytest.mark.parametrize("kernel", ["linear", "rbf"])
def test_model_roundtrip(tmp_path, three_blobs, kernel):
    fmap = ComposedMap([AffineMap(2, 4, seed=3), TanhRandomMap(4, 3, seed=4)])
    clf = OneVsAllSVM(kernel=kernel, gamma=0.5, feature_map=fmap, standardize=True)
    clf = clf.fit(three_blobs.X, three_blobs.y).with_reject(True, thresholds=[0.1, 0.0, 0.3])
    p = tmp_path / "model.json"
    save_model(clf, p)
    back = load_model(p)
    np.testing.assert_array_equal(back.decision_function(three_blobs.X),
                                  clf.decision_function(three_blobs.X))
    assert back.reject and back.predict(three_blobs.X).tolist() == clf.predict(three_blobs.X).tolist()
    head = json.loads(p.read_text())
    n_sv, m = clf.support_vectors_.shape
    assert head["manifest"]["n_sv"] == n_sv and head["m"] == m and head["c"] == 3
    blob = (tmp_path / head["blob"]).read_bytes()
    assert blob[: 8 * n_sv * m] == clf.support_vectors_.astype("<f8").tobytes()


def test_model_blob_size_checked(tmp_path, blob_clf):
    p = tmp_path / "m.json"
    save_model(blob_clf, p)
    (tmp_path / "m.bin").write_bytes((tmp_path / "m.bin").read_bytes()[:-8])
    with pytest.raises(ValueError, match="blob"):
        load_model(p)
