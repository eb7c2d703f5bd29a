import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from busdensity.classifiers import (
    ForestConfig, ForestModel, LogRegConfig, LogRegModel, MlpConfig, MlpModel, ModelFileError, NotFittedError,
    Tree, load_model, predict_proba, read_predictions, save_model, train_forest, train_logreg, train_mlp,
    write_predictions,
)
from busdensity.classifiers.logreg import objective, smooth_loss_grad, soft_threshold
from busdensity.classifiers.mlp import init_params, loss_and_grad
from busdensity.density import one_hot
from oracles import finite_difference, rel_error


def _blobs(rng, n_per=30, d=16, sep=3.0):
    centers = rng.normal(size=(4, d)) * sep
    X = np.vstack([c + rng.normal(size=(n_per, d)) for c in centers])
    y = np.repeat(np.arange(4), n_per)
    return X, y


def _histograms(rng, n=200):
    """Histogram-like rows with a class-dependent shift of mass."""
    y = rng.integers(0, 4, n)
    X = rng.dirichlet(np.ones(16), n)
    X[:, 4 * 0:4] += 0.1 * (y == 0)[:, None]
    X[:, 12:16] += 0.1 * (y == 3)[:, None]
    return X / X.sum(axis=1, keepdims=True), y


# --- logistic regression -------------------------------------------------------------------


@pytest.mark.parametrize("l2", [0.0, 0.3])
def test_logreg_gradient_matches_finite_differences(rng, l2):
    X, Y = rng.normal(size=(8, 16)), one_hot(rng.integers(0, 4, 8))
    W, b = rng.normal(size=(4, 16)) * 0.3, rng.normal(size=4)
    _, gW, gb = smooth_loss_grad(W, b, X, Y, l2)
    fd = finite_difference(lambda: smooth_loss_grad(W, b, X, Y, l2)[0], {"W": W, "b": b}, eps=1e-5)
    assert rel_error(gW, fd["W"]) < 1e-5 and rel_error(gb, fd["b"]) < 1e-5


def test_logreg_separable_training_accuracy(rng):
    X, y = _blobs(rng)
    m = train_logreg(X, y)
    assert np.mean(m.predict_proba(X).argmax(1) == y) == 1.0


def test_logreg_objective_monotone(rng):
    X, y = _histograms(rng)
    m = train_logreg(X, y, LogRegConfig(max_iter=300))
    h = np.array(m.objective_history)
    assert np.all(np.diff(h) <= 1e-12)
    assert h[-1] == pytest.approx(objective(m.weights, m.bias, X, one_hot(y), m.config), rel=1e-12)


def test_logreg_converges_and_records_iterations(rng):
    X, y = _blobs(rng, sep=0.5)
    m = train_logreg(X, y)
    assert m.converged and 0 < m.n_iter < 10_000


def test_logreg_strong_l2_predicts_priors(rng):
    X, y = _histograms(rng, 120)
    m = train_logreg(X, y, LogRegConfig(C=1e-8, penalty="l2"))
    priors = np.bincount(y, minlength=4) / y.size
    assert np.max(np.abs(m.weights)) < 1e-6
    assert np.allclose(m.predict_proba(X), priors, atol=1e-5)


def test_zero_weight_model_is_uniform(rng):
    m = LogRegModel(np.zeros((4, 16)), np.zeros(4))
    assert np.array_equal(predict_proba(m, rng.random(16)), np.full(4, 0.25))


def test_logreg_label_permutation_equivariance(rng):
    X, y = _histograms(rng, 150)
    perm = np.array([2, 0, 3, 1])
    a = train_logreg(X, y).predict_proba(X)
    b = train_logreg(X, perm[y]).predict_proba(X)
    assert np.allclose(b[:, perm], a, atol=1e-6)


def test_logreg_rejects_bad_input(rng):
    with pytest.raises(ValueError):
        train_logreg(rng.random((5, 16)), np.zeros(5, int))
    X = rng.random((5, 16))
    X[0, 0] = np.nan
    with pytest.raises(ValueError):
        train_logreg(X, np.array([0, 1, 0, 1, 0]))
    with pytest.raises(NotFittedError):
        LogRegModel(None, None).predict_proba(np.zeros(16))


def test_soft_threshold():
    assert soft_threshold(np.array([-2.0, -0.5, 0.5, 3.0]), 1.0).tolist() == [-1.0, 0.0, 0.0, 2.0]


def test_logreg_matches_saga_objective(rng):
    sklearn = pytest.importorskip("sklearn.linear_model")
    X, y = _histograms(rng, 300)
    ours = train_logreg(X, y)
    ref = sklearn.LogisticRegression(penalty="l1", C=10, solver="saga", tol=1e-10, max_iter=100_000).fit(X, y)
    Y = one_hot(y)
    f_ours = objective(ours.weights, ours.bias, X, Y, ours.config)
    f_ref = objective(ref.coef_, ref.intercept_, X, Y, ours.config)
    assert f_ours <= f_ref + 1e-5


# --- random forest -------------------------------------------------------------------------


def _stub_forest(counts):
    t = Tree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([counts], dtype=float))
    return ForestModel([t], 16)


def test_stub_tree_leaf_frequencies():
    assert predict_proba(_stub_forest([3, 1, 0, 0]), np.zeros(16)).tolist() == [0.75, 0.25, 0.0, 0.0]


def test_forest_memorizes_distinct_rows(rng):
    X, y = _histograms(rng, 80)
    m = train_forest(X, y, ForestConfig(n_trees=25))
    assert np.mean(m.predict_proba(X).argmax(1) == y) == 1.0


def test_forest_min_leaf_n_gives_priors(rng):
    X, y = _histograms(rng, 60)
    m = train_forest(X, y, ForestConfig(n_trees=5, min_samples_leaf=60, bootstrap=False))
    assert all(t.n_leaves == 1 for t in m.trees)
    assert np.allclose(m.predict_proba(X), np.bincount(y, minlength=4) / 60)


def test_forest_deterministic_and_thread_independent(rng):
    X, y = _histograms(rng, 100)
    probe = rng.dirichlet(np.ones(16), 50)
    cfg = ForestConfig(n_trees=12, seed=9)
    a = train_forest(X, y, cfg, n_jobs=1).predict_proba(probe)
    b = train_forest(X, y, cfg, n_jobs=4).predict_proba(probe)
    assert np.array_equal(a, b)


def test_forest_output_is_mean_of_tree_frequencies(rng):
    X, y = _histograms(rng, 100)
    m = train_forest(X, y, ForestConfig(n_trees=7))
    probe = rng.dirichlet(np.ones(16), 20)
    manual = np.mean([t.counts[t.apply(probe)] / t.counts[t.apply(probe)].sum(1, keepdims=True) for t in m.trees], axis=0)
    assert np.allclose(m.predict_proba(probe), manual, atol=1e-15)


def test_forest_default_has_200_trees():
    assert ForestConfig().n_trees == 200


# --- MLP -----------------------------------------------------------------------------------


def test_mlp_gradient_matches_finite_differences(rng):
    params = init_params(16, 12, 4, rng)
    X, Y = rng.normal(size=(4, 16)), one_hot(rng.integers(0, 4, 4))
    _, grads = loss_and_grad(params, X, Y, alpha=1e-2)
    fd = finite_difference(lambda: loss_and_grad(params, X, Y, alpha=1e-2)[0], params)
    for k in params:
        assert rel_error(grads[k], fd[k]) < 1e-4, k


def test_mlp_outputs_on_simplex(rng):
    m = MlpModel(init_params(16, 512, 4, rng))
    p = m.predict_proba(rng.normal(size=(1000, 16)) * 5)
    assert np.max(np.abs(p.sum(1) - 1)) < 1e-9 and p.min() >= 0


def test_mlp_separable_and_deterministic(rng):
    X, y = _blobs(rng, 25)
    cfg = MlpConfig(hidden=32, learning_rate=1e-2, max_epochs=200, patience=10, seed=3)
    a = train_mlp(X, y, X, y, cfg)
    b = train_mlp(X, y, X, y, cfg)
    assert a.train_loss == b.train_loss and a.val_loss == b.val_loss
    assert np.mean(a.predict_proba(X).argmax(1) == y) == 1.0
    assert a.best_epoch == int(np.argmin(a.val_loss)) + 1


def test_mlp_early_stopping_respects_patience(rng):
    X, y = _histograms(rng, 100)
    Xv, yv = _histograms(rng, 40)
    m = train_mlp(X, y, Xv, yv, MlpConfig(hidden=8, learning_rate=0.05, max_epochs=400, patience=5))
    assert len(m.val_loss) <= m.best_epoch + 5


# --- persistence and prediction files ------------------------------------------------------


@pytest.mark.parametrize("kind", ["logreg", "forest", "mlp"])
def test_model_roundtrip_exact(tmp_path, rng, kind):
    X, y = _histograms(rng, 80)
    if kind == "logreg":
        m = train_logreg(X, y, LogRegConfig(max_iter=50))
    elif kind == "forest":
        m = train_forest(X, y, ForestConfig(n_trees=4))
    else:
        m = train_mlp(X, y, X, y, MlpConfig(hidden=8, max_epochs=3))
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json", expected_kind=kind)
    probe = rng.dirichlet(np.ones(16), 100)
    assert np.array_equal(back.predict_proba(probe), m.predict_proba(probe))
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["kind"] == kind and doc["data_digest"] == m.data_digest and "hyperparameters" in doc


def test_corrupt_model_file(tmp_path):
    (tmp_path / "m.json").write_text("{not json")
    with pytest.raises(ModelFileError) as exc:
        load_model(tmp_path / "m.json")
    assert exc.value.reason == "bad_model_file"


def test_kind_and_version_mismatch(tmp_path):
    save_model(_stub_forest([1, 1, 0, 0]), tmp_path / "f.json")
    with pytest.raises(ModelFileError) as exc:
        load_model(tmp_path / "f.json", expected_kind="logreg")
    assert exc.value.reason == "kind_mismatch"
    doc = json.loads((tmp_path / "f.json").read_text())
    doc["version"] = 99
    (tmp_path / "f.json").write_text(json.dumps(doc))
    with pytest.raises(ModelFileError) as exc:
        load_model(tmp_path / "f.json")
    assert exc.value.reason == "version_mismatch"


def test_digest_mismatch_warns(tmp_path):
    save_model(_stub_forest([1, 1, 0, 0]), tmp_path / "f.json")
    with pytest.warns(UserWarning):
        load_model(tmp_path / "f.json", expected_digest="deadbeef")


def test_prediction_csv_roundtrip_and_external_rounding(tmp_path, rng):
    p = rng.dirichlet(np.ones(4), 5)
    write_predictions(list("abcde"), list("ppqqr"), p, tmp_path / "p.csv")
    ids, pids, back = read_predictions(tmp_path / "p.csv")
    assert ids == list("abcde") and pids == list("ppqqr") and np.array_equal(back, p)
    (tmp_path / "ext.csv").write_text("image_id,patient_id,pA,pB,pC,pD\nx,p,0.3333333,0.3333333,0.3333333,0\n")
    assert read_predictions(tmp_path / "ext.csv")[2].sum() == pytest.approx(1, abs=1e-15)
    (tmp_path / "bad.csv").write_text("image_id,patient_id,pA,pB,pC,pD\nx,p,0.5,0.5,0.5,0\n")
    with pytest.raises(ValueError):
        read_predictions(tmp_path / "bad.csv")


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_predictions_are_distributions(seed):
    rng = np.random.default_rng(seed)
    m = LogRegModel(rng.normal(size=(4, 16)) * 10, rng.normal(size=4))
    p = predict_proba(m, rng.normal(size=(20, 16)))
    assert np.all(p >= 0) and np.max(np.abs(p.sum(1) - 1)) <= 1e-9
