import numpy as np
import pytest
from scipy import sparse
from scipy.special import expit

from ehrfm.boost import (BoostConfig, BoostedModel, fit_gbm, predict_proba,
                         read_gbm, tune_gbm, valid_logloss, write_gbm)
from ehrfm.errors import ConfigError, DataError


def logloss(y, p):
    p = np.clip(p, 1e-15, 1 - 1e-15)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def make_problem(rng, n=400, d=12, informative=4):
    X = sparse.random(n, d, density=0.4, random_state=np.random.RandomState(int(rng.integers(2**31))),
                      data_rvs=lambda k: np.abs(np.random.default_rng(0).normal(2.0, 1.0, size=k)))
    X = X.tocsr()
    w = np.zeros(d)
    w[:informative] = rng.normal(0, 1.5, size=informative)
    z = X @ w
    y = (expit(z - np.median(z)) > rng.uniform(size=n)).astype(float)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    return X, y


def test_config_validation():
    with pytest.raises(ConfigError):
        BoostConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        BoostConfig(num_leaves=1)
    with pytest.raises(ConfigError):
        BoostConfig(boosting_type="dart")
    with pytest.raises(ConfigError):
        BoostConfig(max_bins=300)


def test_training_loss_decreases_monotonically():
    rng = np.random.default_rng(151)
    X, y = make_problem(rng)
    cfg = BoostConfig(learning_rate=0.2, n_estimators=30, min_samples_leaf=5)
    model = fit_gbm(X, y, config=cfg)
    assert len(model.trees) > 0
    # replay the stagewise predictions: each appended tree lowers train loss
    margins = np.full(len(y), model.base_score)
    Xc = X.tocsc()
    prev = logloss(y, expit(margins))
    from ehrfm.boost import _tree_predict
    for tree in model.trees:
        margins = margins + cfg.learning_rate * _tree_predict(tree, Xc)
        cur = logloss(y, expit(margins))
        assert cur <= prev + 1e-9
        prev = cur


def test_beats_constant_baseline_on_learnable_signal():
    rng = np.random.default_rng(157)
    X, y = make_problem(rng, n=600)
    model = fit_gbm(X, y, config=BoostConfig(n_estimators=60, min_samples_leaf=5))
    p = predict_proba(model, X)
    base = logloss(y, np.full(len(y), y.mean()))
    assert logloss(y, p) < base - 0.05


def test_single_leaf_stump_matches_hand_computation():
    # one feature, perfect split at x > 0; depth-limited to a stump
    X = sparse.csr_matrix(np.array([[0.0], [0.0], [1.0], [1.0]]))
    y = np.array([0.0, 0.0, 1.0, 1.0])
    cfg = BoostConfig(learning_rate=1.0, n_estimators=1, num_leaves=2,
                      min_samples_leaf=1, early_stopping_rounds=50)
    model = fit_gbm(X, y, config=cfg)
    assert model.base_score == pytest.approx(0.0)  # prevalence 0.5
    assert len(model.trees) == 1
    tree = model.trees[0]
    assert tree.n_leaves == 2
    # with p=0.5 everywhere: g = p - y, h = p(1-p) = 0.25 per sample
    # leaf value = -sum(g) / (sum(h) + 1); each leaf holds 2 samples
    expect = 0.5 * 2 / (0.25 * 2 + 1.0)
    values = sorted(tree.value[tree.is_leaf])
    assert values[0] == pytest.approx(-expect, rel=1e-12)
    assert values[1] == pytest.approx(expect, rel=1e-12)


def test_single_class_constant_model():
    X = sparse.csr_matrix(np.ones((5, 2)))
    model = fit_gbm(X, np.ones(5), config=BoostConfig())
    assert model.trees == []
    p = predict_proba(model, X)
    assert np.all(p > 0.99)


def test_early_stopping_uses_validation():
    rng = np.random.default_rng(163)
    X, y = make_problem(rng, n=500)
    Xv, yv = make_problem(rng, n=200)
    cfg = BoostConfig(learning_rate=0.3, n_estimators=400, min_samples_leaf=5,
                      early_stopping_rounds=5)
    model = fit_gbm(X, y, Xv, yv, cfg)
    assert model.n_trees_used < 400
    # the kept prefix is the validation optimum: adding the next tree on the
    # full run should not beat it
    full = fit_gbm(X, y, config=BoostConfig(learning_rate=0.3, n_estimators=model.n_trees_used,
                                            min_samples_leaf=5))
    assert valid_logloss(model, Xv, yv) <= valid_logloss(full, Xv, yv) + 1e-6


def test_deterministic_fit():
    rng = np.random.default_rng(167)
    X, y = make_problem(rng)
    cfg = BoostConfig(n_estimators=20, min_samples_leaf=5)
    m1 = fit_gbm(X, y, config=cfg)
    m2 = fit_gbm(X, y, config=cfg)
    assert len(m1.trees) == len(m2.trees)
    assert np.array_equal(predict_proba(m1, X), predict_proba(m2, X))


def test_missing_histogram_bins_handle_unseen_values():
    # train on {0, 1}, predict on larger values: routing stays defined
    X = sparse.csr_matrix(np.array([[0.0], [0.0], [1.0], [1.0]]))
    y = np.array([0.0, 0.0, 1.0, 1.0])
    model = fit_gbm(X, y, config=BoostConfig(learning_rate=0.5, n_estimators=3,
                                             min_samples_leaf=1))
    X_new = sparse.csr_matrix(np.array([[5.0], [0.5], [-1.0]]))
    p = predict_proba(model, X_new)
    assert np.isfinite(p).all()
    assert p[0] > p[2]  # larger value routes with the positive side


def test_tune_gbm_picks_lowest_valid_loss():
    rng = np.random.default_rng(173)
    X, y = make_problem(rng, n=400)
    Xv, yv = make_problem(rng, n=150)
    grid = (BoostConfig(learning_rate=0.05, n_estimators=10, min_samples_leaf=5),
            BoostConfig(learning_rate=0.3, n_estimators=60, min_samples_leaf=5))
    model, table = tune_gbm(grid, X, y, Xv, yv)
    assert len(table) == 2
    best_row = min(table, key=lambda r: r["valid_logloss"])
    assert valid_logloss(model, Xv, yv) == pytest.approx(best_row["valid_logloss"], rel=1e-12)
    with pytest.raises(ConfigError):
        tune_gbm((), X, y, Xv, yv)


def test_gbm_io_round_trip(tmp_path):
    rng = np.random.default_rng(179)
    X, y = make_problem(rng, n=300)
    model = fit_gbm(X, y, config=BoostConfig(n_estimators=10, min_samples_leaf=5))
    path = tmp_path / "model.gbm"
    write_gbm(path, model)
    back = read_gbm(path)
    assert back.base_score == model.base_score
    assert back.n_trees_used == model.n_trees_used
    assert back.dict_digest == model.dict_digest
    assert np.array_equal(predict_proba(back, X), predict_proba(model, X))


def test_input_validation():
    X = sparse.csr_matrix(np.zeros((3, 2)))
    with pytest.raises(DataError):
        fit_gbm(X, np.zeros(2))
    with pytest.raises(DataError):
        fit_gbm(sparse.csr_matrix(np.zeros((1, 2))), np.zeros(1))
