import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import expit

from ehrfm.errors import ConfigError, DataError
from ehrfm.probe import (ProbeModel, default_c_grid, fit_probe,
                         fit_probe_single, predict_risk, read_probe,
                         validation_log_loss, write_probe)


def reference_objective(X, y, C):
    def f(wb):
        w, b = wb[:-1], wb[-1]
        z = X @ w + b
        loss = np.mean(np.logaddexp(0.0, z) - y * z)
        return loss + (w @ w) / (2.0 * C * len(y))
    return f


def test_solver_matches_scipy_reference():
    rng = np.random.default_rng(127)
    for trial in range(10):
        n, d = int(rng.integers(30, 120)), int(rng.integers(2, 8))
        X = rng.normal(size=(n, d))
        w_true = rng.normal(size=d)
        y = (expit(X @ w_true) > rng.uniform(size=n)).astype(float)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        C = float(rng.choice([0.01, 0.1, 1.0, 10.0]))
        model = fit_probe_single(X, y, C)
        assert model.converged
        f = reference_objective(X, y, C)
        ref = minimize(f, np.zeros(d + 1), method="L-BFGS-B",
                       options={"maxiter": 2000, "ftol": 1e-14, "gtol": 1e-10})
        ours = f(np.concatenate([model.weights, [model.bias]]))
        # our Newton solution is at least as good as the L-BFGS reference
        assert ours <= ref.fun + 1e-8


def test_regularization_shrinks_weights():
    rng = np.random.default_rng(131)
    X = rng.normal(size=(200, 4))
    y = (X[:, 0] > 0).astype(float)
    tight = fit_probe_single(X, y, C=1e-4)
    loose = fit_probe_single(X, y, C=10.0)
    assert np.linalg.norm(tight.weights) < np.linalg.norm(loose.weights)


def test_separable_data_converges_and_ranks_perfectly():
    X = np.array([[0.0], [0.1], [0.9], [1.0]])
    y = np.array([0.0, 0.0, 1.0, 1.0])
    model = fit_probe_single(X, y, C=1.0)
    assert model.converged
    risks = predict_risk(model, X)
    assert np.all(np.diff(risks) > 0)


def test_single_class_bias_only_model():
    X = np.random.default_rng(0).normal(size=(10, 3))
    y = np.ones(10)
    model = fit_probe_single(X, y, C=1.0)
    assert np.all(model.weights == 0.0)
    assert model.converged
    risk = predict_risk(model, X[0])
    assert 0.5 < risk < 1.0


def test_input_validation():
    X = np.zeros((5, 2))
    with pytest.raises(DataError):
        fit_probe_single(X, np.zeros(4), C=1.0)
    with pytest.raises(ConfigError):
        fit_probe_single(X, np.zeros(5), C=0.0)
    with pytest.raises(DataError):
        fit_probe_single(np.zeros((1, 2)), np.zeros(1), C=1.0)
    model = fit_probe_single(np.random.default_rng(1).normal(size=(20, 3)),
                             np.r_[np.zeros(10), np.ones(10)], C=1.0)
    with pytest.raises(DataError):
        predict_risk(model, np.zeros(4))


def test_default_c_grid_shape():
    grid = default_c_grid()
    assert len(grid) == 20
    assert grid[0] == pytest.approx(1e-5)
    assert grid[-1] == pytest.approx(10.0)
    assert np.all(np.diff(grid) > 0)


def test_fit_probe_selects_by_validation_loss():
    rng = np.random.default_rng(137)
    X = rng.normal(size=(150, 5))
    w_true = np.array([2.0, -1.0, 0.0, 0.0, 0.5])
    y = (expit(X @ w_true) > rng.uniform(size=150)).astype(float)
    Xv = rng.normal(size=(80, 5))
    yv = (expit(Xv @ w_true) > rng.uniform(size=80)).astype(float)
    model, table = fit_probe(X, y, Xv, yv, c_grid=(0.001, 0.1, 10.0))
    assert len(table) == 3
    losses = {row["C"]: row["valid_logloss"] for row in table}
    assert losses[model.C] == min(losses.values())
    for row in table:
        assert row["valid_logloss"] == pytest.approx(
            validation_log_loss(fit_probe_single(X, y, row["C"]), Xv, yv), rel=1e-9)


def test_fit_probe_deterministic():
    rng = np.random.default_rng(139)
    X = rng.normal(size=(60, 4))
    y = (X[:, 0] + 0.3 * rng.normal(size=60) > 0).astype(float)
    m1, _ = fit_probe(X, y, X, y, c_grid=(0.1, 1.0))
    m2, _ = fit_probe(X, y, X, y, c_grid=(0.1, 1.0))
    assert np.array_equal(m1.weights, m2.weights)
    assert m1.bias == m2.bias
    assert m1.C == m2.C


def test_probe_io_round_trip(tmp_path):
    rng = np.random.default_rng(149)
    X = rng.normal(size=(40, 6))
    y = (X[:, 1] > 0).astype(float)
    model = fit_probe_single(X, y, C=0.5)
    path = tmp_path / "probe.csv"
    write_probe(path, model)
    back = read_probe(path)
    assert np.array_equal(back.weights, model.weights)
    assert back.bias == model.bias
    assert back.C == model.C
    assert np.array_equal(predict_risk(back, X), predict_risk(model, X))
