"""Linear probes: L2 logistic regression on frozen representations.

The objective is mean log loss + (1 / (2 C n)) * ||w||^2 with an unpenalized
bias, minimized by damped Newton iterations (IRLS with a backtracking line
search). The problem is smooth and convex, so Newton reaches the 1e-6
gradient-norm target in a handful of iterations at probe dimensions.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError, NumericError

log = logging.getLogger(__name__)

GRAD_TOL = 1e-6
MAX_ITER = 10_000
PREVALENCE_CLAMP = 1e-3


def default_c_grid() -> np.ndarray:
    """10^x for x over [-5, 1] in 20 equal steps."""
    return 10.0 ** np.linspace(-5.0, 1.0, 20)


@dataclass
class ProbeModel:
    weights: np.ndarray
    bias: float
    C: float
    converged: bool
    n_iter: int
    grad_norm: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.weights)) or not np.isfinite(self.bias):
            raise NumericError("probe solution is not finite")


def _objective(X, y, w, b, C):
    z = X @ w + b
    # softplus(z) - y*z is the per-sample negative log-likelihood
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    return loss + float(w @ w) / (2.0 * C * len(y))


def _gradient(X, y, w, b, C):
    p = expit(X @ w + b)
    r = p - y
    gw = X.T @ r / len(y) + w / (C * len(y))
    gb = float(r.mean())
    return gw, gb, p


def fit_probe_single(X, y, C: float, max_iter: int = MAX_ITER,
                     tol: float = GRAD_TOL) -> ProbeModel:
    """Fit one probe at a fixed C. Single-class labels get a bias-only model."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise DataError("fit_probe: X must be (n, d) aligned with labels")
    if len(y) < 2:
        raise DataError("fit_probe: need at least 2 samples")
    if C <= 0:
        raise ConfigError(f"C must be positive, got {C!r}")
    n, d = X.shape
    if y.min() == y.max():
        prev = min(max(float(y.mean()), PREVALENCE_CLAMP), 1.0 - PREVALENCE_CLAMP)
        log.warning("fit_probe: single-class labels; bias-only model at clamped log-odds")
        return ProbeModel(np.zeros(d), float(np.log(prev / (1 - prev))), C, True, 0, 0.0)
    w = np.zeros(d)
    b = 0.0
    obj = _objective(X, y, w, b, C)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        gw, gb, p = _gradient(X, y, w, b, C)
        grad_norm = float(np.sqrt(gw @ gw + gb * gb))
        if grad_norm <= tol:
            return ProbeModel(w, float(b), C, True, n_iter - 1, grad_norm)
        wts = p * (1.0 - p)
        Xw = X * wts[:, None]
        H = np.empty((d + 1, d + 1))
        H[:d, :d] = X.T @ Xw / n
        H[:d, :d][np.diag_indices(d)] += 1.0 / (C * n)
        H[:d, d] = Xw.sum(axis=0) / n
        H[d, :d] = H[:d, d]
        H[d, d] = wts.sum() / n
        g = np.concatenate([gw, [gb]])
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.solve(H + 1e-10 * np.eye(d + 1), g)
        descent = float(g @ step)
        if descent <= 0:
            step = g
            descent = float(g @ g)
        t = 1.0
        for _ in range(60):
            w_new = w - t * step[:d]
            b_new = b - t * step[d]
            obj_new = _objective(X, y, w_new, b_new, C)
            if obj_new <= obj - 1e-4 * t * descent:
                break
            t *= 0.5
        else:
            # no productive step left; report where we stopped
            return ProbeModel(w, float(b), C, False, n_iter, grad_norm)
        w, b, obj = w_new, float(b_new), obj_new
    gw, gb, _ = _gradient(X, y, w, b, C)
    grad_norm = float(np.sqrt(gw @ gw + gb * gb))
    return ProbeModel(w, float(b), C, grad_norm <= tol, n_iter, grad_norm)


def predict_risk(probe: ProbeModel, reps) -> np.ndarray:
    """sigmoid(w . r + b) per representation row."""
    reps = np.asarray(reps, dtype=np.float64)
    single = reps.ndim == 1
    if single:
        reps = reps[None, :]
    if reps.shape[1] != len(probe.weights):
        raise DataError(
            f"predict_risk: dimension mismatch ({reps.shape[1]} vs {len(probe.weights)})")
    out = expit(reps @ probe.weights + probe.bias)
    return float(out[0]) if single else out


def validation_log_loss(probe: ProbeModel, X, y) -> float:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = X @ probe.weights + probe.bias
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def fit_probe(X_train, y_train, X_valid, y_valid, c_grid=None,
              max_iter: int = MAX_ITER) -> tuple[ProbeModel, list[dict]]:
    """Fit the C grid and keep the probe with the lowest validation log loss.

    Ties go to the smaller C. Returns the winner plus one grid-table row per
    C (C, converged, iterations, train/valid loss).
    """
    grid = np.asarray(default_c_grid() if c_grid is None else c_grid, dtype=np.float64)
    if grid.size == 0:
        raise ConfigError("empty C grid")
    order = np.argsort(grid)
    best = None
    best_loss = np.inf
    table = []
    for C in grid[order]:
        model = fit_probe_single(X_train, y_train, float(C), max_iter=max_iter)
        vloss = validation_log_loss(model, X_valid, y_valid)
        table.append({
            "C": float(C),
            "converged": model.converged,
            "iterations": model.n_iter,
            "grad_norm": model.grad_norm,
            "valid_logloss": vloss,
        })
        if vloss < best_loss:
            best, best_loss = model, vloss
    return best, table


def write_probe(path: str | os.PathLike, probe: ProbeModel) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        d = len(probe.weights)
        w.writerow(["C", "converged", "iterations", "grad_norm", "bias"]
                   + [f"w{i}" for i in range(d)])
        w.writerow([repr(probe.C), int(probe.converged), probe.n_iter,
                    repr(probe.grad_norm), repr(probe.bias)]
                   + [repr(float(v)) for v in probe.weights])


def read_probe(path: str | os.PathLike) -> ProbeModel:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        row = next(reader, None)
    if header is None or row is None or len(header) != len(row) or len(row) < 5:
        raise DataError(f"{path}: malformed probe file")
    return ProbeModel(
        weights=np.array([float(v) for v in row[5:]]),
        bias=float(row[4]),
        C=float(row[0]),
        converged=bool(int(row[1])),
        n_iter=int(row[2]),
        grad_norm=float(row[3]),
    )
