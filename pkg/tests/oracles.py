"""Reference implementations used only by the tests.

These are deliberately written without reusing package internals so a
shared bug cannot make both sides agree.
"""

import math

import numpy as np

from emoscore.model import ModelConfig, ModelParams, backbone
from emoscore.synthdata import SynthSpec, utterance
from emoscore.train import OptimizerState, TrainConfig, adam_step, head_gradient


def head_loss(Z, Y, W, b):
    """Batch MSE of a linear head, evaluated in float64."""
    Z, Y, W, b = (np.asarray(a, dtype=np.float64) for a in (Z, Y, W, b))
    P = Z @ W.T + b - Y
    return float((P * P).mean())


def finite_difference_grad(Z, Y, W, b, eps=1e-4):
    """Central differences of :func:`head_loss` in every head coordinate."""
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    gW = np.zeros_like(W)
    gb = np.zeros_like(b)
    for idx in np.ndindex(W.shape):
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += eps
        Wm[idx] -= eps
        gW[idx] = (head_loss(Z, Y, Wp, b) - head_loss(Z, Y, Wm, b)) / (2 * eps)
    for j in range(b.size):
        bp, bm = b.copy(), b.copy()
        bp[j] += eps
        bm[j] -= eps
        gb[j] = (head_loss(Z, Y, W, bp) - head_loss(Z, Y, W, bm)) / (2 * eps)
    return gW, gb


def gradient_instance(seed):
    """Random single-precision head problem with h2 <= 32 and batch <= 8."""
    r = np.random.default_rng([seed, 77])
    n = int(r.integers(1, 9))
    h = int(r.integers(1, 33))
    Z = np.maximum(r.normal(size=(n, h)), 0).astype(np.float32)
    Y = r.uniform(1, 5, (n, 8)).astype(np.float32)
    W = r.uniform(-0.3, 0.3, (8, h)).astype(np.float32)
    b = r.uniform(-0.3, 0.3, 8).astype(np.float32)
    return Z, Y, W, b


def relative_error(a, b):
    a = np.concatenate([np.ravel(x) for x in a]).astype(np.float64)
    b = np.concatenate([np.ravel(x) for x in b]).astype(np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def least_squares_optimum(Z, Y):
    """Minimum head MSE via the normal equations.

    All-zero columns (dead ReLU units) are dropped first so the system is
    full rank and can be solved directly.
    """
    Z = np.asarray(Z, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    live = np.any(Z != 0, axis=0)
    A = np.hstack([Z[:, live], np.ones((len(Z), 1))])
    sol = np.linalg.solve(A.T @ A, A.T @ Y)
    R = A @ sol - Y
    return float((R * R).mean())


CONVEX_MODEL = ModelConfig(hidden=(64, 8), seed=0)


def convex_head_problem(seed, n=32):
    """Penultimate activations and labels for ``n`` synthetic utterances."""
    spec = SynthSpec(n_train_pool=n, n_test=0, seed=seed)
    B, c = spec.resolved_map()
    params = ModelParams.init(CONVEX_MODEL)
    feats, labels = zip(*(utterance(spec, i, B, c) for i in range(n)))
    Z = np.stack([backbone(X, params, CONVEX_MODEL)[1] for X in feats])
    return params, Z, np.stack(labels)


def full_batch_adam(params, Z, Y, cfg, steps):
    """Run ``steps`` full-batch Adam updates; return the loss before each step and the final loss."""
    state = OptimizerState.create(params, cfg)
    losses = []
    for _ in range(steps):
        W, b = params["fc3.W"], params["fc3.b"]
        y_hat = np.asarray(Z, dtype=np.float64) @ W.astype(np.float64).T + b
        losses.append(head_loss(Z, Y, W, b))
        dW, db = head_gradient(Z, Y, y_hat)
        adam_step(params, {"fc3.W": dW, "fc3.b": db}, state, cfg)
    losses.append(head_loss(Z, Y, params["fc3.W"], params["fc3.b"]))
    return losses


CONVEX_ADAM = TrainConfig(lr0=0.3, weight_decay=0.0, min_lr=0.0)


def naive_rmse(pred, truth):
    """Double-loop RMSE over every (utterance, emotion) cell."""
    total = 0.0
    count = 0
    for i in range(len(pred)):
        for j in range(len(pred[i])):
            d = float(pred[i][j]) - float(truth[i][j])
            total += d * d
            count += 1
    return math.sqrt(total / count)
