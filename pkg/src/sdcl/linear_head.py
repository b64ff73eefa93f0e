"""Weighted multinomial softmax regression on frozen embeddings.

One fitter serves both the linear probe and the best-linear supervised loss:
the objective is convex, so a deterministic full-batch quasi-Newton descent
(L-BFGS with monotone line search) from a caller-chosen start reaches any
requested gradient-norm tolerance or reports that the budget ran out.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize


@dataclass
class SoftmaxFit:
    weights: np.ndarray          # (K, D)
    intercept: Optional[np.ndarray]  # (K,) or None
    loss: float
    grad_norm: float
    converged: bool


def _loss_grad(theta, x, y_onehot, sample_weight, k, d, fit_intercept, l2):
    w = theta[: k * d].reshape(k, d)
    b = theta[k * d :] if fit_intercept else np.zeros(k)
    logits = x @ w.T + b
    logits -= logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(logits).sum(axis=1))
    log_probs = logits - log_z[:, None]
    loss = -float(np.sum(sample_weight * np.sum(y_onehot * log_probs, axis=1)))
    probs = np.exp(log_probs)
    delta = sample_weight[:, None] * (probs - y_onehot)
    grad_w = delta.T @ x
    if l2 > 0:
        loss += 0.5 * l2 * float(np.sum(w * w))
        grad_w += l2 * w
    if fit_intercept:
        grad = np.concatenate([grad_w.ravel(), delta.sum(axis=0)])
    else:
        grad = grad_w.ravel()
    return loss, grad


def fit_softmax(
    x: np.ndarray,
    y: np.ndarray,
    *,
    num_classes: Optional[int] = None,
    sample_weight: Optional[np.ndarray] = None,
    fit_intercept: bool = True,
    init_weights: Optional[np.ndarray] = None,
    l2: float = 0.0,
    gtol: float = 1e-6,
    max_iter: int = 2000,
) -> SoftmaxFit:
    """Minimize weighted cross-entropy; sample weights are normalized to mean 1."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, d = x.shape
    k = int(num_classes if num_classes is not None else y.max() + 1)
    if sample_weight is None:
        sample_weight = np.full(n, 1.0 / n)
    else:
        sample_weight = np.asarray(sample_weight, dtype=np.float64)
        sample_weight = sample_weight / sample_weight.sum()
    y_onehot = np.zeros((n, k))
    y_onehot[np.arange(n), y] = 1.0

    w0 = np.zeros((k, d)) if init_weights is None else np.asarray(init_weights, dtype=np.float64)
    theta0 = np.concatenate([w0.ravel(), np.zeros(k)]) if fit_intercept else w0.ravel()

    result = minimize(
        _loss_grad,
        theta0,
        args=(x, y_onehot, sample_weight, k, d, fit_intercept, l2),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": gtol, "ftol": 0.0, "maxls": 50},
    )
    theta = result.x
    loss, grad = _loss_grad(theta, x, y_onehot, sample_weight, k, d, fit_intercept, l2)
    # line searches are monotone, but guard against any pathological step
    loss0, _ = _loss_grad(theta0, x, y_onehot, sample_weight, k, d, fit_intercept, l2)
    if loss > loss0:
        theta, loss = theta0, loss0
        _, grad = _loss_grad(theta, x, y_onehot, sample_weight, k, d, fit_intercept, l2)
    grad_norm = float(np.linalg.norm(grad, ord=np.inf))
    return SoftmaxFit(
        weights=theta[: k * d].reshape(k, d).copy(),
        intercept=theta[k * d :].copy() if fit_intercept else None,
        loss=float(loss),
        grad_norm=grad_norm,
        converged=grad_norm <= gtol,
    )


def predict_classes(fit: SoftmaxFit, x: np.ndarray) -> np.ndarray:
    logits = np.asarray(x) @ fit.weights.T
    if fit.intercept is not None:
        logits = logits + fit.intercept
    return np.argmax(logits, axis=1)
