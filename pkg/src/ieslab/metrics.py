"""Loss-landscape diagnostics: gradient norm, SAM value, top Hessian eigenvalue.

The sharpness metrics work on any *objective*: a callable mapping a list of
parameter arrays to ``(loss, grads)``. ``mlp_objective`` builds one for a
model on a fixed batch; tests plug in closed-form quadratics.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import models

Objective = Callable[[list], tuple]

DEFAULT_RHO = 0.05
DEFAULT_POWER_ITERS = 20
DEFAULT_POWER_EPS = 1e-10
# total parameter displacement of the HVP finite difference; larger steps
# cross ReLU kinks on full-size nets and the estimate stops being symmetric
FD_STEP = 1e-5


def batch_grad_norm(grads: Sequence[np.ndarray]) -> float:
    """sqrt of the summed squared L2 norms of all gradient tensors."""
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))


def mlp_objective(params: models.ModelParams, x, labels) -> Objective:
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)

    def objective(arrays):
        p = models.ModelParams.from_arrays(arrays)
        return models.loss_and_grads(p, x, labels)

    return objective


def _axpy(alpha, xs, ys):
    return [y + alpha * x for x, y in zip(xs, ys)]


def _dot(xs, ys):
    return float(sum(np.vdot(x, y) for x, y in zip(xs, ys)))


def sam_value(objective: Objective, params: Sequence[np.ndarray], rho: float = DEFAULT_RHO) -> float:
    """``L(w + rho * g / |g|) - L(w)``; 0 at a stationary point.

    ``params`` is never modified; the perturbed point is a fresh copy.
    """
    if not rho > 0:
        raise ValueError(f"rho must be > 0, got {rho}")
    params = list(params)
    loss, grads = objective(params)
    norm = batch_grad_norm(grads)
    if norm == 0:
        return 0.0
    perturbed_loss, _ = objective(_axpy(rho / norm, grads, params))
    return float(perturbed_loss - loss)


def hvp(objective: Objective, params: Sequence[np.ndarray], v: Sequence[np.ndarray],
        fd_step: float = FD_STEP) -> list[np.ndarray]:
    """Hessian-vector product by central differences of the gradient."""
    params = list(params)
    v = [np.asarray(a, dtype=np.float64) for a in v]
    vnorm = np.sqrt(_dot(v, v))
    if vnorm == 0:
        raise ValueError("hvp direction must be nonzero")
    eps = fd_step / vnorm
    _, g_plus = objective(_axpy(eps, v, params))
    _, g_minus = objective(_axpy(-eps, v, params))
    out = [(gp - gm) / (2 * eps) for gp, gm in zip(g_plus, g_minus)]
    if not all(np.all(np.isfinite(o)) for o in out):
        raise FloatingPointError("hvp produced a non-finite value")
    return out


def power_iteration_max_eig(objective: Objective, params: Sequence[np.ndarray],
                            n_iters: int = DEFAULT_POWER_ITERS, eps: float = DEFAULT_POWER_EPS,
                            seed: int = 0, fd_step: float = FD_STEP, return_history: bool = False):
    """Largest Hessian eigenvalue by power iteration on HVPs.

    Each iteration takes the Rayleigh quotient of the current unit vector and
    moves to the normalized HVP. Returns 0 if an HVP vanishes.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    params = list(params)
    rng = np.random.default_rng(seed)
    v = [rng.standard_normal(p.shape) for p in params]
    norm = np.sqrt(_dot(v, v))
    v = [a / (norm + eps) for a in v]
    history = []
    estimate = 0.0
    for _ in range(n_iters):
        hv = hvp(objective, params, v, fd_step)
        hv_norm = np.sqrt(_dot(hv, hv))
        if hv_norm == 0:
            estimate = 0.0
            history.append(estimate)
            break
        estimate = _dot(v, hv) / _dot(v, v)
        history.append(estimate)
        v = [a / (hv_norm + eps) for a in hv]
    return (estimate, history) if return_history else estimate


def error_rate(correct) -> float:
    correct = np.asarray(correct)
    return float(1.0 - correct.mean()) if correct.size else 0.0
