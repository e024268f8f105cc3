"""Hypergradients of the attacker objective through unrolled SGD.

The reverse pass needs three exact second-order contractions of the training
loss at every stored iterate: the Hessian-vector product in parameter space
and the two mixed products against the poisoning features and labels. All
three come out of one combined primal/tangent sweep: differentiating the
backpropagation pass along a parameter direction v. LeakyReLU has zero second
derivative almost everywhere, so its derivative masks are constants of the
tangent computation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .models import (
    ModelParams,
    _forward_pass,
    _leaky_mask,
    forward,
    grad_loss,
    loss_input_grads,
    mse_loss,
    sgd_train,
)


@dataclass
class HyperGradient:
    """Gradient of the attacker objective w.r.t. one poisoning batch."""

    d_features: np.ndarray  # (b, m)
    d_labels: np.ndarray    # (b,)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.d_features.ravel(), self.d_labels])

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.d_features).all()
                    and np.isfinite(self.d_labels).all())


@dataclass
class ObjectiveConfig:
    """Scalarized attacker objective: alpha * eff/eff_ref - (1-alpha) * risk/risk_ref."""

    alpha: float
    eff_ref: float
    risk_ref: float
    clean_params: ModelParams
    sigma: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.eff_ref <= 0 or self.risk_ref <= 0:
            raise ValueError("normalization references must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def shift_output_bias(params: ModelParams, delta: float) -> ModelParams:
    """Copy of the model with its output bias shifted by delta."""
    out = params.copy()
    out.biases[-1] = out.biases[-1] + delta
    return out


def detectability_risk(clean_params: ModelParams, sigma: float,
                       Xp: np.ndarray, yp: np.ndarray) -> float:
    """Product of the batch losses against the clean model shifted by +/- sigma.

    Zero on either shifted hyperplane, largest between them; low values mean
    the batch hugs the band the clean residuals span.
    """
    b = len(yp)
    if b < 1:
        raise ValueError("empty poisoning batch")
    rp = forward(shift_output_bias(clean_params, +sigma), Xp) - yp
    rm = forward(shift_output_bias(clean_params, -sigma), Xp) - yp
    loss_p = 0.5 * float(rp @ rp) / b
    loss_m = 0.5 * float(rm @ rm) / b
    return loss_p * loss_m


def detectability_risk_grads(clean_params: ModelParams, sigma: float,
                             Xp: np.ndarray, yp: np.ndarray):
    """Risk value plus its exact gradients w.r.t. the batch features and labels."""
    b = len(yp)
    if b < 1:
        raise ValueError("empty poisoning batch")
    plus = shift_output_bias(clean_params, +sigma)
    minus = shift_output_bias(clean_params, -sigma)
    rp = forward(plus, Xp) - yp
    rm = forward(minus, Xp) - yp
    loss_p = 0.5 * float(rp @ rp) / b
    loss_m = 0.5 * float(rm @ rm) / b
    gXp, gyp = loss_input_grads(plus, Xp, yp)
    gXm, gym = loss_input_grads(minus, Xp, yp)
    grad_X = gXp * loss_m + loss_p * gXm
    grad_y = gyp * loss_m + loss_p * gym
    return loss_p * loss_m, grad_X, grad_y


def _check_direction(params: ModelParams, v: ModelParams) -> None:
    if v.arch.layer_widths != params.arch.layer_widths:
        raise ValueError("direction vector shape does not match parameters")


def _tangent_pass(params: ModelParams, X: np.ndarray, y: np.ndarray, lam: float,
                  v: ModelParams, rows: np.ndarray | None):
    """Directional derivative along v (in parameter space) of the loss gradients.

    Returns (hvp, mixed_X_rows, mixed_y_rows) where hvp is (grad^2_w L) v and
    the mixed blocks are the tangents of dL/dX and dL/dy at `rows` -- which by
    symmetry of second derivatives equal the mixed products
    (grad_{X_p} grad_w L)^T v and (grad_{y_p} grad_w L)^T v.
    """
    n = X.shape[0]
    L = params.arch.n_layers
    slope = params.arch.leaky_slope

    acts, zs, out = _forward_pass(params, X)
    masks = [_leaky_mask(zs[l], slope) for l in range(L - 1)]

    # forward tangent: how activations move as params move along v
    da = np.zeros_like(X)
    dacts = [da]
    for l in range(L):
        dz = da @ params.weights[l] + acts[l] @ v.weights[l] + v.biases[l]
        da = dz * masks[l] if l < L - 1 else dz
        dacts.append(da)
    r = out - y
    dr = dacts[L][:, 0]

    # joint primal/tangent backward
    delta = (r / n)[:, None]
    ddelta = (dr / n)[:, None]
    hW = [None] * L
    hb = [None] * L
    for l in range(L - 1, -1, -1):
        if l == L - 1:
            dz_p, ddz = delta, ddelta
        else:
            dz_p = delta * masks[l]
            ddz = ddelta * masks[l]
        hW[l] = dacts[l].T @ dz_p + acts[l].T @ ddz
        if lam:
            hW[l] = hW[l] + lam * v.weights[l]
        hb[l] = ddz.sum(axis=0)
        delta = dz_p @ params.weights[l].T
        ddelta = ddz @ params.weights[l].T + dz_p @ v.weights[l].T

    hvp = ModelParams(params.arch, hW, hb)
    if rows is None:
        return hvp, None, None
    return hvp, ddelta[rows], (-dr / n)[rows]


def hvp_w(params: ModelParams, ds: Dataset, lam: float, v: ModelParams) -> ModelParams:
    """Exact Hessian-vector product of the training loss, Hessian never formed."""
    _check_direction(params, v)
    return _tangent_pass(params, ds.X, ds.y, lam, v, None)[0]


def _check_rows(ds: Dataset, poison_idx) -> np.ndarray:
    rows = np.asarray(poison_idx, dtype=np.intp)
    if rows.size and (rows.min() < 0 or rows.max() >= ds.n):
        raise IndexError("poison index out of range")
    return rows


def mixed_hvp_xp(params: ModelParams, ds: Dataset, lam: float, v: ModelParams,
                 poison_idx) -> np.ndarray:
    """(grad_{X_p} grad_w L)^T v, rows restricted to the poisoning points."""
    _check_direction(params, v)
    rows = _check_rows(ds, poison_idx)
    return _tangent_pass(params, ds.X, ds.y, lam, v, rows)[1]


def mixed_hvp_yp(params: ModelParams, ds: Dataset, lam: float, v: ModelParams,
                 poison_idx) -> np.ndarray:
    """(grad_{y_p} grad_w L)^T v, restricted to the poisoning points."""
    _check_direction(params, v)
    rows = _check_rows(ds, poison_idx)
    return _tangent_pass(params, ds.X, ds.y, lam, v, rows)[2]


def rmd_hypergrad(cfg: ObjectiveConfig, val: Dataset, train: Dataset, poison_idx,
                  w0: ModelParams, steps: int, eta: float, lam: float = 0.0):
    """Hypergradient of the normalized attacker objective via reverse-mode
    differentiation through the stored SGD trajectory.

    `train` must already contain the poisoning batch at `poison_idx`. Returns
    (HyperGradient, objective value at the trained parameters).
    """
    if steps < 1:
        raise ValueError("need at least one inner training step")
    rows = _check_rows(train, poison_idx)

    traj = sgd_train(w0, train, eta, steps, lam)
    w_final = traj.final

    eff = mse_loss(w_final, val, 0.0)
    Xp = train.X[rows]
    yp = train.y[rows]
    risk, risk_gX, risk_gy = detectability_risk_grads(cfg.clean_params, cfg.sigma,
                                                      Xp, yp)
    objective = cfg.alpha * eff / cfg.eff_ref - (1.0 - cfg.alpha) * risk / cfg.risk_ref

    # direct terms: only the detectability part touches the batch directly,
    # only the effectiveness part depends on the trained parameters
    risk_coef = -(1.0 - cfg.alpha) / cfg.risk_ref
    dX = risk_coef * risk_gX
    dy = risk_coef * risk_gy
    dw = grad_loss(w_final, val, 0.0).scaled(cfg.alpha / cfg.eff_ref)

    for t in range(steps - 1, -1, -1):
        hvp, mx, my = _tangent_pass(traj.states[t], train.X, train.y, lam, dw, rows)
        dw = dw.axpy(-eta, hvp)
        dX = dX - eta * mx
        dy = dy - eta * my
        if not (dw.is_finite() and np.isfinite(dX).all() and np.isfinite(dy).all()):
            raise RuntimeError(f"non-finite hypergradient accumulator at reverse step {t}")

    return HyperGradient(dX, dy), objective


def fd_hypergrad(cfg: ObjectiveConfig, val: Dataset, train: Dataset, poison_idx,
                 w0: ModelParams, steps: int, eta: float, lam: float = 0.0,
                 h: float = 1e-5) -> HyperGradient:
    """Central-difference oracle for the full pipeline hypergradient.

    Perturbs one poisoning coordinate at a time, retrains from the same w0,
    and differences the normalized attacker objective.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    rows = _check_rows(train, poison_idx)
    Xp0 = train.X[rows].copy()
    yp0 = train.y[rows].copy()

    def objective(Xp: np.ndarray, yp: np.ndarray) -> float:
        work = train.replaced(rows, Xp, yp)
        w_final = sgd_train(w0, work, eta, steps, lam).final
        value = cfg.alpha * mse_loss(w_final, val, 0.0) / cfg.eff_ref
        if len(yp):
            risk = detectability_risk(cfg.clean_params, cfg.sigma, Xp, yp)
            value -= (1.0 - cfg.alpha) * risk / cfg.risk_ref
        return value

    dX = np.zeros_like(Xp0)
    dy = np.zeros_like(yp0)
    for k in range(Xp0.shape[0]):
        for j in range(Xp0.shape[1]):
            Xp = Xp0.copy()
            Xp[k, j] = Xp0[k, j] + h
            f_plus = objective(Xp, yp0)
            Xp[k, j] = Xp0[k, j] - h
            f_minus = objective(Xp, yp0)
            dX[k, j] = (f_plus - f_minus) / (2.0 * h)
        yp = yp0.copy()
        yp[k] = yp0[k] + h
        f_plus = objective(Xp0, yp)
        yp[k] = yp0[k] - h
        f_minus = objective(Xp0, yp)
        dy[k] = (f_plus - f_minus) / (2.0 * h)
    return HyperGradient(dX, dy)
