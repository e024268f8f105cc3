"""Training-time defenses: trimmed refitting, Huber regression, gradient-SVD
filtering, and bootstrap-group model selection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import huber as huber_loss_fn

from .data import Dataset
from .models import Architecture, ModelParams, TrainConfig, fit, per_sample_grads, forward

TRIM_MAX_ITERS = 50
SEVER_ROUNDS = 4
HUBER_GRID = tuple(np.geomspace(1.1, 10.0, 10))
HUBER_RIDGE = 1e-4
HUBER_MAX_ITERS = 10_000
PRODA_GROUP_SIZE = 5
PRODA_EPS = 1e-5
PRODA_WORST_CASE = 0.45


@dataclass
class DefenseReport:
    """Kept/rejected partition plus the model trained on the kept points."""

    kept_indices: np.ndarray
    rejected_indices: np.ndarray
    final_params: ModelParams
    iterations: int
    losses: list[float]

    def __post_init__(self) -> None:
        kept = set(self.kept_indices.tolist())
        rejected = set(self.rejected_indices.tolist())
        if kept & rejected:
            raise ValueError("kept and rejected sets overlap")


def _residuals_sq(params: ModelParams, ds: Dataset) -> np.ndarray:
    r = forward(params, ds.X) - ds.y
    return r * r


def trim(ds: Dataset, reject_rate: float, train_cfg: TrainConfig,
         max_iters: int = TRIM_MAX_ITERS) -> DefenseReport:
    """Alternate training on a subset and re-selecting the lowest-residual points.

    The subset has fixed size ceil((1 - reject_rate) * n); iteration stops when
    the subset stops changing or `max_iters` is hit. Training restarts from the
    standard initialization every iteration.
    """
    if not 0.0 <= reject_rate < 1.0:
        raise ValueError("reject_rate must lie in [0, 1)")
    n = ds.n
    keep = math.ceil((1.0 - reject_rate) * n)
    if keep < 2:
        raise ValueError(f"kept subset too small ({keep} points)")

    rng = np.random.default_rng(train_cfg.seed)
    subset = np.sort(rng.choice(n, size=keep, replace=False))
    losses: list[float] = []
    params = None
    iterations = 0
    for iterations in range(1, max_iters + 1):
        params = fit(ds.subset(subset), train_cfg)
        sq = _residuals_sq(params, ds)
        order = np.argsort(sq, kind="stable")
        new_subset = np.sort(order[:keep])
        losses.append(0.5 * float(sq[new_subset].sum()) / keep)
        if np.array_equal(new_subset, subset):
            break
        subset = new_subset
    else:
        params = fit(ds.subset(subset), train_cfg)

    all_idx = np.arange(n)
    rejected = np.setdiff1d(all_idx, subset)
    return DefenseReport(kept_indices=subset, rejected_indices=rejected,
                         final_params=params, iterations=iterations, losses=losses)


@dataclass
class HuberResult:
    params: ModelParams
    epsilon: float
    converged: bool


def _huber_solve(X: np.ndarray, y: np.ndarray, epsilon: float, ridge: float,
                 max_iters: int) -> tuple[np.ndarray, bool]:
    """Minimize sum huber_eps(r_i) + ridge * ||w||^2 (bias unpenalized)."""
    m = X.shape[1]

    def objective(theta):
        r = X @ theta[:m] + theta[m] - y
        loss = float(np.sum(huber_loss_fn(epsilon, r))) + ridge * float(theta[:m] @ theta[:m])
        psi = np.clip(r, -epsilon, epsilon)
        grad = np.empty(m + 1)
        grad[:m] = X.T @ psi + 2.0 * ridge * theta[:m]
        grad[m] = psi.sum()
        return loss, grad

    res = minimize(objective, np.zeros(m + 1), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iters, "gtol": 1e-10, "ftol": 1e-14})
    return res.x, bool(res.success)


def huber_fit(ds: Dataset, epsilon_grid=HUBER_GRID, ridge: float = HUBER_RIDGE,
              max_iters: int = HUBER_MAX_ITERS, cv_folds: int = 5,
              cv_seed: int = 0) -> HuberResult:
    """Huber linear regression with the transition point chosen by k-fold CV.

    Every epsilon in the grid is fit on each training fold and scored by plain
    MSE on the held-out fold; the winner is refit on the full data. If the
    inner solver hits its iteration cap the best iterate is returned with
    converged=False.
    """
    epsilon_grid = [float(e) for e in epsilon_grid]
    if not epsilon_grid:
        raise ValueError("epsilon grid is empty")
    if any(e <= 1.0 for e in epsilon_grid):
        raise ValueError("epsilon values must exceed 1")

    n = ds.n
    folds = min(cv_folds, n)
    perm = np.random.default_rng(cv_seed).permutation(n)
    fold_ids = np.array_split(perm, folds)

    cv_mse = np.zeros(len(epsilon_grid))
    for holdout in fold_ids:
        train_idx = np.setdiff1d(perm, holdout)
        Xtr, ytr = ds.X[train_idx], ds.y[train_idx]
        Xho, yho = ds.X[holdout], ds.y[holdout]
        for k, eps in enumerate(epsilon_grid):
            theta, _ = _huber_solve(Xtr, ytr, eps, ridge, max_iters)
            r = Xho @ theta[:-1] + theta[-1] - yho
            cv_mse[k] += float(r @ r) / len(yho)
    chosen = epsilon_grid[int(np.argmin(cv_mse))]

    theta, converged = _huber_solve(ds.X, ds.y, chosen, ridge, max_iters)
    arch = Architecture.linear(ds.m)
    params = ModelParams(arch, [theta[:-1].reshape(-1, 1)], [theta[-1:].copy()])
    return HuberResult(params=params, epsilon=chosen, converged=converged)


def sever(ds: Dataset, reject_rate: float, rounds: int = SEVER_ROUNDS,
          train_cfg: TrainConfig | None = None) -> DefenseReport:
    """Iterative filtering by squared projection of centered per-point gradients
    onto the top singular direction; the removal budget is split across rounds."""
    if rounds < 1:
        raise ValueError("need at least one round")
    if not 0.0 <= reject_rate < 1.0:
        raise ValueError("reject_rate must lie in [0, 1)")
    if train_cfg is None:
        train_cfg = TrainConfig()

    n = ds.n
    total_remove = int(round(reject_rate * n))
    quotas = np.diff(np.round(np.linspace(0, total_remove, rounds + 1)).astype(int))

    active = np.arange(n)
    losses: list[float] = []
    params = None
    for quota in quotas:
        if len(active) - quota < 2:
            raise ValueError("active set exhausted")
        sub = ds.subset(active)
        params = fit(sub, train_cfg)
        r = forward(params, sub.X) - sub.y
        losses.append(0.5 * float(r @ r) / sub.n)
        if quota == 0:
            continue
        grads = per_sample_grads(params, sub.X, sub.y)
        centered = grads - grads.mean(axis=0)
        top_dir = np.linalg.svd(centered, full_matrices=False)[2][0]
        scores = (centered @ top_dir) ** 2
        drop = np.argsort(-scores, kind="stable")[:quota]
        active = np.delete(active, drop)

    params = fit(ds.subset(active), train_cfg)
    rejected = np.setdiff1d(np.arange(n), active)
    return DefenseReport(kept_indices=active, rejected_indices=rejected,
                         final_params=params, iterations=rounds, losses=losses)


def proda_group_count(worst_case_ratio: float, group_size: int, eps: float) -> int:
    """Number of bootstrap groups needed so that, with probability at least
    1 - eps, some group contains only clean points.

    The continuous bound assumes independent draws; one spare group covers the
    gap to without-replacement sampling from a finite training pool.
    """
    if not 0.0 < worst_case_ratio < 1.0:
        raise ValueError("worst-case poisoning ratio must lie in (0, 1)")
    if group_size < 1:
        raise ValueError("group size must be at least 1")
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    p_dirty = 1.0 - (1.0 - worst_case_ratio) ** group_size
    return int(math.ceil(math.log(eps) / math.log(p_dirty))) + 1


def _lstsq_params(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    design = np.column_stack([X, np.ones(len(y))])
    return np.linalg.lstsq(design, y, rcond=None)[0]


def proda(ds: Dataset, group_size: int = PRODA_GROUP_SIZE, eps: float = PRODA_EPS,
          reject_rate: float = 0.4, worst_case_ratio: float = PRODA_WORST_CASE,
          seed: int = 0, select_on: str = "subset") -> ModelParams:
    """Bootstrap many tiny groups, refit each on its lowest-error subset, and
    return the refit with the smallest MSE.

    `select_on` picks the selection metric: "subset" scores each candidate on
    its own kept points, "full" on the whole training set.
    """
    if select_on not in ("subset", "full"):
        raise ValueError("select_on must be 'subset' or 'full'")
    n = ds.n
    keep = math.ceil((1.0 - reject_rate) * n)
    if keep < 2:
        raise ValueError(f"kept subset too small ({keep} points)")
    n_groups = proda_group_count(worst_case_ratio, group_size, eps)

    rng = np.random.default_rng(seed)
    best_theta = None
    best_score = np.inf
    for _ in range(n_groups):
        group = rng.choice(n, size=group_size, replace=True)
        theta = _lstsq_params(ds.X[group], ds.y[group])
        r = ds.X @ theta[:-1] + theta[-1] - ds.y
        selected = np.sort(np.argsort(r * r, kind="stable")[:keep])
        refit = _lstsq_params(ds.X[selected], ds.y[selected])
        if select_on == "subset":
            rr = ds.X[selected] @ refit[:-1] + refit[-1] - ds.y[selected]
            score = float(rr @ rr) / keep
        else:
            rr = ds.X @ refit[:-1] + refit[-1] - ds.y
            score = float(rr @ rr) / n
        if score < best_score:
            best_score = score
            best_theta = refit

    arch = Architecture.linear(ds.m)
    return ModelParams(arch, [best_theta[:-1].reshape(-1, 1)], [best_theta[-1:].copy()])
