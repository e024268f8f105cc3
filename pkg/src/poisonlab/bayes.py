"""Bayesian linear regression with learned precisions, and the variance-band
training-set filter built on it.

The weight posterior under Gaussian noise (precision beta) and an isotropic
Gaussian weight prior (precision lam) is Gaussian with
    cov  = (beta X^T X + lam I)^-1,    mean = beta cov X^T y.
Both precisions carry Gamma hyperpriors and are point-estimated by maximizing
the marginal likelihood times the priors, iterating the classic fixed-point
updates. All linear algebra routes through one SVD of the design matrix.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset

BAYESCLEAN_C1 = 0.5
BAYESCLEAN_C2 = 1.5
EM_MAX_ITERS = 300
EM_TOL = 1e-6


@dataclass(frozen=True)
class EvidencePriors:
    """Gamma hyperpriors on the two precisions; log-density shape*ln(x) - rate*x."""

    lam_shape: float = 1e-6
    lam_rate: float = 1e-6
    noise_shape: float = 1e-6
    noise_rate: float = 1e-6

    def __post_init__(self) -> None:
        if min(self.lam_shape, self.lam_rate, self.noise_shape, self.noise_rate) <= 0:
            raise ValueError("prior parameters must be positive")

    def log_prior(self, lam: float, beta: float) -> float:
        return (self.lam_shape * np.log(lam) - self.lam_rate * lam
                + self.noise_shape * np.log(beta) - self.noise_rate * beta)


@dataclass
class PosteriorState:
    """Gaussian weight posterior plus the learned precisions."""

    mean: np.ndarray
    cov: np.ndarray
    weight_precision: float
    noise_precision: float
    gamma: np.ndarray  # per-coordinate "well-determinedness" in [0, 1]

    def __post_init__(self) -> None:
        if self.weight_precision <= 0 or self.noise_precision <= 0:
            raise ValueError("precisions must be positive")


def design_matrix(X: np.ndarray) -> np.ndarray:
    """Append a constant column so the intercept gets a prior like any weight."""
    return np.column_stack([X, np.ones(X.shape[0])])


def _svd(X: np.ndarray):
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    return U, s, Vt


def posterior(X: np.ndarray, y: np.ndarray, lam: float, beta: float) -> PosteriorState:
    """Exact weight posterior for fixed precisions, via the SVD of X."""
    if lam <= 0 or beta <= 0:
        raise ValueError("precisions must be positive")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = X.shape[1]
    U, s, Vt = _svd(X)
    denom = beta * s * s + lam
    V = Vt.T
    cov = (V * (1.0 / denom)) @ Vt + (np.eye(d) - V @ Vt) / lam
    cov = 0.5 * (cov + cov.T)
    mean = beta * (V @ ((s / denom) * (U.T @ y)))
    gamma = 1.0 - lam * np.diag(cov)
    return PosteriorState(mean=mean, cov=cov, weight_precision=lam,
                          noise_precision=beta, gamma=gamma)


def log_evidence(X: np.ndarray, y: np.ndarray, lam: float, beta: float) -> float:
    """Log marginal likelihood log p(y | X, lam, beta)."""
    U, s, _ = _svd(X)
    return _evidence_core(s, U.T @ y, float(y @ y), X.shape[0], X.shape[1], lam, beta)


def _evidence_core(s: np.ndarray, UTy: np.ndarray, yy: float, n: int, d: int,
                   lam: float, beta: float) -> float:
    denom = beta * s * s + lam
    coef = beta * s * UTy / denom          # posterior mean in right-singular basis
    mean_sq = float(coef @ coef)
    fitted = s * coef
    resid_sq = max(yy - 2.0 * float(UTy @ fitted) + float(fitted @ fitted), 0.0)
    log_det = float(np.sum(np.log(denom))) + (d - len(s)) * np.log(lam)
    energy = 0.5 * beta * resid_sq + 0.5 * lam * mean_sq
    return (0.5 * d * np.log(lam) + 0.5 * n * np.log(beta)
            - 0.5 * n * np.log(2.0 * np.pi) - energy - 0.5 * log_det)


def evidence_objective(X: np.ndarray, y: np.ndarray, lam: float, beta: float,
                       priors: EvidencePriors = EvidencePriors()) -> float:
    """Log evidence plus the log hyperpriors: the quantity the EM loop climbs."""
    return log_evidence(X, y, lam, beta) + priors.log_prior(lam, beta)


def evidence_surface(X: np.ndarray, y: np.ndarray, lams, betas,
                     priors: EvidencePriors = EvidencePriors()) -> np.ndarray:
    """Evaluate the evidence objective on a (lam, beta) grid with one SVD."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    U, s, _ = _svd(X)
    UTy = U.T @ y
    yy = float(y @ y)
    n, d = X.shape
    out = np.empty((len(lams), len(betas)))
    for i, lam in enumerate(lams):
        for j, beta in enumerate(betas):
            out[i, j] = _evidence_core(s, UTy, yy, n, d, lam, beta) \
                + priors.log_prior(lam, beta)
    return out


def em_fit(X: np.ndarray, y: np.ndarray, priors: EvidencePriors = EvidencePriors(),
           max_iters: int = EM_MAX_ITERS, tol: float = EM_TOL) -> PosteriorState:
    """Point-estimate the precisions by fixed-point iteration on the evidence.

    Per iteration, with the posterior under the current (lam, beta):
        gamma_j  = 1 - lam * cov_jj
        beta^-1  = (||y - X mean||^2 + 2*noise_rate) / (n - sum gamma + 2*noise_shape)
        lam      = (sum gamma + 2*lam_shape) / (||mean||^2 + 2*lam_rate)
    Stops after `max_iters` or when both precisions move by less than `tol`
    relatively.
    """
    if max_iters < 1:
        raise ValueError("need at least one iteration")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    U, s, _ = _svd(X)
    UTy = U.T @ y
    yy = float(y @ y)
    s_sq = s * s

    lam = 1.0
    y_var = yy / n - (float(y.sum()) / n) ** 2 if n else 0.0
    beta = 1.0 / y_var if y_var > 0 else 1.0

    for _ in range(max_iters):
        denom = beta * s_sq + lam
        coef = beta * s * UTy / denom
        mean_sq = float(coef @ coef)
        fitted = s * coef
        resid_sq = max(yy - 2.0 * float(UTy @ fitted) + float(fitted @ fitted), 0.0)
        gamma_sum = float(np.sum(beta * s_sq / denom))

        beta_new = (n - gamma_sum + 2.0 * priors.noise_shape) \
            / (resid_sq + 2.0 * priors.noise_rate)
        lam_new = (gamma_sum + 2.0 * priors.lam_shape) \
            / (mean_sq + 2.0 * priors.lam_rate)
        if not (np.isfinite(beta_new) and np.isfinite(lam_new)) \
                or beta_new <= 0 or lam_new <= 0:
            raise RuntimeError("precision update left the feasible range")

        moved = max(abs(lam_new - lam) / lam, abs(beta_new - beta) / beta)
        lam, beta = lam_new, beta_new
        if moved < tol:
            break

    return posterior(X, y, lam, beta)


def predictive(x_star: np.ndarray, state: PosteriorState) -> tuple[float, float]:
    """Predictive mean and variance at one input (in design-matrix coordinates)."""
    x_star = np.asarray(x_star, dtype=np.float64)
    mu = float(state.mean @ x_star)
    var = 1.0 / state.noise_precision + float(x_star @ state.cov @ x_star)
    return mu, var


def predictive_batch(X: np.ndarray, state: PosteriorState) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized predictive distribution over the rows of X."""
    X = np.asarray(X, dtype=np.float64)
    mu = X @ state.mean
    var = 1.0 / state.noise_precision + np.einsum("ij,jk,ik->i", X, state.cov, X)
    return mu, var


@dataclass
class CleanPartition:
    """Three-way accept/flag/reject split of a training set."""

    accept_idx: np.ndarray
    flag_idx: np.ndarray
    reject_idx: np.ndarray
    pred_mean: np.ndarray
    pred_var: np.ndarray
    state: PosteriorState

    @property
    def kept(self) -> np.ndarray:
        """Points trained on downstream; flagged points are rejected too."""
        return self.accept_idx

    def zones(self) -> np.ndarray:
        n = len(self.pred_mean)
        zones = np.empty(n, dtype=object)
        zones[self.accept_idx] = "accept"
        zones[self.flag_idx] = "flag"
        zones[self.reject_idx] = "reject"
        return zones


def bayesclean(ds: Dataset, c1: float = BAYESCLEAN_C1, c2: float = BAYESCLEAN_C2,
               priors: EvidencePriors = EvidencePriors(),
               max_iters: int = EM_MAX_ITERS, symmetric: bool = False) -> CleanPartition:
    """Partition points by their position within the predictive uncertainty band.

    With thresholds t_k = |mean_i + c_k * std_i|, a point is accepted when
    |y_i| <= t_1, flagged when t_1 < |y_i| <= t_2, and rejected beyond t_2.
    The accept test takes precedence, which keeps the partition a disjoint
    cover even when a negative predictive mean makes t_2 < t_1. Setting
    `symmetric` switches to the centered test |y_i - mean_i| <= c_k * std_i.

    No count of suspect points is assumed anywhere: the split is a pure
    function of the data and (c1, c2).
    """
    if not 0.0 <= c1 <= c2:
        raise ValueError("need 0 <= c1 <= c2")
    A = design_matrix(ds.X)
    state = em_fit(A, ds.y, priors, max_iters)
    mu, var = predictive_batch(A, state)
    sd = np.sqrt(var)

    if symmetric:
        dev = np.abs(ds.y - mu)
        in_first = dev <= c1 * sd
        in_second = dev <= c2 * sd
    else:
        mag = np.abs(ds.y)
        in_first = mag <= np.abs(mu + c1 * sd)
        in_second = mag <= np.abs(mu + c2 * sd)

    accept = in_first
    flag = ~accept & in_second
    reject = ~accept & ~flag
    idx = np.arange(ds.n)
    return CleanPartition(accept_idx=idx[accept], flag_idx=idx[flag],
                          reject_idx=idx[reject], pred_mean=mu, pred_var=var,
                          state=state)


def write_partition_csv(partition: CleanPartition, ds: Dataset, path) -> None:
    """Dump (index, label, predictive mean/std, zone) rows for inspection."""
    zones = partition.zones()
    sd = np.sqrt(partition.pred_var)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "y", "pred_mean", "pred_std", "zone"])
        for i in range(ds.n):
            writer.writerow([i, repr(float(ds.y[i])), repr(float(partition.pred_mean[i])),
                             repr(float(sd[i])), zones[i]])
