"""Stealthy poisoning-attack crafting.

The attacker maximizes a scalarized objective: validation loss of the trained
model, weighted alpha, minus the detectability risk of the batch, weighted
(1 - alpha). Both objectives are normalized by reference values so that
neither dominates the hypergradient ascent across the alpha sweep. Batches
are crafted one after another and fixed into the training set, so later
batches are optimized against the already-poisoned model.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .hypergrad import ObjectiveConfig, detectability_risk, rmd_hypergrad
from .models import (
    Architecture,
    ModelParams,
    init_params,
    mse_loss,
    residual_sigma,
    sgd_train,
)


@dataclass
class FeasibleDomain:
    """Componentwise box constraints for poisoning features and label."""

    feature_low: np.ndarray
    feature_high: np.ndarray
    label_low: float
    label_high: float

    def __post_init__(self) -> None:
        self.feature_low = np.asarray(self.feature_low, dtype=np.float64)
        self.feature_high = np.asarray(self.feature_high, dtype=np.float64)
        if self.feature_low.shape != self.feature_high.shape:
            raise ValueError("bound vectors must have equal shape")
        if np.any(self.feature_low > self.feature_high) or self.label_low > self.label_high:
            raise ValueError("lower bounds must not exceed upper bounds")

    @staticmethod
    def from_dataset(ds: Dataset) -> "FeasibleDomain":
        """Default box: the per-coordinate range of the (clean) data."""
        return FeasibleDomain(ds.X.min(axis=0), ds.X.max(axis=0),
                              float(ds.y.min()), float(ds.y.max()))

    def clip(self, Xp: np.ndarray, yp: np.ndarray):
        return (np.clip(Xp, self.feature_low, self.feature_high),
                np.clip(yp, self.label_low, self.label_high))

    def contains(self, Xp: np.ndarray, yp: np.ndarray) -> bool:
        return bool(np.all(Xp >= self.feature_low) and np.all(Xp <= self.feature_high)
                    and np.all(yp >= self.label_low) and np.all(yp <= self.label_high))


def project(Xp: np.ndarray, yp: np.ndarray, domain: FeasibleDomain):
    """Clip a poisoning batch into the feasible box."""
    if Xp.shape[1] != domain.feature_low.shape[0]:
        raise ValueError("batch width does not match domain")
    return domain.clip(Xp, yp)


def attacker_objective(alpha: float, eff_norm: float, risk_norm: float) -> float:
    """Scalarization alpha * eff - (1 - alpha) * risk of the normalized objectives."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * eff_norm - (1.0 - alpha) * risk_norm


def detect_risk(batch: Dataset, clean_params: ModelParams, sigma: float) -> float:
    """Detectability risk of a batch against the clean model's +/- sigma band."""
    if batch.n < 1:
        raise ValueError("empty poisoning batch")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return detectability_risk(clean_params, sigma, batch.X, batch.y)


def init_poison(train: Dataset, batch_size: int, seed, exclude=()) -> tuple[Dataset, np.ndarray]:
    """Clone `batch_size` training rows, sampled uniformly without duplicates.

    Returns the cloned batch and the indices of the rows it will replace.
    `exclude` removes already-poisoned indices from the pool; `seed` may be an
    integer or a numpy Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pool = np.setdiff1d(np.arange(train.n), np.asarray(exclude, dtype=np.intp))
    if batch_size > pool.size:
        raise ValueError(
            f"batch size {batch_size} exceeds remaining clean pool ({pool.size})")
    idx = np.sort(rng.choice(pool, size=batch_size, replace=False))
    return train.subset(idx), idx


@dataclass
class AttackPlan:
    """Everything the crafting loop needs: budget, batches, rates, and bounds."""

    arch: Architecture
    alpha: float
    n_p: int
    batch_indices: list[np.ndarray]
    t_out: int
    gamma: float
    inner_steps: int
    inner_eta: float
    lam: float
    seed: int
    domain: FeasibleDomain

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.t_out < 0 or self.gamma < 0:
            raise ValueError("t_out and gamma must be non-negative")
        if self.inner_steps < 1 or self.inner_eta <= 0:
            raise ValueError("inner training needs steps >= 1 and eta > 0")
        total = sum(len(b) for b in self.batch_indices)
        if total != self.n_p:
            raise ValueError("batch indices do not cover the poisoning budget")
        flat = np.concatenate([np.asarray(b) for b in self.batch_indices]) \
            if self.batch_indices else np.empty(0, dtype=np.intp)
        if len(np.unique(flat)) != len(flat):
            raise ValueError("batch index sets must be disjoint")

    @property
    def n_batches(self) -> int:
        return len(self.batch_indices)

    @property
    def batch_size(self) -> int:
        return max((len(b) for b in self.batch_indices), default=0)


def make_plan(train: Dataset, arch: Architecture, alpha: float, n_p: int,
              batch_size: int | None = None, batch_sizes=None,
              t_out: int = 100, gamma: float = 0.9, inner_steps: int = 40,
              inner_eta: float = 0.1, lam: float = 0.0, seed: int = 0,
              domain: FeasibleDomain | None = None) -> AttackPlan:
    """Draw the replacement index sets and assemble an attack plan.

    Batches default to ceil(n_p / batch_size) chunks of `batch_size`; pass
    `batch_sizes` for explicit (for example ratio-aligned) chunking.
    """
    if n_p < 0 or n_p > train.n:
        raise ValueError("poisoning budget must lie in [0, n_train]")
    if batch_sizes is None:
        if batch_size is None:
            batch_size = n_p
        if n_p > 0 and batch_size < 1:
            raise ValueError("batch size must be positive")
        n_b = math.ceil(n_p / batch_size) if n_p else 0
        batch_sizes = [batch_size] * n_b
        if n_b:
            batch_sizes[-1] = n_p - batch_size * (n_b - 1)
    elif sum(batch_sizes) != n_p:
        raise ValueError("batch sizes must sum to the poisoning budget")

    rng = np.random.default_rng(seed)
    indices: list[np.ndarray] = []
    taken: list[int] = []
    for size in batch_sizes:
        _, idx = init_poison(train, size, rng, exclude=taken)
        indices.append(idx)
        taken.extend(idx.tolist())

    if domain is None:
        domain = FeasibleDomain.from_dataset(train)
    return AttackPlan(arch=arch, alpha=alpha, n_p=n_p, batch_indices=indices,
                      t_out=t_out, gamma=gamma, inner_steps=inner_steps,
                      inner_eta=inner_eta, lam=lam, seed=seed, domain=domain)


def clean_reference(plan: AttackPlan, train: Dataset) -> tuple[ModelParams, float]:
    """Train the clean reference model and its residual standard error."""
    w0 = init_params(plan.arch, plan.seed)
    params = sgd_train(w0, train, plan.inner_eta, plan.inner_steps, plan.lam).final
    return params, residual_sigma(params, train)


@dataclass
class NormalizationRefs:
    """Reference magnitudes dividing the two attacker objectives."""

    risk_ref: float
    eff_refs: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.risk_ref <= 0 or any(v <= 0 for v in self.eff_refs):
            raise ValueError("normalization references must be positive")


@dataclass
class PoisonBatch:
    """One optimized batch, as fixed into the training set."""

    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    eff_ref: float
    risk: float


@dataclass
class CraftResult:
    """Poisoned training set plus the per-batch crafting record."""

    poisoned: Dataset
    batches: list[PoisonBatch]
    refs: NormalizationRefs
    inject: bool = False

    def poison_mask(self, n_clean: int) -> np.ndarray:
        total = n_clean + (sum(len(b.indices) for b in self.batches) if self.inject else 0)
        mask = np.zeros(total, dtype=bool)
        offset = n_clean
        for batch in self.batches:
            if self.inject:
                mask[offset:offset + len(batch.indices)] = True
                offset += len(batch.indices)
            else:
                mask[batch.indices] = True
        return mask

    def apply(self, train: Dataset, upto: int | None = None) -> Dataset:
        """Rebuild the training set with the first `upto` batches applied."""
        upto = len(self.batches) if upto is None else upto
        out = train.copy()
        for batch in self.batches[:upto]:
            if self.inject:
                out = Dataset(np.vstack([out.X, batch.features]),
                              np.concatenate([out.y, batch.labels]))
            else:
                out = out.replaced(batch.indices, batch.features, batch.labels)
        return out


def optimize_batch(plan: AttackPlan, eff_ref: float, risk_ref: float, val: Dataset,
                   train: Dataset, batch0: Dataset, batch_idx: np.ndarray,
                   clean_params: ModelParams, sigma: float) -> Dataset:
    """Projected hypergradient ascent on one poisoning batch.

    Each hyperiteration re-initializes the model, trains it for the inner
    budget, pulls the hypergradient back through the trajectory, normalizes
    it jointly to unit L2 norm, steps with rate gamma, and projects back into
    the feasible box. Runs exactly t_out hyperiterations.
    """
    if eff_ref <= 0 or risk_ref <= 0:
        raise ValueError("normalization references must be positive")
    if not plan.domain.contains(batch0.X, batch0.y):
        raise ValueError("initial batch lies outside the feasible domain")

    batch_idx = np.asarray(batch_idx, dtype=np.intp)
    work = train.replaced(batch_idx, batch0.X, batch0.y)
    Xp = batch0.X.copy()
    yp = batch0.y.copy()
    w0 = init_params(plan.arch, plan.seed)
    cfg = ObjectiveConfig(alpha=plan.alpha, eff_ref=eff_ref, risk_ref=risk_ref,
                          clean_params=clean_params, sigma=sigma)

    for _ in range(plan.t_out):
        hyper, _ = rmd_hypergrad(cfg, val, work, batch_idx, w0,
                                 plan.inner_steps, plan.inner_eta, plan.lam)
        norm = float(np.linalg.norm(hyper.flatten()))
        if norm > 0:
            Xp = Xp + plan.gamma * (hyper.d_features / norm)
            yp = yp + plan.gamma * (hyper.d_labels / norm)
            Xp, yp = plan.domain.clip(Xp, yp)
        work.X[batch_idx] = Xp
        work.y[batch_idx] = yp
    return Dataset(Xp, yp)


def compute_R_ref(plan: AttackPlan, val: Dataset, train: Dataset) -> float:
    """Normalization coefficient for the detectability risk.

    Runs the full batched attack at alpha = 1 with unit references (maximum
    effectiveness, no stealth pressure) and returns the largest batch risk
    observed. That maximum anchors risk normalization for every other alpha.
    """
    if plan.n_p < 1:
        raise ValueError("cannot normalize an empty attack")
    aggressive = dataclasses.replace(plan, alpha=1.0)
    clean_params, sigma = clean_reference(plan, train)
    work = train.copy()
    risks = []
    for idx in aggressive.batch_indices:
        batch0 = work.subset(idx)
        batch = optimize_batch(aggressive, 1.0, 1.0, val, work, batch0, idx,
                               clean_params, sigma)
        risks.append(detect_risk(batch, clean_params, sigma))
        work.X[idx] = batch.X
        work.y[idx] = batch.y
    risk_ref = max(risks)
    if risk_ref <= 0:
        raise ValueError("degenerate detectability reference (max batch risk is zero)")
    return risk_ref


def craft_attack(plan: AttackPlan, risk_ref: float, val: Dataset, train: Dataset,
                 inject: bool = False) -> CraftResult:
    """Craft all poisoning batches sequentially against `train`.

    Before each batch the model is retrained on the current (partially
    poisoned) training set; its validation loss becomes that batch's
    effectiveness reference. By default poisoning replaces the designated
    clean rows; with `inject` the batches are appended instead.
    """
    if risk_ref <= 0:
        raise ValueError("risk reference must be positive")
    if plan.n_p == 0:
        return CraftResult(train.copy(), [], NormalizationRefs(risk_ref, []), inject)

    clean_params, sigma = clean_reference(plan, train)
    work = train.copy()
    records: list[PoisonBatch] = []
    eff_refs: list[float] = []

    for idx in plan.batch_indices:
        w0 = init_params(plan.arch, plan.seed)
        current = sgd_train(w0, work, plan.inner_eta, plan.inner_steps, plan.lam).final
        eff_ref = mse_loss(current, val, 0.0)
        if eff_ref <= 0:
            raise ValueError("degenerate effectiveness reference (validation loss is zero)")

        if inject:
            batch0 = train.subset(idx)  # clone sources stay the clean rows
            offset = work.n
            work = Dataset(np.vstack([work.X, batch0.X]),
                           np.concatenate([work.y, batch0.y]))
            active_idx = np.arange(offset, offset + len(idx))
        else:
            batch0 = work.subset(idx)
            active_idx = idx

        batch = optimize_batch(plan, eff_ref, risk_ref, val, work, batch0,
                               active_idx, clean_params, sigma)
        work.X[active_idx] = batch.X
        work.y[active_idx] = batch.y
        eff_refs.append(eff_ref)
        records.append(PoisonBatch(indices=np.asarray(idx, dtype=np.intp),
                                   features=batch.X.copy(), labels=batch.y.copy(),
                                   eff_ref=eff_ref,
                                   risk=detect_risk(batch, clean_params, sigma)))

    return CraftResult(work, records, NormalizationRefs(risk_ref, eff_refs), inject)
