"""Regression poisoning laboratory.

Crafts stealthy training-set poisoning attacks against linear and small MLP
regressors (bilevel optimization solved by reverse-mode differentiation
through SGD), runs a suite of training-time defenses against them, and
reports NMSE / defense-gain metrics across seeded experiment grids.
"""

from .data import Dataset, RawDataset, Scaler, SplitBundle, gen_synthetic, load_csv, split, standardize
from .models import (
    Architecture,
    ModelParams,
    TrainConfig,
    Trajectory,
    fit,
    forward,
    grad_loss,
    init_params,
    mse_loss,
    residual_sigma,
    sgd_train,
)
from .hypergrad import HyperGradient, ObjectiveConfig, fd_hypergrad, hvp_w, mixed_hvp_xp, mixed_hvp_yp, rmd_hypergrad
from .attack import (
    AttackPlan,
    CraftResult,
    FeasibleDomain,
    NormalizationRefs,
    attacker_objective,
    compute_R_ref,
    craft_attack,
    detect_risk,
    init_poison,
    make_plan,
    optimize_batch,
    project,
)
from .defenses import DefenseReport, HuberResult, huber_fit, proda, proda_group_count, sever, trim
from .bayes import (
    CleanPartition,
    EvidencePriors,
    PosteriorState,
    bayesclean,
    em_fit,
    evidence_objective,
    posterior,
    predictive,
    predictive_batch,
)
from .harness import ExperimentConfig, ExperimentReport, defense_gain, nmse, run_experiment

__version__ = "0.1.0"
