"""Experiment orchestration: seeded repetitions across poisoning ratios, alpha
values, and defenses, with NMSE / defense-gain metrics and report emission."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from . import bayes as bayes_mod
from . import defenses as defenses_mod
from .data import Dataset, RawDataset, gen_synthetic, load_csv, split, standardize
from .models import ModelParams, TrainConfig, fit, forward

RATIO_GRID_DEFAULT = (0.0, 0.075, 0.15, 0.225, 0.30, 0.375, 0.45)
RATIO_MAX = 0.45

# Attack/training presets keyed by (dataset, model): outer iterations, outer
# rate, inner steps, inner rate, poisoning batch size (None = ratio-aligned).
PRESETS = {
    ("loan", "linear"): dict(t_out=120, gamma=0.9, inner_steps=30, inner_eta=0.1, batch=252),
    ("heart", "linear"): dict(t_out=50, gamma=0.9, inner_steps=40, inner_eta=0.1, batch=120),
    ("boston", "linear"): dict(t_out=100, gamma=0.9, inner_steps=40, inner_eta=0.1, batch=19),
    ("appliances", "linear"): dict(t_out=50, gamma=0.9, inner_steps=70, inner_eta=0.2, batch=740),
    ("loan", "mlp"): dict(t_out=150, gamma=0.9, inner_steps=90, inner_eta=0.1, batch=252),
    ("heart", "mlp"): dict(t_out=80, gamma=0.9, inner_steps=100, inner_eta=0.1, batch=120),
    ("synthetic", "linear"): dict(t_out=100, gamma=0.9, inner_steps=40, inner_eta=0.1, batch=None),
    ("synthetic", "mlp"): dict(t_out=100, gamma=0.9, inner_steps=60, inner_eta=0.1, batch=None),
}

DEFENSE_NAMES = ("trim", "huber", "sever", "proda", "bayesclean", "none")


def nmse(params: ModelParams, ds: Dataset) -> float:
    """Mean squared test error normalized by the mean squared label magnitude."""
    if ds.n < 1:
        raise ValueError("empty dataset")
    denom = float(ds.y @ ds.y) / ds.n
    if denom == 0.0:
        raise ValueError("undefined NMSE: test labels are all zero")
    r = forward(params, ds.X) - ds.y
    return (float(r @ r) / ds.n) / denom


def defense_gain(nmse_nodef: float, nmse_def: float) -> float:
    """Relative NMSE improvement of a defense, in percent (negative = harmful)."""
    if nmse_nodef <= 0.0:
        raise ValueError("no-defense NMSE must be positive")
    return (nmse_nodef - nmse_def) / nmse_nodef * 100.0


def stable_seed(*parts) -> int:
    """Platform-stable RNG seed from hashed (master seed, stage, ...) parts."""
    text = ":".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass
class ExperimentConfig:
    """Full grid description for one experiment run."""

    dataset_name: str = "synthetic"
    data_csv: str | None = None
    target_col: int | str | None = None
    has_header: bool = True
    synthetic_n: int = 400
    model: str = "linear"
    alphas: tuple = (1.0,)
    ratios: tuple = RATIO_GRID_DEFAULT
    defenses: tuple = ("trim", "huber", "sever", "proda", "bayesclean")
    repetitions: int = 10
    master_seed: int = 0
    split_ratios: tuple = (0.5, 0.15, 0.35)
    standardize: bool = True
    t_out: int | None = None
    gamma: float | None = None
    inner_steps: int | None = None
    inner_eta: float | None = None
    lam: float = 0.0
    train_eta: float | None = None
    train_epochs: int | None = None
    reject_rate: float = 0.4
    defense_params: dict = field(default_factory=dict)
    threads: int = 1
    output_dir: str = "runs"

    def __post_init__(self) -> None:
        if self.repetitions < 1:
            raise ValueError("need at least one repetition")
        if self.model not in ("linear", "mlp"):
            raise ValueError(f"unknown model {self.model!r}")
        self.alphas = tuple(float(a) for a in self.alphas)
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ValueError("alpha values must lie in [0, 1]")
        self.ratios = tuple(sorted(float(r) for r in self.ratios))
        if any(r < 0.0 or r > RATIO_MAX + 1e-12 for r in self.ratios):
            raise ValueError(f"poisoning ratios must lie in [0, {RATIO_MAX}]")
        if len(set(self.ratios)) != len(self.ratios):
            raise ValueError("duplicate poisoning ratios")
        unknown = set(self.defenses) - set(DEFENSE_NAMES)
        if unknown:
            raise ValueError(f"unknown defenses: {sorted(unknown)}")

    def preset(self) -> dict:
        key = (self.dataset_name, self.model)
        base = dict(PRESETS.get(key, PRESETS[("synthetic", self.model)]))
        for name in ("t_out", "gamma", "inner_steps", "inner_eta"):
            value = getattr(self, name)
            if value is not None:
                base[name] = value
        return base

    def train_config(self, seed: int) -> TrainConfig:
        preset = self.preset()
        return TrainConfig(kind=self.model,
                           eta=self.train_eta if self.train_eta is not None else preset["inner_eta"],
                           epochs=self.train_epochs if self.train_epochs is not None else preset["inner_steps"],
                           lam=self.lam, seed=seed)

    @staticmethod
    def from_json(path) -> "ExperimentConfig":
        payload = json.loads(Path(path).read_text())
        return ExperimentConfig(**payload)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["alphas"] = list(self.alphas)
        out["ratios"] = list(self.ratios)
        out["defenses"] = list(self.defenses)
        out["split_ratios"] = list(self.split_ratios)
        return out


@dataclass
class CellRecord:
    """One (alpha, ratio, defense, seed) evaluation."""

    dataset: str
    model: str
    alpha: float
    ratio: float
    defense: str
    seed: int
    status: str = "ok"
    nmse: float | None = None
    gain_pct: float | None = None
    error: str | None = None
    runtime_s: float = 0.0

    def sort_key(self):
        return (self.alpha, self.ratio, self.defense, self.seed)

    def to_dict(self, include_runtime: bool = False) -> dict:
        out = {
            "dataset": self.dataset, "model": self.model, "alpha": self.alpha,
            "ratio": self.ratio, "defense": self.defense, "seed": self.seed,
            "status": self.status, "nmse": self.nmse, "gain_pct": self.gain_pct,
            "error": self.error,
        }
        if include_runtime:
            out["runtime_s"] = self.runtime_s
        return out


@dataclass
class ExperimentReport:
    """All cell records plus per-cell aggregates over seeds."""

    config: dict
    records: list[CellRecord]

    @property
    def all_ok(self) -> bool:
        return all(r.status == "ok" for r in self.records)

    def aggregates(self) -> list[dict]:
        cells: dict[tuple, list[CellRecord]] = {}
        for rec in self.records:
            cells.setdefault((rec.alpha, rec.ratio, rec.defense), []).append(rec)
        nodef_nmse: dict[tuple, list[float]] = {}
        for (alpha, ratio, defense), group in cells.items():
            if defense == "none":
                nodef_nmse[(alpha, ratio)] = [r.nmse for r in group if r.status == "ok"]
        rows = []
        for (alpha, ratio, defense), group in sorted(cells.items()):
            gains = [r.gain_pct for r in group if r.status == "ok" and r.gain_pct is not None]
            base = nodef_nmse.get((alpha, ratio), [])
            rows.append({
                "dataset": self.config.get("dataset_name"),
                "model": self.config.get("model"),
                "alpha": alpha,
                "ratio": ratio,
                "defense": defense,
                "mean_gain_pct": float(np.mean(gains)) if gains else None,
                "std_gain_pct": float(np.std(gains, ddof=1)) if len(gains) > 1 else 0.0 if gains else None,
                "mean_nmse_nodef": float(np.mean(base)) if base else None,
                "n_ok": len(gains),
                "n_failed": sum(1 for r in group if r.status != "ok"),
            })
        return rows

    def to_json_bytes(self, include_runtime: bool = False) -> bytes:
        """Canonical JSON encoding: stable key order, records fully sorted.

        Wall-clock runtimes are left out by default so identical seeds yield
        byte-identical reports.
        """
        payload = {
            "config": self.config,
            "records": [r.to_dict(include_runtime) for r in
                        sorted(self.records, key=CellRecord.sort_key)],
            "aggregates": self.aggregates(),
        }
        return (json.dumps(payload, sort_keys=True, indent=1) + "\n").encode()

    def write(self, out_dir) -> dict:
        """Write report.json, aggregates.csv, and a timing sidecar; return paths."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path = out_dir / "report.json"
        report_path.write_bytes(self.to_json_bytes())

        csv_path = out_dir / "aggregates.csv"
        cols = ["dataset", "model", "alpha", "ratio", "defense",
                "mean_gain_pct", "std_gain_pct", "mean_nmse_nodef"]
        lines = [",".join(cols)]
        for row in self.aggregates():
            lines.append(",".join("" if row[c] is None else repr(row[c])
                                  if isinstance(row[c], float) else str(row[c])
                                  for c in cols))
        csv_path.write_text("\n".join(lines) + "\n")

        timing_path = out_dir / "timings.json"
        timings = {f"{r.alpha}/{r.ratio}/{r.defense}/{r.seed}": r.runtime_s
                   for r in sorted(self.records, key=CellRecord.sort_key)}
        timing_path.write_text(json.dumps(timings, sort_keys=True, indent=1) + "\n")
        return {"report": report_path, "aggregates": csv_path, "timings": timing_path}


def run_defense(name: str, train_ds: Dataset, cfg: TrainConfig, reject_rate: float,
                params: dict):
    """Dispatch one defense; returns (model params, kept indices or None)."""
    opts = dict(params.get(name, {}))
    if name == "none":
        return fit(train_ds, cfg), None
    if name == "trim":
        report = defenses_mod.trim(train_ds, opts.get("reject_rate", reject_rate),
                                   cfg, opts.get("max_iters", defenses_mod.TRIM_MAX_ITERS))
        return report.final_params, report.kept_indices
    if name == "huber":
        result = defenses_mod.huber_fit(
            train_ds,
            opts.get("epsilon_grid", defenses_mod.HUBER_GRID),
            opts.get("ridge", defenses_mod.HUBER_RIDGE),
            opts.get("max_iters", defenses_mod.HUBER_MAX_ITERS),
            cv_seed=opts.get("cv_seed", cfg.seed),
        )
        return result.params, None
    if name == "sever":
        report = defenses_mod.sever(train_ds, opts.get("reject_rate", reject_rate),
                                    opts.get("rounds", defenses_mod.SEVER_ROUNDS), cfg)
        return report.final_params, report.kept_indices
    if name == "proda":
        model = defenses_mod.proda(
            train_ds,
            opts.get("group_size", defenses_mod.PRODA_GROUP_SIZE),
            opts.get("eps", defenses_mod.PRODA_EPS),
            opts.get("reject_rate", reject_rate),
            opts.get("worst_case_ratio", defenses_mod.PRODA_WORST_CASE),
            seed=opts.get("seed", cfg.seed),
            select_on=opts.get("select_on", "subset"),
        )
        return model, None
    if name == "bayesclean":
        partition = bayes_mod.bayesclean(
            train_ds,
            opts.get("c1", bayes_mod.BAYESCLEAN_C1),
            opts.get("c2", bayes_mod.BAYESCLEAN_C2),
            max_iters=opts.get("max_iters", bayes_mod.EM_MAX_ITERS),
            symmetric=opts.get("symmetric", False),
        )
        return fit(train_ds.subset(partition.kept), cfg), partition.kept
    raise ValueError(f"unknown defense {name!r}")


def _load_raw(config: ExperimentConfig, rep: int) -> RawDataset:
    if config.data_csv is not None:
        return load_csv(config.data_csv, config.has_header, config.target_col)
    ds = gen_synthetic(config.synthetic_n, stable_seed(config.master_seed, rep, "data"))
    return RawDataset(ds.X, ds.y, column_names=["x", "y"])


def _ratio_batches(ratios, n_train: int):
    """Cumulative poisoning counts and the per-batch sizes between them."""
    counts = [int(round(r * n_train)) for r in ratios]
    positive = [c for c in counts if c > 0]
    sizes = list(np.diff([0] + positive))
    if any(s < 1 for s in sizes):
        raise ValueError("poisoning ratios too close together for this training size")
    return counts, sizes


def _run_repetition(config: ExperimentConfig, rep: int) -> list[CellRecord]:
    records: list[CellRecord] = []
    preset = config.preset()

    raw = _load_raw(config, rep)
    bundle = split(raw, config.split_ratios, stable_seed(config.master_seed, rep, "split"))
    if config.standardize:
        bundle, _ = standardize(bundle)
    train, val, test = bundle.train, bundle.val, bundle.test

    counts, batch_sizes = _ratio_batches(config.ratios, train.n)
    count_to_prefix = {0: 0}
    for k in range(len(batch_sizes)):
        count_to_prefix[int(np.sum(batch_sizes[:k + 1]))] = k + 1

    n_p = max(counts)
    eval_cfg = config.train_config(stable_seed(config.master_seed, rep, "train"))
    arch = eval_cfg.architecture(train.m)

    def make_plan(alpha: float) -> attack_mod.AttackPlan:
        return attack_mod.make_plan(
            train, arch, alpha, n_p, batch_sizes=batch_sizes,
            t_out=preset["t_out"], gamma=preset["gamma"],
            inner_steps=preset["inner_steps"], inner_eta=preset["inner_eta"],
            lam=config.lam, seed=stable_seed(config.master_seed, rep, "attack"))

    # One risk reference per repetition: the alpha = 1 crafting pass that
    # anchors normalization is alpha-independent by construction.
    risk_ref = 1.0
    if n_p > 0 and any(a < 1.0 for a in config.alphas):
        risk_ref = attack_mod.compute_R_ref(make_plan(1.0), val, train)

    for alpha in config.alphas:
        craft = None
        if n_p > 0:
            craft = attack_mod.craft_attack(make_plan(alpha), risk_ref, val, train)
        for ratio, count in zip(config.ratios, counts):
            poisoned = train if count == 0 else craft.apply(train, count_to_prefix[count])
            start = time.perf_counter()
            try:
                nodef_params = fit(poisoned, eval_cfg)
                nmse_nodef = nmse(nodef_params, test)
            except Exception as exc:  # record the failure, keep the run alive
                elapsed = time.perf_counter() - start
                for name in ("none", *config.defenses):
                    records.append(CellRecord(config.dataset_name, config.model,
                                              alpha, ratio, name, rep,
                                              status="failed", error=str(exc),
                                              runtime_s=elapsed))
                continue
            records.append(CellRecord(config.dataset_name, config.model, alpha,
                                      ratio, "none", rep, nmse=nmse_nodef,
                                      gain_pct=0.0,
                                      runtime_s=time.perf_counter() - start))

            for name in config.defenses:
                start = time.perf_counter()
                try:
                    params, _ = run_defense(
                        name, poisoned, eval_cfg, config.reject_rate,
                        config.defense_params)
                    value = nmse(params, test)
                    records.append(CellRecord(
                        config.dataset_name, config.model, alpha, ratio, name,
                        rep, nmse=value, gain_pct=defense_gain(nmse_nodef, value),
                        runtime_s=time.perf_counter() - start))
                except Exception as exc:
                    records.append(CellRecord(
                        config.dataset_name, config.model, alpha, ratio, name,
                        rep, status="failed", error=str(exc),
                        runtime_s=time.perf_counter() - start))
    return records


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Run the full (alpha, ratio, defense, seed) grid.

    Fully deterministic for a fixed master seed: every stage draws its own RNG
    stream from stable hashes, so thread scheduling and defense list changes
    never perturb the attack randomness.
    """
    reps = range(config.repetitions)
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            chunks = list(pool.map(lambda r: _run_repetition(config, r), reps))
    else:
        chunks = [_run_repetition(config, r) for r in reps]
    records = [rec for chunk in chunks for rec in chunk]
    records.sort(key=CellRecord.sort_key)
    return ExperimentReport(config=config.to_dict(), records=records)
