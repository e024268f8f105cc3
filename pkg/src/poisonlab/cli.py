"""Command-line harness: synth | attack | defend | experiment."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from . import bayes as bayes_mod
from . import defenses as defenses_mod
from .data import gen_synthetic, load_csv, split, standardize, write_csv
from .harness import (
    DEFENSE_NAMES,
    ExperimentConfig,
    defense_gain,
    nmse,
    run_defense,
    run_experiment,
    stable_seed,
)
from .models import TrainConfig, fit, save_params

ENV_OUTDIR = "POISONLAB_OUTDIR"

PLAN_KEYS = ("alpha", "n_p", "batch_size", "t_out", "gamma", "inner_t",
             "inner_eta", "lambda", "seed", "domain")


def _out_dir(arg: str | None) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get(ENV_OUTDIR, "runs"))


def _parse_split(text: str):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated fractions")
    return tuple(parts)


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="CSV file (last column is the target by default)")
    p.add_argument("--target-col", default=None,
                   help="target column index or header name")
    p.add_argument("--no-header", action="store_true", help="CSV has no header row")
    p.add_argument("--synthetic", type=int, default=None, metavar="N",
                   help="generate N synthetic rows instead of reading a CSV")
    p.add_argument("--split", type=_parse_split, default=(0.5, 0.15, 0.35),
                   help="train,val,test fractions (default 0.5,0.15,0.35)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-standardize", action="store_true",
                   help="skip standardization against the clean training stats")


def _load_bundle(args):
    if args.data:
        raw = load_csv(args.data, has_header=not args.no_header,
                       target_col=args.target_col)
    elif args.synthetic is not None:
        ds = gen_synthetic(args.synthetic, stable_seed(args.seed, "data"))
        from .data import RawDataset
        raw = RawDataset(ds.X, ds.y, column_names=["x", "y"])
    else:
        raise SystemExit("need --data or --synthetic")
    bundle = split(raw, args.split, stable_seed(args.seed, "split"))
    if not args.no_standardize:
        bundle, _ = standardize(bundle)
    return raw, bundle


def _cmd_synth(args) -> int:
    ds = gen_synthetic(args.n, args.seed)
    write_csv(ds, args.out, column_names=["x", "y"])
    print(f"wrote {ds.n} rows to {args.out}")
    return 0


def _read_plan_file(path) -> dict:
    payload = json.loads(Path(path).read_text())
    unknown = set(payload) - set(PLAN_KEYS)
    if unknown:
        raise SystemExit(f"unknown plan keys: {sorted(unknown)} (known: {PLAN_KEYS})")
    return payload


def _cmd_attack(args) -> int:
    plan_file = _read_plan_file(args.plan) if args.plan else {}

    def opt(name, flag_value, default):
        if flag_value is not None:
            return flag_value
        return plan_file.get(name, default)

    raw, bundle = _load_bundle(args)
    train, val = bundle.train, bundle.val

    alpha = float(opt("alpha", args.alpha, 1.0))
    if args.ratio is not None:
        n_p = int(round(args.ratio * train.n))
    else:
        n_p = int(opt("n_p", args.n_p, round(0.2 * train.n)))
    batch_size = opt("batch_size", args.batch_size, None)
    seed = int(opt("seed", None, args.seed))

    domain = None
    domain_spec = plan_file.get("domain", "data")
    if isinstance(domain_spec, dict):
        domain = attack_mod.FeasibleDomain(
            np.asarray(domain_spec["feature_low"], dtype=float),
            np.asarray(domain_spec["feature_high"], dtype=float),
            float(domain_spec["label_low"]), float(domain_spec["label_high"]))

    cfg = TrainConfig(kind=args.model)
    plan = attack_mod.make_plan(
        train, cfg.architecture(train.m), alpha, n_p,
        batch_size=int(batch_size) if batch_size else None,
        t_out=int(opt("t_out", args.t_out, 100)),
        gamma=float(opt("gamma", args.gamma, 0.9)),
        inner_steps=int(opt("inner_t", args.inner_t, 40)),
        inner_eta=float(opt("inner_eta", args.inner_eta, 0.1)),
        lam=float(opt("lambda", args.reg_lambda, 0.0)),
        seed=seed, domain=domain)

    risk_ref = 1.0
    if alpha < 1.0 and n_p > 0:
        risk_ref = attack_mod.compute_R_ref(plan, val, train)
    craft = attack_mod.craft_attack(plan, risk_ref, val, train, inject=args.inject)

    out_dir = _out_dir(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    poisoned_path = out_dir / "poisoned_train.csv"
    mask = craft.poison_mask(train.n)
    write_csv(craft.poisoned, poisoned_path, column_names=raw.column_names,
              is_poison=mask)
    summary = {
        "alpha": alpha, "n_p": n_p, "n_batches": plan.n_batches,
        "risk_ref": risk_ref,
        "eff_refs": craft.refs.eff_refs,
        "batch_risks": [b.risk for b in craft.batches],
        "inject": args.inject,
        "poisoning_ratio": n_p / train.n,
    }
    (out_dir / "attack_summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"wrote {poisoned_path} ({int(mask.sum())} poisoned rows)")
    return 0


def _cmd_defend(args) -> int:
    raw = load_csv(args.data, has_header=not args.no_header,
                   target_col=args.target_col)
    is_poison = None
    if "is_poison" in raw.column_names[:-1]:
        col = raw.column_names.index("is_poison")
        is_poison = raw.X[:, col].astype(bool)
        keep_cols = [j for j in range(raw.m) if j != col]
        from .data import Dataset
        train = Dataset(raw.X[:, keep_cols], raw.y)
    else:
        train = raw

    cfg = TrainConfig(kind=args.model, eta=args.train_eta, epochs=args.train_epochs,
                      seed=args.seed)
    opts = json.loads(args.params) if args.params else {}
    params, kept = run_defense(args.defense, train, cfg, args.reject_rate,
                               {args.defense: opts})

    out_dir = _out_dir(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_params(params, out_dir / "defended_model.json")

    report = {"defense": args.defense, "n": train.n,
              "kept": None if kept is None else int(len(kept)),
              "rejected": None if kept is None else int(train.n - len(kept))}
    if kept is not None:
        kept = np.asarray(kept)
        kept_ds = train.subset(kept)
        write_csv(kept_ds, out_dir / "kept.csv")
        if is_poison is not None:
            n_poison = int(is_poison.sum())
            caught = int(is_poison.sum() - is_poison[kept].sum())
            report["poison_recall"] = caught / n_poison if n_poison else None
    if args.defense == "bayesclean":
        partition = bayes_mod.bayesclean(train, **{k: v for k, v in opts.items()
                                                   if k in ("c1", "c2", "symmetric")})
        bayes_mod.write_partition_csv(partition, train, out_dir / "partition.csv")
    (out_dir / "defense_report.json").write_text(json.dumps(report, indent=1) + "\n")
    print(json.dumps(report))
    return 0


def _cmd_experiment(args) -> int:
    if args.config:
        config = ExperimentConfig.from_json(args.config)
    else:
        config = ExperimentConfig()
    overrides = {}
    if args.data:
        overrides["data_csv"] = args.data
        overrides["dataset_name"] = args.dataset_name or Path(args.data).stem
    if args.synthetic is not None:
        overrides["synthetic_n"] = args.synthetic
    if args.model:
        overrides["model"] = args.model
    if args.alphas:
        overrides["alphas"] = tuple(float(a) for a in args.alphas.split(","))
    if args.ratios:
        overrides["ratios"] = tuple(float(r) for r in args.ratios.split(","))
    if args.defenses:
        overrides["defenses"] = tuple(args.defenses.split(","))
    if args.reps is not None:
        overrides["repetitions"] = args.reps
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if overrides:
        import dataclasses
        config = dataclasses.replace(config, **overrides)

    report = run_experiment(config)
    out_dir = _out_dir(args.out_dir)
    paths = report.write(out_dir)
    n_failed = sum(1 for r in report.records if r.status != "ok")
    print(f"wrote {paths['report']} ({len(report.records)} cells, {n_failed} failed)")
    return 0 if report.all_ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poisonlab",
        description="Regression poisoning laboratory: attacks, defenses, experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="emit a synthetic CSV")
    p_synth.add_argument("--n", type=int, default=400)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", default="synthetic.csv")
    p_synth.set_defaults(func=_cmd_synth)

    p_attack = sub.add_parser("attack", help="craft a poisoned training CSV")
    _add_data_args(p_attack)
    p_attack.add_argument("--model", choices=("linear", "mlp"), default="linear")
    p_attack.add_argument("--plan", help="flat JSON plan file (flags override)")
    p_attack.add_argument("--alpha", type=float, default=None)
    p_attack.add_argument("--ratio", type=float, default=None,
                          help="poisoning budget as a fraction of training rows")
    p_attack.add_argument("--n-p", type=int, default=None, dest="n_p")
    p_attack.add_argument("--batch-size", type=int, default=None)
    p_attack.add_argument("--t-out", type=int, default=None)
    p_attack.add_argument("--gamma", type=float, default=None)
    p_attack.add_argument("--inner-t", type=int, default=None)
    p_attack.add_argument("--inner-eta", type=float, default=None)
    p_attack.add_argument("--lambda", type=float, default=None, dest="reg_lambda")
    p_attack.add_argument("--inject", action="store_true",
                          help="append poisoning points instead of replacing rows")
    p_attack.add_argument("--out-dir", default=None)
    p_attack.set_defaults(func=_cmd_attack)

    p_defend = sub.add_parser("defend", help="run one defense on a CSV")
    p_defend.add_argument("--data", required=True)
    p_defend.add_argument("--target-col", default=None)
    p_defend.add_argument("--no-header", action="store_true")
    p_defend.add_argument("--defense", choices=DEFENSE_NAMES, required=True)
    p_defend.add_argument("--model", choices=("linear", "mlp"), default="linear")
    p_defend.add_argument("--reject-rate", type=float, default=0.4)
    p_defend.add_argument("--train-eta", type=float, default=0.1)
    p_defend.add_argument("--train-epochs", type=int, default=40)
    p_defend.add_argument("--seed", type=int, default=0)
    p_defend.add_argument("--params", default=None,
                          help="JSON dict of defense-specific options")
    p_defend.add_argument("--out-dir", default=None)
    p_defend.set_defaults(func=_cmd_defend)

    p_exp = sub.add_parser("experiment", help="run the full evaluation grid")
    p_exp.add_argument("--config", help="ExperimentConfig JSON file")
    p_exp.add_argument("--data", default=None)
    p_exp.add_argument("--dataset-name", default=None)
    p_exp.add_argument("--synthetic", type=int, default=None)
    p_exp.add_argument("--model", choices=("linear", "mlp"), default=None)
    p_exp.add_argument("--alphas", default=None, help="comma-separated")
    p_exp.add_argument("--ratios", default=None, help="comma-separated")
    p_exp.add_argument("--defenses", default=None, help="comma-separated")
    p_exp.add_argument("--reps", type=int, default=None)
    p_exp.add_argument("--seed", type=int, default=None)
    p_exp.add_argument("--threads", type=int, default=None)
    p_exp.add_argument("--out-dir", default=None)
    p_exp.set_defaults(func=_cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
