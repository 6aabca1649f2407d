"""Command-line entry point: ``intact-vae {synth,ihdp,verify,report} ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

from . import experiments as exp
from .ihdp import build_ihdp_archive
from .report import FORMATS, render_report

log = logging.getLogger("intact_vae")


def _noise_point(text: str) -> List[float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ALPHA,BETA, got {text!r}")
    return [a, b]


def _assignment(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with ExperimentConfig fields")
    p.add_argument("--out", dest="output_dir", help="output directory")
    p.add_argument("--seed", dest="master_seed", type=int, help="master seed")
    p.add_argument("--workers", type=int, help="worker processes")
    p.add_argument("--restarts", type=int, help="initializations per run, best validation ELBO kept")
    p.add_argument("--eval-samples", type=int, help="latent samples per estimate")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--balance-gamma", type=float, help="weight of the group-balancing penalty")
    p.add_argument("--sinkhorn-epsilon", type=float)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--hidden", type=int, nargs="+", help="hidden layer widths")
    p.add_argument("--conditional-prior", action="store_true", help="let the prior depend on t")
    p.add_argument("--separate-heads", action="store_true", help="one decoder network per arm")
    p.add_argument("--fixed-noise", type=float, metavar="VAR",
                   help="constant outcome variance instead of a learned one")
    p.add_argument("--set", action="append", type=_assignment, default=[], metavar="KEY=JSON",
                   help="any other ExperimentConfig field (repeatable)")


def _synthetic_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--structures", nargs="+", choices=["unconfounded", "proxy", "iv"])
    p.add_argument("--families", dest="outcome_families", nargs="+", choices=["linear", "nonlinear"])
    p.add_argument("--noise", dest="noise_points", nargs="+", type=_noise_point, metavar="ALPHA,BETA")
    p.add_argument("--n-dgps", type=int)
    p.add_argument("--dgp-offset", type=int)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--normalize-ate", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intact-vae", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="group", required=True)

    synth = sub.add_parser("synth", help="synthetic DGP sweeps").add_subparsers(dest="action", required=True)
    p = synth.add_parser("run", help="train and evaluate on random synthetic DGPs")
    _common(p)
    _synthetic_flags(p)

    ihdp = sub.add_parser("ihdp", help="IHDP benchmark").add_subparsers(dest="action", required=True)
    p = ihdp.add_parser("run", help="train and evaluate on IHDP replications")
    _common(p)
    p.add_argument("--archive", dest="ihdp_archive", help="archive path (default: $IHDP_DATA)")
    p.add_argument("--reps", dest="replications", type=int, nargs=2, metavar=("START", "STOP"))
    p.add_argument("--variants", dest="ihdp_variants", nargs="+", choices=sorted(exp.IHDP_VARIANTS))
    p = ihdp.add_parser("build", help="write a replication archive over the bundled covariates")
    p.add_argument("path")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)

    verify = sub.add_parser("verify", help="identifiability checks").add_subparsers(dest="action", required=True)
    p = verify.add_parser("ident", help="affine equivalence of two independently trained models")
    _common(p)
    _synthetic_flags(p)
    p.add_argument("--threshold", dest="r2_threshold", type=float)
    p.add_argument("--no-conditional", dest="compare_conditional_prior", action="store_false", default=None)
    p = verify.add_parser("thm3", help="score recovery with a deterministic latent")
    _common(p)
    p.add_argument("--samples", dest="thm3_samples", type=int)
    p.add_argument("--outcome", dest="thm3_outcome", choices=["linear", "monotone", "null"])

    p = sub.add_parser("report", help="tables and plots from run records")
    p.add_argument("inputs", nargs="+", help="JSON-lines record files")
    p.add_argument("--out", required=True)
    p.add_argument("--formats", nargs="+", choices=FORMATS, default=list(FORMATS))
    p.add_argument("--runs", nargs="+", help="restrict plots to these run ids")
    return parser


KIND = {("synth", "run"): "synthetic", ("ihdp", "run"): "ihdp",
        ("verify", "ident"): "verify_identifiability", ("verify", "thm3"): "verify_theorem3"}
TOP_LEVEL = ("output_dir", "master_seed", "workers", "restarts", "eval_samples", "structures",
             "outcome_families", "noise_points", "n_dgps", "dgp_offset", "n_samples", "normalize_ate",
             "ihdp_archive", "replications", "ihdp_variants", "r2_threshold",
             "compare_conditional_prior", "thm3_samples", "thm3_outcome")


def config_from_args(args: argparse.Namespace) -> exp.ExperimentConfig:
    base = {}
    if args.config:
        with open(args.config) as fh:
            base = json.load(fh)
    base["kind"] = KIND[(args.group, args.action)]
    if base["kind"] == "verify_identifiability":
        base.setdefault("noise_points", [[0.05, 0.05]])
    for name in TOP_LEVEL:
        value = getattr(args, name, None)
        if value is not None:
            base[name] = value
    train = dict(base.get("train", exp.SWEEP_TRAIN))
    for flag, key in (("lr", "learning_rate"), ("batch_size", "batch_size"), ("max_epochs", "max_epochs"),
                      ("patience", "patience"), ("dtype", "dtype"), ("balance_gamma", "balance_gamma")):
        if getattr(args, flag) is not None:
            train[key] = getattr(args, flag)
    base["train"] = train
    balance = dict(base.get("balance", {}))
    if args.sinkhorn_epsilon is not None:
        balance["sinkhorn_epsilon"] = args.sinkhorn_epsilon
    base["balance"] = balance
    model = dict(base.get("model", {}))
    if args.latent_dim is not None:
        model["latent_dim"] = args.latent_dim
    if args.hidden:
        model["hidden"] = args.hidden
    if args.conditional_prior:
        model["balanced_prior"] = False
    if args.separate_heads:
        model["separate_decoder_heads"] = True
    if args.fixed_noise is not None:
        model.update(learn_outcome_noise=False, outcome_var=args.fixed_noise)
    base["model"] = model
    for key, value in args.set:
        section, _, sub = key.partition(".")
        if sub:
            base.setdefault(section, {})[sub] = value
        else:
            base[key] = value
    return exp.ExperimentConfig.from_dict(base)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    if args.group == "report":
        for path in render_report(args.inputs, args.out, args.formats, args.runs):
            print(path)
        return 0
    if args.group == "ihdp" and args.action == "build":
        print(build_ihdp_archive(args.path, args.reps, args.seed))
        return 0

    cfg = config_from_args(args)
    out = cfg.prepare_output()
    (out / f"config.{cfg.kind}.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    if cfg.kind == "synthetic":
        records = exp.run_synthetic_suite(cfg)
    elif cfg.kind == "ihdp":
        records = exp.run_ihdp_suite(cfg)
        print(json.dumps(exp.ihdp_aggregate(records), indent=1))
    elif cfg.kind == "verify_identifiability":
        result = exp.verify_identifiability(cfg)
        print(json.dumps(result, indent=1))
        return 0 if result["passed"] else 1
    else:
        result = exp.verify_theorem3(cfg)
        print(json.dumps(result, indent=1))
        return 0 if result["passed"] else 1
    failed = sum(r["status"] != "ok" for r in records)
    print(f"{len(records)} runs, {failed} failed; records in {out}")
    return 0 if failed == 0 else 2


if __name__ == "__main__":
    sys.exit(main())
