"""``bandit-certify`` command line interface.

Every flag can also be given in a flat ``key = value`` config file passed
with ``--config``; command-line flags win over the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bounds import BoundSettings
from .data import (convert_supervised, make_synthetic, read_dataset, read_labeled, split_holdout,
                   write_dataset, write_labeled)
from .estimators import true_risk_labeled
from .harness import CoverageEnv, ExperimentConfig, coverage_check, run_experiment
from .learn import certify, minimize_bound
from .optim import OptimSettings
from .policies import (GaussianPrior, LigParams, McSettings, read_policy, train_logging_policy,
                       write_policy)

def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _tau(value):
    return None if str(value).lower() == "auto" else float(value)


def _floats(value):
    return [float(v) for v in str(value).replace(",", " ").split()]


def _ints(value):
    return [int(v) for v in str(value).replace(",", " ").split()]


def _words(value):
    return str(value).replace(",", " ").split()


def _flag(value):
    return str(value).lower() in ("1", "true", "yes", "on")


def _shared(p):
    p.add_argument("--config", help="flat key = value file mirroring the flags")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--tau", type=_tau, default=None, help="'auto' (1/K) or a value in (0, 1]")
    p.add_argument("--xi", type=float, default=0.0)
    p.add_argument("--bound", choices=["ls", "catoni", "cbb"], default="cbb")
    p.add_argument("--n-lambda", type=int, default=100)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--mc-train", type=int, default=32)
    p.add_argument("--mc-eval", type=int, default=2048)
    p.add_argument("--policy-class", choices=["lig", "mixed_logit"], default="lig")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _build():
    parser = argparse.ArgumentParser(prog="bandit-certify", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {}

    def add(name, help):
        commands[name] = p = sub.add_parser(name, help=help)
        _shared(p)
        return p

    p = add("make-synth", "generate a labeled synthetic dataset")
    p.add_argument("--num-examples", type=int, default=20000)
    p.add_argument("--num-actions", type=int, default=10)
    p.add_argument("--feature-dim", type=int, default=20)
    p.add_argument("--label-seed", type=int, default=0)
    p.add_argument("--multilabel", type=_flag, default=False)
    p.add_argument("--name", default="labeled.jsonl")

    p = add("train-logger", "fit a softmax logger on a holdout split")
    p.add_argument("--data", required=True, help="labeled JSONL")
    p.add_argument("--holdout-fraction", type=float, default=0.05)
    p.add_argument("--l2", type=float, default=1e-6)
    p.add_argument("--logger-lr", type=float, default=0.1)
    p.add_argument("--logger-epochs", type=int, default=10)

    p = add("convert", "log bandit feedback from labeled data")
    p.add_argument("--data", required=True, help="labeled JSONL (the non-holdout split)")
    p.add_argument("--logger", required=True, help="logger policy JSON")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--name", default="logged.jsonl")

    p = add("optimize", "minimise a bound and certify the result")
    p.add_argument("--data", required=True, help="logged JSONL")

    p = add("certify", "certificate for a given policy")
    p.add_argument("--data", required=True, help="logged JSONL")
    p.add_argument("--policy", required=True)

    p = add("evaluate", "true risk of a policy on labeled data")
    p.add_argument("--policy", required=True)
    p.add_argument("--test", required=True, help="labeled JSONL")

    p = add("coverage", "empirical violation rate of a bound")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--num-actions", type=int, default=5)
    p.add_argument("--feature-dim", type=int, default=10)
    p.add_argument("--pool-size", type=int, default=200)
    p.add_argument("--n", type=int, default=2000)

    p = add("sweep", "run an experiment sweep")
    p.add_argument("--alphas", type=_floats, default=[1.0])
    p.add_argument("--bounds", type=_words, default=["cbb"])
    p.add_argument("--xis", type=_floats, default=[-0.5])
    p.add_argument("--ms", type=_ints, default=[1])
    p.add_argument("--seeds", type=_ints, default=[0])
    p.add_argument("--num-train", type=int, default=20000)
    p.add_argument("--num-test", type=int, default=5000)
    p.add_argument("--num-actions", type=int, default=10)
    p.add_argument("--feature-dim", type=int, default=20)
    p.add_argument("--multilabel", type=_flag, default=False)
    p.add_argument("--train-path")
    p.add_argument("--test-path")
    p.add_argument("--holdout-fraction", type=float, default=0.05)
    return parser, commands


def build_parser():
    return _build()[0]


def parse_args(argv=None):
    parser, commands = _build()
    args = parser.parse_args(argv)
    if args.config:
        sub = commands[args.command]
        known = {a.dest: a for a in sub._actions}
        values = {}
        for key, raw in read_config(args.config).items():
            if key not in known or key in ("config", "help"):
                parser.error(f"unknown config key {key!r} for {args.command}")
            action = known[key]
            values[key] = action.type(raw) if action.type else raw
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def _bound_settings(args):
    return BoundSettings(args.bound, args.tau, args.delta, args.xi if args.bound == "cbb" else 0.0,
                         args.n_lambda)


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def cmd_make_synth(args, out):
    data = make_synthetic(args.num_examples, args.num_actions, args.feature_dim,
                          label_rule_seed=args.label_seed, seed=args.seed,
                          multilabel=args.multilabel)
    write_labeled(data, out / args.name)
    print(out / args.name)


def cmd_train_logger(args, out):
    data = read_labeled(args.data)
    holdout, rest = split_holdout(data, args.holdout_fraction, args.seed)
    logger = train_logging_policy(holdout, l2=args.l2, lr=args.logger_lr,
                                  epochs=args.logger_epochs, seed=args.seed)
    write_policy(logger, out / "logger.json")
    write_labeled(rest, out / "rest.jsonl")
    print(out / "logger.json")


def cmd_convert(args, out):
    logged = convert_supervised(read_labeled(args.data), read_policy(args.logger), args.alpha,
                                m=args.m, seed=args.seed)
    write_dataset(logged, out / args.name)
    print(out / args.name)


def _certify_and_write(policy, data, prior, args, out, extra=None):
    cert = certify(policy, data, prior, _bound_settings(args), McSettings(args.mc_eval, args.seed),
                   policy_class=args.policy_class, extra_settings=extra)
    cert.to_json(out / "certificate.json")
    print(f"{cert.verdict}: guaranteed risk {cert.guaranteed_risk:.6f}, "
          f"logging risk {cert.logging_risk:.6f}, "
          f"guaranteed improvement {cert.guaranteed_improvement:.6f}")
    return cert


def cmd_optimize(args, out):
    data = read_dataset(args.data)
    prior = GaussianPrior.from_logger(data.logger)
    optim = OptimSettings(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                          seed=args.seed)
    policy, trajectory = minimize_bound(data, prior, _bound_settings(args), optim,
                                        McSettings(args.mc_train, args.seed),
                                        policy_class=args.policy_class)
    write_policy(policy, out / "policy.json")
    _write_json([r.to_dict() for r in trajectory], out / "trajectory.json")
    _certify_and_write(policy, data, prior, args, out,
                       {"batch_size": optim.batch_size, "epochs": optim.epochs, "lr": optim.lr,
                        "optim_seed": optim.seed, "mc_train": args.mc_train})


def cmd_certify(args, out):
    data = read_dataset(args.data)
    policy = read_policy(args.policy)
    if not isinstance(policy, LigParams):
        raise SystemExit("certify needs a LIG policy file")
    _certify_and_write(policy, data, GaussianPrior.from_logger(data.logger), args, out)


def cmd_evaluate(args, out):
    test = read_labeled(args.test)
    risk = true_risk_labeled(read_policy(args.policy), test, McSettings(args.mc_eval, args.seed))
    _write_json({"true_risk": risk, "num_examples": len(test), "mc_samples": args.mc_eval},
                out / "evaluation.json")
    print(f"true risk {risk:.6f}")


def cmd_coverage(args, out):
    env = CoverageEnv(num_actions=args.num_actions, feature_dim=args.feature_dim,
                      pool_size=args.pool_size, n=args.n, seed=args.seed)
    report = coverage_check(env, args.bound, args.trials, args.seed, xi=args.xi,
                            delta=args.delta, tau=args.tau)
    _write_json(report.to_dict(), out / f"coverage_{args.bound}.json")
    print(f"{report.kind}: {report.violations}/{report.trials} violations "
          f"(rate {report.rate:.4f}, 95% CI [{report.ci_low:.4f}, {report.ci_high:.4f}])")


def cmd_sweep(args, out):
    config = ExperimentConfig(
        alphas=args.alphas, bounds=args.bounds, xis=args.xis, ms=args.ms, seeds=args.seeds,
        num_train=args.num_train, num_test=args.num_test, num_actions=args.num_actions,
        feature_dim=args.feature_dim, multilabel=args.multilabel, train_path=args.train_path,
        test_path=args.test_path, holdout_fraction=args.holdout_fraction, tau=args.tau,
        delta=args.delta, n_lambda=args.n_lambda, epochs=args.epochs, lr=args.lr,
        batch_size=args.batch_size, mc_train=args.mc_train, mc_eval=args.mc_eval,
        policy_class=args.policy_class, out_dir=str(out))
    rows = run_experiment(config)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} cells, {failed} failed; results in {out / 'results.csv'}")


COMMANDS = {
    "make-synth": cmd_make_synth, "train-logger": cmd_train_logger, "convert": cmd_convert,
    "optimize": cmd_optimize, "certify": cmd_certify, "evaluate": cmd_evaluate,
    "coverage": cmd_coverage, "sweep": cmd_sweep,
}


def main(argv=None):
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        COMMANDS[args.command](args, out)
    except (ValueError, FloatingPointError, OSError) as exc:
        print(f"bandit-certify {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
