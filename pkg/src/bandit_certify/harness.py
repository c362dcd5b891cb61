"""Experiment sweeps on supervised-to-bandit conversions, the coverage
oracle, and report emission.

Every cell of a sweep derives all of its randomness from its own seed, so
any subset of cells rerun alone reproduces the rows of the full run.
Wall-clock times go to a separate timings file to keep the results file
bit-reproducible.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import binomtest

from .bounds import KINDS, BoundSettings, evaluate_bound
from .data import (LabeledDataset, LoggedDataset, convert_supervised, make_synthetic,
                   read_labeled, split_holdout)
from .estimators import true_risk_labeled
from .learn import certify, minimize_bound
from .optim import OptimSettings
from .policies import (GaussianPrior, LigParams, McSettings, SoftmaxParams, draw_eps, draws_for,
                       lig_propensities, propensities_for, softmax_propensities,
                       train_logging_policy)

log = logging.getLogger(__name__)

# (name, type) of every results column, in file order
FIELDS = [
    ("alpha", float), ("bound", str), ("xi", float), ("m", int), ("seed", int),
    ("status", str), ("guaranteed_risk", float), ("true_risk", float),
    ("guaranteed_improvement", float), ("logging_risk_true", float),
    ("logging_risk_est", float), ("init_bound", float), ("empirical_term", float),
    ("kl", float), ("sigma", float), ("chosen_lambda", float), ("best_epoch", int),
    ("num_records", int), ("mc_eval", int), ("error", str),
]
KEY_FIELDS = ("alpha", "bound", "xi", "m", "seed")


@dataclass(frozen=True)
class ExperimentConfig:
    """A sweep over (alpha, bound, xi, m, seed).

    ``xis`` only applies to the CBB bound; LS and Catoni cells get ``xi``
    left empty.  ``tau=None`` means 1/K.
    """

    alphas: Sequence[float] = (1.0,)
    bounds: Sequence[str] = ("cbb",)
    xis: Sequence[float] = (-0.5,)
    ms: Sequence[int] = (1,)
    seeds: Sequence[int] = (0,)
    num_train: int = 20000
    num_test: int = 5000
    num_actions: int = 10
    feature_dim: int = 20
    multilabel: bool = False
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    holdout_fraction: float = 0.05
    tau: Optional[float] = None
    delta: float = 0.05
    n_lambda: int = 100
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 256
    mc_train: int = 32
    mc_eval: int = 2048
    policy_class: str = "lig"
    out_dir: Optional[str] = None

    def __post_init__(self):
        for name in ("alphas", "bounds", "xis", "ms", "seeds"):
            values = tuple(getattr(self, name))
            if not values:
                raise ValueError(f"{name} must be nonempty")
            object.__setattr__(self, name, values)
        bad = [b for b in self.bounds if b.lower() not in KINDS]
        if bad:
            raise ValueError(f"unknown bound kinds {bad}")
        object.__setattr__(self, "bounds", tuple(b.lower() for b in self.bounds))
        if any(m < 1 for m in self.ms):
            raise ValueError("interaction counts must be >= 1")
        if (self.train_path is None) != (self.test_path is None):
            raise ValueError("give both train_path and test_path or neither")

    def cells(self):
        for alpha, kind, m, seed in itertools.product(self.alphas, self.bounds, self.ms, self.seeds):
            for xi in (self.xis if kind == "cbb" else (None,)):
                yield alpha, kind, xi, m, seed


def _cell_seeds(seed):
    names = ("rule", "train", "test", "split", "logger", "log", "mc_train", "optim", "mc_eval")
    state = np.random.SeedSequence(seed).generate_state(len(names))
    return dict(zip(names, (int(s) for s in state)))


def _labeled_data(config: ExperimentConfig, seeds):
    if config.train_path is not None:
        return read_labeled(config.train_path), read_labeled(config.test_path)
    args = (config.num_actions, config.feature_dim)
    train = make_synthetic(config.num_train, *args, label_rule_seed=seeds["rule"],
                           seed=seeds["train"], multilabel=config.multilabel)
    test = make_synthetic(config.num_test, *args, label_rule_seed=seeds["rule"],
                          seed=seeds["test"], multilabel=config.multilabel)
    return train, test


def prepare_cell_data(config: ExperimentConfig, alpha, m, seed):
    """Logger on the holdout split, logged data on the rest, labeled test set."""
    seeds = _cell_seeds(seed)
    train, test = _labeled_data(config, seeds)
    holdout, rest = split_holdout(train, config.holdout_fraction, seeds["split"])
    logger = train_logging_policy(holdout, seed=seeds["logger"])
    logged = convert_supervised(rest, logger, alpha, m=m, seed=seeds["log"])
    return logged, test, seeds


def run_cell(config: ExperimentConfig, alpha, kind, xi, m, seed, cert_dir=None):
    """Run one sweep cell; failures are reported in the row, not raised."""
    row = {name: None for name, _ in FIELDS}
    row.update(alpha=float(alpha), bound=kind, xi=None if xi is None else float(xi), m=int(m),
               seed=int(seed), mc_eval=config.mc_eval)
    try:
        data, test, seeds = prepare_cell_data(config, alpha, m, seed)
        prior = GaussianPrior.from_logger(data.logger)
        settings = BoundSettings(kind, config.tau, config.delta, 0.0 if xi is None else xi,
                                 config.n_lambda)
        optim = OptimSettings(lr=config.lr, epochs=config.epochs, batch_size=config.batch_size,
                              seed=seeds["optim"])
        mc_train = McSettings(config.mc_train, seeds["mc_train"])
        mc_eval = McSettings(config.mc_eval, seeds["mc_eval"])
        policy, trajectory = minimize_bound(data, prior, settings, optim, mc_train,
                                            policy_class=config.policy_class)
        cert = certify(policy, data, prior, settings, mc_eval, policy_class=config.policy_class,
                       extra_settings={"batch_size": optim.batch_size, "epochs": optim.epochs,
                                       "lr": optim.lr, "optim_seed": optim.seed,
                                       "mc_train": config.mc_train, "cell_seed": seed})
        values = [r.bound_value for r in trajectory]
        row.update(
            status="ok",
            guaranteed_risk=cert.guaranteed_risk,
            true_risk=_true_risk(policy, test, mc_eval, config.policy_class),
            guaranteed_improvement=cert.guaranteed_improvement,
            logging_risk_true=true_risk_labeled(data.logger, test),
            logging_risk_est=cert.logging_risk,
            init_bound=values[0],
            empirical_term=cert.bound_report.empirical_term,
            kl=cert.bound_report.kl,
            sigma=policy.sigma,
            chosen_lambda=cert.bound_report.chosen_lambda,
            best_epoch=int(np.argmin(values)),
            num_records=len(data),
        )
        if cert_dir is not None:
            cert.to_json(Path(cert_dir) / f"{cell_id(row)}.json")
    except Exception as exc:  # recorded per cell, the sweep continues
        log.warning("cell %s failed: %s", cell_id(row), exc)
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return row


def _true_risk(policy, test: LabeledDataset, mc, policy_class):
    if policy_class == "lig":
        return true_risk_labeled(policy, test, mc)
    P = propensities_for(policy_class, policy, test.features,
                         draws_for(policy_class, mc, test.num_actions))
    return -float(np.mean(np.sum(P * test.label_matrix, axis=1)))


def cell_id(row):
    xi = "na" if row["xi"] is None else repr(row["xi"])
    return f"a{row['alpha']!r}_{row['bound']}_xi{xi}_m{row['m']}_s{row['seed']}"


def run_experiment(config: ExperimentConfig, cells=None):
    """Run every cell (or the given subset) and write the reports.

    Writes ``results.csv`` (one row per cell), ``results.json`` (long
    format, one metric per entry), ``timings.csv`` and one certificate per
    successful cell when ``config.out_dir`` is set.  Returns the rows.
    """
    out = Path(config.out_dir) if config.out_dir is not None else None
    cert_dir = None
    if out is not None:
        cert_dir = out / "certificates"
        cert_dir.mkdir(parents=True, exist_ok=True)
    rows, timings = [], []
    for cell in (config.cells() if cells is None else cells):
        start = time.perf_counter()
        row = run_cell(config, *cell, cert_dir=cert_dir)
        elapsed = time.perf_counter() - start
        log.info("cell %s: %s in %.1fs", cell_id(row), row["status"], elapsed)
        rows.append(row)
        timings.append({"cell": cell_id(row), "runtime_s": elapsed})
    if out is not None:
        emit_report(rows, out / "results.csv", "csv")
        emit_report(rows, out / "results.json", "json")
        with open(out / "timings.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["cell", "runtime_s"])
            writer.writeheader()
            writer.writerows(timings)
        with open(out / "config.json", "w") as fh:
            json.dump(asdict(config), fh, indent=2)
    return rows


# -- reports ----------------------------------------------------------------------


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _parse(value, kind):
    if value == "" or value is None:
        return None
    return kind(value)


def emit_report(rows, path, fmt="csv"):
    """Write rows as a wide CSV or as long-format JSON (one metric per entry)."""
    path = Path(path)
    names = [name for name, _ in FIELDS]
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(names)
            for row in rows:
                writer.writerow([_fmt(row.get(name)) for name in names])
    elif fmt == "json":
        entries = []
        for row in rows:
            key = {k: row.get(k) for k in KEY_FIELDS}
            for name in names:
                if name not in KEY_FIELDS:
                    entries.append({**key, "metric": name, "value": row.get(name)})
        with open(path, "w") as fh:
            json.dump(entries, fh, indent=1)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def read_report(path):
    """Inverse of :func:`emit_report` for either format."""
    path = Path(path)
    types = dict(FIELDS)
    if path.suffix == ".json":
        with open(path) as fh:
            entries = json.load(fh)
        rows, index = [], {}
        for e in entries:
            key = tuple(e[k] for k in KEY_FIELDS)
            if key not in index:
                index[key] = {name: None for name in types}
                index[key].update({k: e[k] for k in KEY_FIELDS})
                rows.append(index[key])
            index[key][e["metric"]] = e["value"]
        return rows
    with open(path, newline="") as fh:
        return [{k: _parse(v, types[k]) for k, v in r.items()} for r in csv.DictReader(fh)]


# -- coverage oracle --------------------------------------------------------------


@dataclass(frozen=True)
class CoverageEnv:
    """Finite-pool environment in which true policy risks are computable.

    Contexts are uniform over ``pool_size`` fixed feature vectors, each with
    one correct action given by a hidden linear scorer.  The logger is a
    softmax policy trained on a separate labeled sample from the pool.
    """

    num_actions: int = 5
    feature_dim: int = 10
    pool_size: int = 200
    n: int = 2000
    alpha: float = 1.0
    logger_sample: int = 200
    policy_spread: float = 0.5
    mc_bound: int = 256
    mc_truth: int = 4096
    seed: int = 0

    def build(self):
        rule, pool_seed, train_seed = np.random.SeedSequence(self.seed).generate_state(3)
        pool = make_synthetic(self.pool_size, self.num_actions, self.feature_dim,
                              label_rule_seed=int(rule), seed=int(pool_seed))
        idx = np.random.default_rng(int(train_seed)).integers(0, self.pool_size,
                                                              self.logger_sample)
        logger = train_logging_policy(pool.subset(idx), seed=int(train_seed)).scaled(self.alpha)
        return pool, logger


@dataclass
class CoverageReport:
    kind: str
    xi: Optional[float]
    delta: float
    trials: int
    violations: int
    rate: float
    ci_low: float
    ci_high: float
    threshold: float
    mean_bound: float
    mean_true_risk: float
    min_gap: float

    def to_dict(self):
        return asdict(self)


def _log_from_pool(pool: LabeledDataset, logger: SoftmaxParams, n, rng):
    idx = rng.integers(0, len(pool), n)
    probs = softmax_propensities(logger, pool.features)[idx]
    u = rng.random(n)
    actions = np.minimum((u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1), pool.num_actions - 1)
    return LoggedDataset(features=pool.features[idx], actions=actions,
                         costs=-pool.label_matrix[idx, actions].astype(float),
                         propensities=probs[np.arange(n), actions],
                         num_actions=pool.num_actions, logger=logger)


def coverage_check(env: CoverageEnv, kind, trials, seed, xi=0.0, delta=0.05, tau=None):
    """Count trials in which the true risk of a fixed random policy exceeds its bound.

    The policy of each trial is drawn from a prior-centred distribution
    before that trial's data.  Returns a :class:`CoverageReport` with a
    Clopper-Pearson interval on the violation rate.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    pool, logger = env.build()
    prior = GaussianPrior.from_logger(logger)
    settings = BoundSettings(kind, tau, delta, xi if kind == "cbb" else 0.0)
    violations, bounds, risks, gaps = 0, [], [], []
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        policy = LigParams(prior.mu0 + env.policy_spread * rng.standard_normal(prior.mu0.shape),
                           rng.uniform(0.3, 1.0))
        data = _log_from_pool(pool, logger, env.n, rng)
        mc_seed = int(rng.integers(2**31))
        report = evaluate_bound(policy, data, prior, settings, McSettings(env.mc_bound, mc_seed))
        if not math.isfinite(report.bound_value):
            raise FloatingPointError(f"non-finite bound in trial {t}")
        P = lig_propensities(policy, pool.features, draw_eps(McSettings(env.mc_truth, mc_seed + 1)))
        risk = -float(np.mean(np.sum(P * pool.label_matrix, axis=1)))
        violations += risk > report.bound_value
        bounds.append(report.bound_value)
        risks.append(risk)
        gaps.append(report.bound_value - risk)
    ci = binomtest(violations, trials, delta).proportion_ci(confidence_level=0.95)
    return CoverageReport(
        kind=settings.kind, xi=settings.xi if kind == "cbb" else None, delta=delta,
        trials=trials, violations=int(violations), rate=violations / trials,
        ci_low=float(ci.low), ci_high=float(ci.high),
        threshold=delta + 3 * math.sqrt(delta * (1 - delta) / trials),
        mean_bound=float(np.mean(bounds)), mean_true_risk=float(np.mean(risks)),
        min_gap=float(np.min(gaps)))
