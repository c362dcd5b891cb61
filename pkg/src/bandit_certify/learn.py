"""Certified policy learning: minimise a bound over LIG parameters, then
issue a deploy / keep-logging certificate.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .bounds import (BoundReport, BoundSettings, evaluate_bound, g_fn,
                     gaussian_kl, lambda_grid, multi_grid_size, xi_constants)
from .bounds import _log_ls
from .data import LoggedDataset
from .estimators import clipping_terms, estimate_logging_risk
from .optim import AdamState, OptimSettings, adam_step
from .policies import GaussianPrior, LigParams, McSettings, draws_for, propensities_for

__all__ = ["Certificate", "NonFiniteLossError", "adam_step", "certify", "minimize_bound",
           "BoundObjective"]

log = logging.getLogger(__name__)

DEPLOY = "DEPLOY"
KEEP_LOGGING = "KEEP_LOGGING"


class NonFiniteLossError(FloatingPointError):
    """Raised when the training objective blows up; carries the last finite policy."""

    def __init__(self, message, snapshot: LigParams):
        super().__init__(message)
        self.snapshot = snapshot


def policy_ref(policy: LigParams) -> str:
    h = hashlib.sha1(np.ascontiguousarray(policy.mu).tobytes())
    h.update(repr(policy.sigma).encode())
    return h.hexdigest()[:12]


@dataclass
class Certificate:
    guaranteed_risk: float
    logging_risk: float
    guaranteed_improvement: float
    verdict: str
    bound_report: BoundReport
    policy_ref: str
    settings: dict = field(default_factory=dict)

    @classmethod
    def from_report(cls, report: BoundReport, logging_risk, policy_ref, settings=None):
        gr = float(report.bound_value)
        gi = float(logging_risk) - gr
        return cls(gr, float(logging_risk), gi, DEPLOY if gi > 0 else KEEP_LOGGING,
                   report, policy_ref, dict(settings or {}))

    @property
    def run_id(self):
        doc = {"policy": self.policy_ref, "settings": self.settings,
               "bound": self.bound_report.settings}
        return hashlib.sha1(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:12]

    def to_dict(self):
        out = asdict(self)
        out["run_id"] = self.run_id
        return out

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def certify(policy: LigParams, data: LoggedDataset, prior: GaussianPrior,
            settings: BoundSettings, mc: McSettings, policy_class="lig",
            extra_settings=None) -> Certificate:
    """Evaluate the bound for ``policy`` and compare it with the logged risk."""
    if len(data) == 0:
        raise ValueError("cannot certify on an empty dataset")
    report = evaluate_bound(policy, data, prior, settings, mc, policy_class=policy_class)
    snapshot = {"policy_class": policy_class, "mc_samples": mc.num_samples,
                "mc_seed": mc.seed, "mc_antithetic": mc.antithetic}
    snapshot.update(extra_settings or {})
    return Certificate.from_report(report, estimate_logging_risk(data), policy_ref(policy),
                                   snapshot)


# -- objective ----------------------------------------------------------------------


class BoundObjective:
    """Minibatch estimate of a bound and its gradient w.r.t. flat parameters.

    Parameters are ``[mu.ravel(), log sigma]`` plus ``log lambda`` for the
    Catoni bound.  Every data term is linear in the policy's propensities,
    so the gradient is one vector-Jacobian product per propensity call.
    A batch is a set of context indices; statistics are rescaled to the
    full dataset.
    """

    def __init__(self, data: LoggedDataset, prior: GaussianPrior, settings: BoundSettings,
                 policy_class="lig", kl_weight=1.0):
        settings = settings.resolve(data.num_actions)
        if settings.kind in ("ls", "catoni") and np.any(data.group_sizes > 1):
            raise ValueError(f"the {settings.kind} bound assumes one interaction per context")
        if settings.kind == "cbb" and data.logger is None:
            raise ValueError("the CBB bound needs the logging policy parameters")
        if prior.mu0.shape != (data.num_actions, data.feature_dim):
            raise ValueError("prior shape does not match the data")
        self.data, self.prior, self.settings = data, prior, settings
        self.policy_class, self.kl_weight = policy_class, float(kl_weight)
        self.K, self.p = data.num_actions, data.feature_dim
        self.sizes = data.group_sizes
        self.starts = data.group_starts
        self.n_c = data.num_contexts
        self.denom = np.maximum(data.propensities, settings.tau)
        if settings.kind == "cbb":
            self.h_bias, self.h_second = clipping_terms(
                data.logger_propensities(contexts=True), settings.tau)
            self.grid = lambda_grid(multi_grid_size(self.sizes), settings.tau, settings.delta,
                                    settings.xi, settings.n_lambda)

    @property
    def num_params(self):
        return self.K * self.p + 1 + (self.settings.kind == "catoni")

    def pack(self, policy: LigParams, lam=None):
        parts = [policy.mu.ravel(), [math.log(policy.sigma)]]
        if self.settings.kind == "catoni":
            parts.append([math.log(lam)])
        return np.concatenate(parts).astype(float)

    def valid(self, theta):
        """Finite parameters whose exponentiated scales stay finite and positive."""
        logs = theta[self.K * self.p:]
        return bool(np.all(np.isfinite(theta)) and np.all(np.abs(logs) < 700))

    def unpack(self, theta):
        kp = self.K * self.p
        policy = LigParams(theta[:kp].reshape(self.K, self.p), math.exp(theta[kp]))
        lam = math.exp(theta[kp + 1]) if self.settings.kind == "catoni" else None
        return policy, lam

    def records_of(self, contexts):
        lens = self.sizes[contexts]
        offsets = np.repeat(self.starts[contexts] - np.cumsum(lens) + lens, lens)
        return offsets + np.arange(lens.sum())

    def kl_and_grad(self, policy):
        kl = gaussian_kl(policy, self.prior)
        s0 = self.prior.sigma0**2
        d_mu = (policy.mu - self.prior.mu0) / s0
        d_log_sigma = policy.mu.size * (policy.sigma**2 / s0 - 1.0)
        w = self.kl_weight
        return w * kl, w * d_mu, w * d_log_sigma

    def value_and_grad(self, theta, contexts, draws, lam_index=None):
        """Return ``(value, grad, info)`` on the given batch of contexts."""
        s = self.settings
        policy, lam = self.unpack(theta)
        contexts = np.asarray(contexts)
        recs = self.records_of(contexts)
        bsz = len(contexts)
        rec_w = 1.0 / (bsz * np.repeat(self.sizes[contexts], self.sizes[contexts]))
        data = self.data
        p, jac_logged = propensities_for(self.policy_class, policy, data.features[recs], draws,
                                         actions=data.actions[recs], jac=True)
        kl, kl_mu, kl_ls = self.kl_and_grad(policy)
        costs, denom = data.costs[recs], self.denom[recs]
        info = {"kl": kl}
        grad_ctx = None
        if s.kind in ("ls", "catoni"):
            r = float(np.sum(rec_w * p * costs / denom))
            n = len(data)
            kappa = kl + _log_ls(n, s.delta)
            if s.kind == "ls":
                slack = max(r + 1.0 / s.tau, 0.0)
                root = max(math.sqrt(2 * slack * kappa / (s.tau * n)), 1e-300)
                value = r + 2 * kappa / (s.tau * n) + root
                d_r = 1.0 + kappa / (s.tau * n * root)
                d_kl = 2.0 / (s.tau * n) + slack / (s.tau * n * root)
                d_loglam = 0.0
            else:
                x = -s.tau * lam * r - kappa / n
                em = math.expm1(lam)
                value = -math.expm1(x) / (s.tau * em)
                d_r = lam * math.exp(x) / em
                d_kl = math.exp(x) / (n * s.tau * em)
                d_lam = r * math.exp(x) / em + math.expm1(x) * math.exp(lam) / (s.tau * em**2)
                d_loglam = lam * d_lam
                info["lambda"] = lam
            w_logged = d_r * rec_w * costs / denom
            info["empirical"] = r
        else:
            tau, delta, xi = s.tau, s.delta, s.xi
            l_xi, b_xi = xi_constants(xi, tau)
            r_cv = float(xi + np.sum(rec_w * p * (costs - xi) / denom))
            P, jac_ctx = propensities_for(self.policy_class, policy,
                                          data.context_features[contexts], draws, jac=True)
            hb, hv = self.h_bias[contexts], self.h_second[contexts]
            bias = float(np.sum(P * hb)) / bsz
            second_i = np.sum(P * hv, axis=1)
            n_c = self.n_c
            scale_i = 1.0 / (self.sizes[contexts] * n_c)
            lams = self.grid.values
            g = g_fn(np.outer(lams, b_xi * scale_i))
            var_sum = (n_c / bsz) * (g @ (scale_i * second_i))
            kappa2 = kl + math.log(2 * len(lams) / delta)
            brackets = kappa2 / lams + lams * l_xi / n_c * var_sum
            j = int(np.argmin(brackets)) if lam_index is None else lam_index
            lam_j = lams[j]
            kappa4 = kl + math.log(4 * math.sqrt(n_c) / delta)
            root = math.sqrt(kappa4 / (2 * n_c))
            value = r_cv - xi * bias + root + brackets[j]
            w_logged = rec_w * (costs - xi) / denom
            coef_v = (lam_j * l_xi / n_c) * (n_c / bsz) * scale_i * g[j]
            grad_ctx = -xi / bsz * hb + coef_v[:, None] * hv
            d_kl = 1.0 / (4 * n_c * max(root, 1e-300)) + 1.0 / lam_j
            d_loglam = 0.0
            info.update(empirical=r_cv, bias=bias, second=float(second_i.mean()),
                        lambda_index=j, lambda_=lam_j)
        d_mu, d_ls = jac_logged.vjp(w_logged)
        if grad_ctx is not None:
            c_mu, c_ls = jac_ctx.vjp(grad_ctx)
            d_mu, d_ls = d_mu + c_mu, d_ls + c_ls
        d_mu = d_mu + d_kl * kl_mu
        d_ls = d_ls + d_kl * kl_ls
        parts = [d_mu.ravel(), [d_ls]]
        if s.kind == "catoni":
            parts.append([d_loglam])
        return float(value), np.concatenate(parts), info


# -- minimisation ---------------------------------------------------------------------


def minimize_bound(data: LoggedDataset, prior: GaussianPrior, settings: BoundSettings,
                   optim: OptimSettings, mc: McSettings, *, mc_select: Optional[McSettings] = None,
                   policy_class="lig", kl_weight=1.0, init: Optional[LigParams] = None):
    """Minimise the configured bound by minibatch Adam.

    Starts at the prior (``mu = mu0``, ``sigma = sigma0``) unless ``init`` is
    given.  Each step draws fresh MC noise (``mc.num_samples`` draws) and a
    minibatch of contexts.  After every epoch the full-data bound is
    evaluated with the fixed draws of ``mc_select`` (defaults to ``mc``) and
    the best policy seen so far, initialisation included, is returned with
    the per-epoch reports.
    """
    objective = BoundObjective(data, prior, settings, policy_class, kl_weight)
    settings = objective.settings
    mc_select = mc if mc_select is None else mc_select
    select_draws = draws_for(policy_class, mc_select, data.num_actions)

    def full_report(policy):
        return evaluate_bound(policy, data, prior, settings, mc_select,
                              policy_class=policy_class, draws=select_draws,
                              kl_weight=kl_weight)

    policy = init if init is not None else LigParams(prior.mu0.copy(), prior.sigma0)
    report = full_report(policy)
    if not math.isfinite(report.bound_value):
        raise NonFiniteLossError("initial bound is not finite", policy)
    lam0 = report.chosen_lambda if settings.kind == "catoni" else None
    theta = objective.pack(policy, lam0)
    trajectory = [report]
    best_value, best_policy = report.bound_value, policy
    state = AdamState.zeros(theta.size)
    rng = np.random.default_rng(optim.seed)
    mc_step = McSettings(mc.num_samples, mc.seed, mc.antithetic)
    n_c = data.num_contexts
    for epoch in range(1, optim.epochs + 1):
        order = rng.permutation(n_c)
        for start in range(0, n_c, optim.batch_size):
            batch = order[start:start + optim.batch_size]
            draws = draws_for(policy_class, mc_step, data.num_actions, rng)
            value, grad, _ = objective.value_and_grad(theta, batch, draws)
            if not (math.isfinite(value) and np.all(np.isfinite(grad))):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}",
                                         objective.unpack(theta)[0])
            new_theta, state = adam_step(theta, grad, state, optim)
            if not objective.valid(new_theta):
                raise NonFiniteLossError(f"non-finite parameters at epoch {epoch}",
                                         objective.unpack(theta)[0])
            theta = new_theta
        policy = objective.unpack(theta)[0]
        report = full_report(policy)
        trajectory.append(report)
        log.debug("epoch %d bound %.6f", epoch, report.bound_value)
        if report.bound_value < best_value:
            best_value, best_policy = report.bound_value, policy
    return best_policy, trajectory
