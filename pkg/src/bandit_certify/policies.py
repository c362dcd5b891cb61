"""Policy classes: softmax (logging), LIG (learned) and mixed logit.

LIG policies put an isotropic Gaussian ``N(mu, sigma^2 I)`` on the K x p
weight matrix and act greedily on the sampled linear scores.  Their
propensities reduce to a one-dimensional Gaussian integral which is
estimated by Monte Carlo over standard-normal draws ``eps`` shared across
actions and records.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp, softmax

from . import _kernels
from .optim import AdamState, OptimSettings, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SoftmaxParams:
    weights: np.ndarray  # (K, p)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2:
            raise ValueError("weights must be a K x p matrix")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        object.__setattr__(self, "weights", w)

    @property
    def num_actions(self):
        return self.weights.shape[0]

    @property
    def feature_dim(self):
        return self.weights.shape[1]

    def scaled(self, alpha):
        return SoftmaxParams(alpha * self.weights)


@dataclass(frozen=True)
class LigParams:
    mu: np.ndarray  # (K, p)
    sigma: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        if mu.ndim != 2:
            raise ValueError("mu must be a K x p matrix")
        if not np.all(np.isfinite(mu)):
            raise ValueError("mu must be finite")
        if not (self.sigma > 0 and np.isfinite(self.sigma)):
            raise ValueError("sigma must be positive and finite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def num_actions(self):
        return self.mu.shape[0]

    @property
    def feature_dim(self):
        return self.mu.shape[1]


@dataclass(frozen=True)
class GaussianPrior:
    mu0: np.ndarray
    sigma0: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mu0", np.asarray(self.mu0, dtype=float))
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")

    @classmethod
    def from_logger(cls, logger: SoftmaxParams, sigma0=1.0):
        return cls(logger.weights.copy(), sigma0)


@dataclass(frozen=True)
class McSettings:
    num_samples: int = 32
    seed: int = 0
    antithetic: bool = True

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")


def draw_eps(mc: McSettings, rng=None):
    """Standard-normal draws for the 1-D integral, antithetic pairs if asked."""
    rng = np.random.default_rng(mc.seed) if rng is None else rng
    S = mc.num_samples
    if mc.antithetic and S > 1:
        half = rng.standard_normal(S // 2)
        parts = [half, -half]
        if S % 2:
            parts.append(rng.standard_normal(1))
        return np.concatenate(parts)
    return rng.standard_normal(S)


def _as_matrix(features, p):
    X = np.atleast_2d(np.asarray(features, dtype=float))
    if X.shape[1] != p:
        raise ValueError(f"feature dimension {X.shape[1]} does not match policy dimension {p}")
    return X


# -- softmax -----------------------------------------------------------------


def softmax_propensities(params: SoftmaxParams, features):
    """Full (n, K) probability matrix of the softmax policy."""
    X = _as_matrix(features, params.feature_dim)
    scores = X @ params.weights.T
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite softmax score")
    return np.exp(scores - logsumexp(scores, axis=1, keepdims=True))


def softmax_propensity(params: SoftmaxParams, features, action):
    return float(softmax_propensities(params, features)[0, action])


def train_logging_policy(train, l2=1e-6, lr=0.1, epochs=10, seed=0, batch_size=32):
    """Fit a softmax logger by L2-regularised cross-entropy with Adam.

    In multilabel mode the lowest-index label of each example is the target.
    """
    X = np.asarray(train.features, dtype=float)
    if len(X) == 0:
        raise ValueError("empty training split")
    K = train.num_actions
    y = train.first_labels()
    n, p = X.shape
    rng = np.random.default_rng(seed)
    W = np.zeros((K, p))
    settings = OptimSettings(lr=lr, epochs=epochs, batch_size=batch_size)
    state = AdamState.zeros(W.size)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits = X[idx] @ W.T
            probs = softmax(logits, axis=1)
            nll = -np.mean(np.log(probs[np.arange(len(idx)), y[idx]] + 1e-300))
            with np.errstate(over="ignore", invalid="ignore"):
                loss = nll + l2 * np.sum(W * W)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"logger training diverged at epoch {epoch}, batch starting {start}")
            probs[np.arange(len(idx)), y[idx]] -= 1.0
            grad = probs.T @ X[idx] / len(idx) + 2.0 * l2 * W
            flat, state = adam_step(W.ravel(), grad.ravel(), state, settings)
            W = flat.reshape(K, p)
    return SoftmaxParams(W)


# -- LIG ---------------------------------------------------------------------


def lig_normalized_scores(params: LigParams, features):
    """``d[i, a] = phi_i . mu_a / (sigma |phi_i|)`` and the unit features."""
    X = _as_matrix(features, params.feature_dim)
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero feature vector: LIG propensity undefined")
    Xhat = X / norms[:, None]
    return Xhat @ params.mu.T / params.sigma, Xhat


@dataclass
class LigJacobian:
    """Vector-Jacobian products of LIG propensities w.r.t. (mu, log sigma)."""

    d: np.ndarray
    xhat: np.ndarray
    sigma: float
    J: np.ndarray
    actions: Optional[np.ndarray] = None
    raw: Optional[np.ndarray] = None  # unnormalised all-action averages
    norm: Optional[np.ndarray] = None  # row sums of ``raw``

    def grad_scores(self, w):
        """Gradient of ``sum(w * P)`` w.r.t. the normalised scores ``d``."""
        w = np.asarray(w, dtype=float)
        if self.actions is not None:
            # single action per row: dP/dd_a = sum_b J_b, dP/dd_b = -J_b
            g = -self.J * w[:, None]
            rows = np.arange(len(w))
            g[rows, self.actions] += w * self.J.sum(axis=1)
            return g
        # self-normalised all-action vector: P = raw / sum(raw)
        wn = w / self.norm[:, None]
        wn = wn - np.sum(wn * self.raw / self.norm[:, None], axis=1, keepdims=True)
        return wn * self.J.sum(axis=2) - np.einsum("ia,iak->ik", wn, self.J)

    def vjp(self, w):
        """Return ``(d_mu, d_log_sigma)`` of ``sum(w * P)``."""
        gd = self.grad_scores(w)
        d_mu = gd.T @ self.xhat / self.sigma
        d_log_sigma = -float(np.sum(gd * self.d))
        return d_mu, d_log_sigma


def lig_propensities(params: LigParams, features, eps, actions=None, jac=False):
    """LIG propensities for given draws ``eps``.

    With ``actions`` the (n,) propensities of those actions are returned as
    plain MC averages.  Without, the (n, K) all-action matrix is returned,
    self-normalised so each row sums to one.
    """
    d, xhat = lig_normalized_scores(params, features)
    eps = np.ascontiguousarray(eps, dtype=float)
    if actions is not None:
        actions = np.ascontiguousarray(np.broadcast_to(actions, (len(d),)), dtype=np.int64)
        if np.any(actions < 0) or np.any(actions >= params.num_actions):
            raise ValueError("action out of range")
        p, J = _kernels.lig_single(d, actions, eps, jac)
        return (p, LigJacobian(d, xhat, params.sigma, J, actions=actions)) if jac else p
    raw, J = _kernels.lig_all(d, eps, jac)
    norm = raw.sum(axis=1)
    P = raw / norm[:, None]
    if jac:
        return P, LigJacobian(d, xhat, params.sigma, J, raw=raw, norm=norm)
    return P


def lig_propensity(params: LigParams, features, action, mc: McSettings):
    eps = draw_eps(mc)
    return float(lig_propensities(params, features, eps, actions=[action])[0])


def lig_propensity_std_error(params: LigParams, features, action, mc: McSettings):
    """Standard error of the MC propensity estimate (antithetic pairs averaged)."""
    eps = draw_eps(mc)
    vals = np.array([lig_propensities(params, features, [e], actions=[action])[0] for e in eps])
    if mc.antithetic and len(vals) > 1:
        half = len(vals) // 2
        vals = 0.5 * (vals[:half] + vals[half:2 * half])
    return float(np.std(vals, ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else float("nan")


def lig_all_propensities(params: LigParams, features, mc: McSettings):
    return lig_propensities(params, features, draw_eps(mc))


def lig_propensity_grad(params: LigParams, features, action, mc: McSettings):
    """Gradient of the single-action LIG propensity w.r.t. ``(mu, sigma)``."""
    eps = draw_eps(mc)
    _, jacobian = lig_propensities(params, features, eps, actions=[action], jac=True)
    d_mu, d_log_sigma = jacobian.vjp(np.ones(1))
    return d_mu, d_log_sigma / params.sigma


def lig_all_propensity_grad(params: LigParams, features, mc: McSettings):
    """Per-action gradients (K, K, p) and (K,) of the all-action vector."""
    eps = draw_eps(mc)
    _, jacobian = lig_propensities(params, features, eps, jac=True)
    K = params.num_actions
    d_mu = np.empty((K,) + params.mu.shape)
    d_sigma = np.empty(K)
    for a in range(K):
        w = np.zeros((1, K))
        w[0, a] = 1.0
        g_mu, g_ls = jacobian.vjp(w)
        d_mu[a], d_sigma[a] = g_mu, g_ls / params.sigma
    return d_mu, d_sigma


def lig_sample_action(params: LigParams, features, seed):
    """Draw ``theta ~ N(mu, sigma^2 I)`` and act greedily (lowest index on ties)."""
    x = np.asarray(features, dtype=float).ravel()
    if x.shape[0] != params.feature_dim:
        raise ValueError("feature dimension mismatch")
    rng = np.random.default_rng(seed)
    theta = params.mu + params.sigma * rng.standard_normal(params.mu.shape)
    return int(np.argmax(theta @ x))


def _score_draws(params: LigParams, features, num_samples, rng):
    # phi . theta_a ~ N(phi . mu_a, sigma^2 |phi|^2) independently across a
    X = _as_matrix(features, params.feature_dim)
    mean = X @ params.mu.T
    scale = params.sigma * np.linalg.norm(X, axis=1)
    Z = rng.standard_normal((num_samples, params.num_actions))
    return mean[:, None, :] + scale[:, None, None] * Z[None, :, :], Z


def naive_mc_propensity(params: LigParams, features, action, S, seed):
    """Fraction of S sampled decision rules that pick ``action``."""
    if S < 1:
        raise ValueError("S must be >= 1")
    scores, _ = _score_draws(params, features, S, np.random.default_rng(seed))
    return float(np.mean(np.argmax(scores[0], axis=1) == action))


# -- mixed logit -------------------------------------------------------------


@dataclass
class MixedLogitJacobian:
    probs: np.ndarray  # (n, S, K) per-draw softmax
    x: np.ndarray
    z: np.ndarray  # (S, K) shared draws
    sigma: float

    def vjp(self, w):
        w = np.asarray(w, dtype=float)
        # d softmax / d scores, per draw
        inner = np.sum(self.probs * w[:, None, :], axis=2, keepdims=True)
        gs = self.probs * (w[:, None, :] - inner)  # (n, S, K)
        S = gs.shape[1]
        d_mu = gs.mean(axis=1).T @ self.x
        norms = np.linalg.norm(self.x, axis=1)
        d_log_sigma = self.sigma * float(np.einsum("isk,sk,i->", gs, self.z, norms) / S)
        return d_mu, d_log_sigma


def mixed_logit_propensities(params: LigParams, features, z, jac=False):
    """All-action mixed-logit propensities for shared score draws ``z`` (S, K)."""
    X = _as_matrix(features, params.feature_dim)
    scale = params.sigma * np.linalg.norm(X, axis=1)
    scores = (X @ params.mu.T)[:, None, :] + scale[:, None, None] * z[None, :, :]
    probs = softmax(scores, axis=2)
    P = probs.mean(axis=1)
    if jac:
        return P, MixedLogitJacobian(probs, X, z, params.sigma)
    return P


def draw_mixed_logit(mc: McSettings, num_actions, rng=None):
    rng = np.random.default_rng(mc.seed) if rng is None else rng
    if mc.antithetic and mc.num_samples > 1:
        half = rng.standard_normal((mc.num_samples // 2, num_actions))
        parts = [half, -half]
        if mc.num_samples % 2:
            parts.append(rng.standard_normal((1, num_actions)))
        return np.concatenate(parts)
    return rng.standard_normal((mc.num_samples, num_actions))


def mixed_logit_propensity(params: LigParams, features, action, mc: McSettings):
    z = draw_mixed_logit(mc, params.num_actions)
    return float(mixed_logit_propensities(params, features, z)[0, action])


# -- policy files ------------------------------------------------------------


def write_policy(params, path):
    if isinstance(params, SoftmaxParams):
        doc = {"kind": "softmax", "K": params.num_actions, "p": params.feature_dim,
               "mu": params.weights.tolist(), "sigma": None}
    elif isinstance(params, LigParams):
        doc = {"kind": "lig", "K": params.num_actions, "p": params.feature_dim,
               "mu": params.mu.tolist(), "sigma": params.sigma}
    else:
        raise TypeError(f"cannot serialise {type(params).__name__}")
    with open(path, "w") as fh:
        json.dump(doc, fh)


def read_policy(path):
    with open(path) as fh:
        doc = json.load(fh)
    mu = np.asarray(doc["mu"], dtype=float)
    if mu.shape != (doc["K"], doc["p"]):
        raise ValueError(f"policy matrix has shape {mu.shape}, header says ({doc['K']}, {doc['p']})")
    if doc["kind"] == "softmax":
        return SoftmaxParams(mu)
    if doc["kind"] == "lig":
        return LigParams(mu, doc["sigma"])
    raise ValueError(f"unknown policy kind {doc['kind']!r}")


# -- policy-class dispatch -----------------------------------------------------

POLICY_CLASSES = ("lig", "mixed_logit")


class _ColumnJacobian:
    """Single-action view of an all-action mixed-logit Jacobian."""

    def __init__(self, inner, actions, K):
        self.inner, self.actions, self.K = inner, actions, K

    def vjp(self, w):
        W = np.zeros((len(self.actions), self.K))
        W[np.arange(len(self.actions)), self.actions] = w
        return self.inner.vjp(W)


def draws_for(policy_class, mc: McSettings, num_actions, rng=None):
    if policy_class == "lig":
        return draw_eps(mc, rng)
    if policy_class == "mixed_logit":
        return draw_mixed_logit(mc, num_actions, rng)
    raise ValueError(f"unknown policy class {policy_class!r}")


def propensities_for(policy_class, params: LigParams, features, draws, actions=None, jac=False):
    """Dispatch to LIG or mixed-logit propensities with shared draws."""
    if policy_class == "lig":
        return lig_propensities(params, features, draws, actions=actions, jac=jac)
    if policy_class != "mixed_logit":
        raise ValueError(f"unknown policy class {policy_class!r}")
    out = mixed_logit_propensities(params, features, draws, jac=jac)
    if actions is None:
        return out
    actions = np.asarray(actions, dtype=np.int64)
    P, jacobian = out if jac else (out, None)
    p = P[np.arange(len(P)), actions]
    return (p, _ColumnJacobian(jacobian, actions, params.num_actions)) if jac else p
