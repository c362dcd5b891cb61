"""PAC-Bayesian risk certificates for clipped IPS (LS, Catoni) and the
conditional Bernstein bound for control-variate clipped IPS (CBB).

Inside the CBB code the free parameter ``lam`` follows the parametrisation
in which the grid ``[a, b]`` is derived (``lam`` of order ``n``); reports
convert it to the per-sample scale ``lam / n``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .data import LoggedDataset
from .estimators import (clipping_terms, cips_risk, cvcips_risk)
from .policies import GaussianPrior, LigParams, McSettings, draws_for, propensities_for

KINDS = ("ls", "catoni", "cbb")

CATONI_LAMBDA_RANGE = (1e-6, 50.0)
CATONI_SCAN_POINTS = 200
CATONI_TOL = 1e-6
G_TAYLOR_CUTOFF = 1e-6


@dataclass(frozen=True)
class BoundSettings:
    """Everything a bound evaluation needs besides data and policy.

    ``tau=None`` means 1/K, resolved against the data.
    """

    kind: str = "cbb"
    tau: Optional[float] = None
    delta: float = 0.05
    xi: float = 0.0
    n_lambda: int = 100

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in KINDS:
            raise ValueError(f"bound kind must be one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        if self.tau is not None and not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        if not -1 <= self.xi <= 0:
            raise ValueError("xi must lie in [-1, 0]")
        if self.n_lambda < 2:
            raise ValueError("n_lambda must be >= 2")

    def resolve(self, num_actions) -> "BoundSettings":
        if self.tau is not None:
            return self
        return BoundSettings(self.kind, 1.0 / num_actions, self.delta, self.xi, self.n_lambda)


@dataclass(frozen=True)
class LambdaGrid:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(v <= 0) or np.any(np.diff(v) <= 0):
            raise ValueError("grid must be strictly positive and increasing")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)


@dataclass
class BoundReport:
    """Every term of an evaluated certificate."""

    kind: str
    bound_value: float
    empirical_term: float
    kl: float
    n: int
    chosen_lambda: Optional[float] = None
    bias_term: Optional[float] = None
    variance_term: Optional[float] = None
    sqrt_term: Optional[float] = None
    conditional_bias: Optional[float] = None
    second_moment: Optional[float] = None
    num_contexts: Optional[int] = None
    settings: dict = field(default_factory=dict)
    grid: Optional[list] = None
    mc_samples: Optional[int] = None

    def to_dict(self):
        return asdict(self)


# -- scalar ingredients --------------------------------------------------------


def g_fn(u):
    """``(exp(u) - 1 - u) / u^2`` with its removable singularity at 0."""
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr < 0):
        raise ValueError("g is only used for u >= 0")
    small = u_arr <= G_TAYLOR_CUTOFF
    safe = np.where(small, 1.0, u_arr)
    out = np.where(small, 0.5 + u_arr / 6 + u_arr**2 / 24 + u_arr**3 / 120,
                   (np.expm1(safe) - safe) / safe**2)
    return float(out) if np.ndim(u) == 0 else out


def g_prime(u):
    u = np.asarray(u, dtype=float)
    small = u <= G_TAYLOR_CUTOFF
    safe = np.where(small, 1.0, u)
    # d/du [(e^u - 1 - u) / u^2] = ((e^u - 1) u - 2 (e^u - 1 - u)) / u^3
    exact = (np.expm1(safe) * safe - 2.0 * (np.expm1(safe) - safe)) / safe**3
    return np.where(small, 1 / 6 + u / 12 + u**2 / 40, exact)


def gaussian_kl(q: LigParams, prior: GaussianPrior):
    """KL between isotropic Gaussians ``N(mu, sigma^2 I)`` and ``N(mu0, sigma0^2 I)``."""
    if q.mu.shape != prior.mu0.shape:
        raise ValueError("posterior and prior dimensions differ")
    if q.sigma <= 0 or prior.sigma0 <= 0:
        raise ValueError("scales must be positive")
    d = q.mu.size
    s2 = prior.sigma0**2
    mean_part = float(np.sum((q.mu - prior.mu0) ** 2)) / (2 * s2)
    ratio = q.sigma**2 / s2
    return mean_part + d * (0.5 * ratio - 0.5 * math.log(ratio) - 0.5)


def _log_ls(n, delta):
    return math.log(2 * math.sqrt(n) / delta)


def ls_bound(empirical_cips, kl, n, tau, delta):
    r, kappa = empirical_cips, kl + _log_ls(n, delta)
    slack = r + 1.0 / tau
    if slack < -1e-12 * max(1.0, 1.0 / tau):
        raise ValueError(f"cIPS value {r} is below -1/tau = {-1 / tau}: inconsistent estimate")
    slack = max(slack, 0.0)
    return r + 2 * kappa / (tau * n) + math.sqrt(2 * slack * kappa / (tau * n))


def catoni_objective(lam, empirical_cips, kl, n, tau, delta):
    """Catoni's bound at a fixed ``lam > 0``."""
    x = -tau * lam * empirical_cips - (kl + _log_ls(n, delta)) / n
    return -math.expm1(x) / (tau * math.expm1(lam))


def catoni_bound(empirical_cips, kl, n, tau, delta):
    """Minimise Catoni's bound over ``lam``; returns ``(value, lam)``.

    A log-spaced scan brackets the minimum, golden-section search refines it.
    """
    f = lambda lam: catoni_objective(lam, empirical_cips, kl, n, tau, delta)
    lo, hi = CATONI_LAMBDA_RANGE
    grid = np.geomspace(lo, hi, CATONI_SCAN_POINTS)
    vals = np.array([f(lam) for lam in grid])
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("non-finite Catoni objective")
    j = int(np.argmin(vals))
    a, b = grid[max(j - 1, 0)], grid[min(j + 1, len(grid) - 1)]
    inv_phi = (math.sqrt(5) - 1) / 2
    c, d = b - inv_phi * (b - a), a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > CATONI_TOL:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    best_lam, best = (c, fc) if fc < fd else (d, fd)
    if vals[j] < best:
        best_lam, best = grid[j], vals[j]
    return float(best), float(best_lam)


def xi_constants(xi, tau):
    """``(l_xi, b_xi)``: squared-range and one-sided deviation constants."""
    return max(xi**2, (1 + xi) ** 2), (1 + xi) / tau - xi


def lambda_grid(n, tau, delta, xi, n_lambda=100) -> LambdaGrid:
    """Evenly spaced grid on ``[sqrt(2 n tau ln(1/delta) / (5 l_xi)), 2 n / b_xi]``."""
    l_xi, b_xi = xi_constants(xi, tau)
    b = 2.0 * n / b_xi
    a = math.sqrt(2.0 * n * tau * math.log(1.0 / delta) / (5.0 * l_xi)) if delta < 1 else 0.0
    if a >= b or a <= 0:
        return LambdaGrid(np.geomspace(1e-3 * b, b, n_lambda))
    return LambdaGrid(np.linspace(a, b, n_lambda))


# -- CBB from sufficient statistics ----------------------------------------------


def cbb_terms(r_cv, bias, second, kl, n, tau, delta, xi, grid: LambdaGrid):
    """Main-text CBB display for i.i.d. records, minimised over the grid.

    Returns ``(value, lam_main, sqrt_term, bracket, brackets)`` where
    ``lam_main = grid / n``.
    """
    l_xi, b_xi = xi_constants(xi, tau)
    sqrt_term = math.sqrt((kl + math.log(4 * math.sqrt(n) / delta)) / (2 * n))
    lam = grid.values / n
    brackets = (kl + math.log(2 * len(grid) / delta)) / (lam * n) + lam * l_xi * g_fn(lam * b_xi) * second
    j = int(np.argmin(brackets))
    value = r_cv - xi * bias + sqrt_term + brackets[j]
    return float(value), float(lam[j]), sqrt_term, float(brackets[j]), brackets


def cbb_multi_terms(r_cv, bias, second_per_ctx, sizes, kl, tau, delta, xi, grid: LambdaGrid):
    """Multiple-interaction CBB: per-context moments weighted by ``1/(m_i n_c)``.

    ``grid`` is in the parametrisation where ``lam`` is of order ``n``.
    Returns ``(value, lam, sqrt_term, bracket, brackets)``.
    """
    l_xi, b_xi = xi_constants(xi, tau)
    m = np.asarray(sizes, dtype=float)
    n_c = len(m)
    sqrt_term = math.sqrt((kl + math.log(4 * math.sqrt(n_c) / delta)) / (2 * n_c))
    lam = grid.values
    scale = 1.0 / (m * n_c)  # (n_c,)
    g = g_fn(np.outer(lam, b_xi * scale))  # (n_lambda, n_c)
    var_part = lam * l_xi / n_c * (g @ (scale * np.asarray(second_per_ctx)))
    brackets = (kl + math.log(2 * len(grid) / delta)) / lam + var_part
    j = int(np.argmin(brackets))
    value = r_cv - xi * bias + sqrt_term + brackets[j]
    return float(value), float(lam[j]), sqrt_term, float(brackets[j]), brackets


def multi_grid_size(sizes):
    """Sample size entering the grid endpoints with ``m_i`` interactions per context."""
    sizes = np.asarray(sizes)
    return int(len(sizes) * sizes.min())


# -- evaluation on data ----------------------------------------------------------


def _settings_dict(settings):
    return {"kind": settings.kind, "tau": settings.tau, "delta": settings.delta,
            "xi": settings.xi, "n_lambda": settings.n_lambda}


def _require_iid(data, what):
    if np.any(data.group_sizes > 1):
        raise ValueError(f"{what} assumes one interaction per context; use the CBB bound")


def _logged_propensities(policy, data, draws, policy_class):
    return propensities_for(policy_class, policy, data.features, draws, actions=data.actions)


def _context_propensities(policy, data, draws, policy_class):
    return propensities_for(policy_class, policy, data.context_features, draws)


def _moments(P_ctx, data, tau):
    bias_terms, second_terms = clipping_terms(data.logger_propensities(contexts=True), tau)
    return np.sum(P_ctx * bias_terms, axis=1), np.sum(P_ctx * second_terms, axis=1)


def cips_report(kind, empirical, kl, n, settings):
    if kind == "ls":
        value, lam = ls_bound(empirical, kl, n, settings.tau, settings.delta), None
    else:
        value, lam = catoni_bound(empirical, kl, n, settings.tau, settings.delta)
    return BoundReport(kind=kind, bound_value=value, empirical_term=empirical, kl=kl, n=n,
                       chosen_lambda=lam, settings=_settings_dict(settings))


def evaluate_bound(policy: LigParams, data: LoggedDataset, prior: GaussianPrior,
                   settings: BoundSettings, mc: McSettings, policy_class="lig",
                   draws=None, kl_weight=1.0) -> BoundReport:
    """Evaluate the configured bound for a LIG (or mixed-logit) posterior.

    ``draws`` overrides the MC draws generated from ``mc``; ``kl_weight``
    scales the KL term (1 gives the certified bound).
    """
    settings = settings.resolve(data.num_actions)
    if draws is None:
        draws = draws_for(policy_class, mc, data.num_actions)
    kl = kl_weight * gaussian_kl(policy, prior)
    p_logged = _logged_propensities(policy, data, draws, policy_class)
    if settings.kind in ("ls", "catoni"):
        _require_iid(data, f"the {settings.kind} bound")
        report = cips_report(settings.kind, cips_risk(p_logged, data, settings.tau), kl,
                             len(data), settings)
    else:
        P_ctx = _context_propensities(policy, data, draws, policy_class)
        report = _cbb_report(p_logged, P_ctx, data, kl, settings)
    report.mc_samples = len(draws)
    return report


def _cbb_report(p_logged, P_ctx, data, kl, settings):
    if data.logger is None:
        raise ValueError("the CBB bound needs the logging policy parameters")
    tau, delta, xi = settings.tau, settings.delta, settings.xi
    r_cv = cvcips_risk(p_logged, data, tau, xi)
    bias_ctx, second_ctx = _moments(P_ctx, data, tau)
    bias, second = float(bias_ctx.mean()), float(second_ctx.mean())
    sizes = data.group_sizes
    if np.all(sizes == 1):
        n = len(data)
        grid = lambda_grid(n, tau, delta, xi, settings.n_lambda)
        value, lam, sqrt_term, bracket, _ = cbb_terms(r_cv, bias, second, kl, n, tau, delta, xi, grid)
    else:
        n = len(data)
        grid = lambda_grid(multi_grid_size(sizes), tau, delta, xi, settings.n_lambda)
        value, lam, sqrt_term, bracket, _ = cbb_multi_terms(
            r_cv, bias, second_ctx, sizes, kl, tau, delta, xi, grid)
        lam = lam / n
    return BoundReport(kind="cbb", bound_value=value, empirical_term=r_cv, kl=kl, n=len(data),
                       chosen_lambda=lam, bias_term=-xi * bias, variance_term=bracket,
                       sqrt_term=sqrt_term, conditional_bias=bias, second_moment=second,
                       num_contexts=data.num_contexts, settings=_settings_dict(settings),
                       grid=grid.values.tolist())


def cbb_bound(policy, data: LoggedDataset, prior, settings: BoundSettings, mc: McSettings):
    """CBB bound on i.i.d. logged data (one interaction per context)."""
    _require_iid(data, "cbb_bound")
    return evaluate_bound(policy, data, prior, BoundSettings("cbb", settings.tau, settings.delta,
                                                             settings.xi, settings.n_lambda), mc)


def cbb_bound_multi(policy, data: LoggedDataset, prior, settings: BoundSettings, mc: McSettings):
    """CBB bound in the multiple-interactions form, per-context weighting.

    With every ``m_i = 1`` it coincides with
    :func:`cbb_bound`.
    """
    if not data.is_grouped:
        raise ValueError("cbb_bound_multi needs grouped data")
    settings = BoundSettings("cbb", settings.tau, settings.delta, settings.xi,
                             settings.n_lambda).resolve(data.num_actions)
    draws = draws_for("lig", mc, data.num_actions)
    kl = gaussian_kl(policy, prior)
    p_logged = _logged_propensities(policy, data, draws, "lig")
    P_ctx = _context_propensities(policy, data, draws, "lig")
    tau, delta, xi = settings.tau, settings.delta, settings.xi
    r_cv = cvcips_risk(p_logged, data, tau, xi)
    bias_ctx, second_ctx = _moments(P_ctx, data, tau)
    sizes = data.group_sizes
    grid = lambda_grid(multi_grid_size(sizes), tau, delta, xi, settings.n_lambda)
    value, lam, sqrt_term, bracket, _ = cbb_multi_terms(
        r_cv, float(bias_ctx.mean()), second_ctx, sizes, kl, tau, delta, xi, grid)
    return BoundReport(kind="cbb", bound_value=value, empirical_term=r_cv, kl=kl, n=len(data),
                       chosen_lambda=lam / len(data), bias_term=-xi * float(bias_ctx.mean()),
                       variance_term=bracket, sqrt_term=sqrt_term,
                       conditional_bias=float(bias_ctx.mean()),
                       second_moment=float(second_ctx.mean()), num_contexts=data.num_contexts,
                       settings=_settings_dict(settings), grid=grid.values.tolist(),
                       mc_samples=len(draws))
