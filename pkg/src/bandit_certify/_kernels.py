"""Compiled inner loops for LIG propensities.

Scores passed in are already normalised, ``d[i, a] = phi_i . mu_a / (sigma |phi_i|)``,
so every integrand factor is ``Phi(eps + d[i, a] - d[i, b])``.
"""
import math

import numpy as np
from numba import njit

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


@njit(cache=True, inline="always")
def _ncdf(z):
    return 0.5 * math.erfc(-z * _INV_SQRT2)


@njit(cache=True, inline="always")
def _npdf(z):
    return math.exp(-0.5 * z * z) * _INV_SQRT2PI


@njit(cache=True)
def lig_all(d, eps, with_jac):
    """Raw MC averages of the integrand for every action.

    Returns ``P`` (n, K) and, when ``with_jac``, ``J`` (n, K, K) with
    ``J[i, a, b] = mean_s dG_a/dz_ab``.
    """
    n, K = d.shape
    S = eps.shape[0]
    P = np.zeros((n, K))
    if with_jac:
        J = np.zeros((n, K, K))
    else:
        J = np.zeros((1, 1, 1))
    phi = np.empty(K)
    inv_s = 1.0 / S
    for i in range(n):
        for s in range(S):
            e = eps[s]
            for a in range(K):
                g = 1.0
                da = d[i, a] + e
                for b in range(K):
                    if b == a:
                        continue
                    p = _ncdf(da - d[i, b])
                    phi[b] = p
                    g *= p
                P[i, a] += g * inv_s
                if with_jac and g > 0.0:
                    for b in range(K):
                        if b == a:
                            continue
                        z = da - d[i, b]
                        J[i, a, b] += g * _npdf(z) / phi[b] * inv_s
    return P, J


@njit(cache=True)
def lig_single(d, actions, eps, with_jac):
    """Raw MC averages of the integrand for one action per row.

    Returns ``p`` (n,) and, when ``with_jac``, ``J`` (n, K) with
    ``J[i, b] = mean_s dG_{a_i}/dz_{a_i b}`` (zero at ``b == a_i``).
    """
    n, K = d.shape
    S = eps.shape[0]
    p_out = np.zeros(n)
    if with_jac:
        J = np.zeros((n, K))
    else:
        J = np.zeros((1, 1))
    phi = np.empty(K)
    inv_s = 1.0 / S
    for i in range(n):
        a = actions[i]
        for s in range(S):
            da = d[i, a] + eps[s]
            g = 1.0
            for b in range(K):
                if b == a:
                    continue
                p = _ncdf(da - d[i, b])
                phi[b] = p
                g *= p
            p_out[i] += g * inv_s
            if with_jac and g > 0.0:
                for b in range(K):
                    if b == a:
                        continue
                    z = da - d[i, b]
                    J[i, b] += g * _npdf(z) / phi[b] * inv_s
    return p_out, J
