"""Clipped IPS risk estimators and the conditional moments used by the bounds.

All estimators are linear in the evaluated policy's propensities.  Grouped
(multiple-interaction) data are weighted by ``1 / (n_c m_i)`` so every
context counts equally whatever its number of interactions.
"""
import numpy as np

from .data import DatasetError, LabeledDataset, LoggedDataset
from .policies import (LigParams, SoftmaxParams, draw_eps, lig_propensities,
                       softmax_propensities)


def importance_weights(propensities, data: LoggedDataset, tau):
    """``pi(a_i|x_i) / max(pi0(a_i|x_i), tau)`` per record."""
    pi = np.asarray(propensities, dtype=float).ravel()
    if pi.shape != data.actions.shape:
        raise ValueError("one propensity per record expected")
    if not 0 <= tau <= 1:
        raise ValueError("tau must lie in [0, 1]")
    denom = np.maximum(data.propensities, tau)
    if np.any(denom <= 0):
        raise ValueError("tau = 0 requires strictly positive logging propensities")
    return pi / denom


def cips_risk(propensities, data: LoggedDataset, tau):
    w = importance_weights(propensities, data, tau)
    return float(np.sum(data.record_weights * w * data.costs))


def cvcips_risk(propensities, data: LoggedDataset, tau, xi):
    if not -1 <= xi <= 0:
        raise ValueError("xi must lie in [-1, 0]")
    w = importance_weights(propensities, data, tau)
    return float(xi + np.sum(data.record_weights * w * (data.costs - xi)))


def clipping_terms(logger_probs, tau):
    """Per-action integrands of the conditional bias and second moment."""
    q = np.asarray(logger_probs, dtype=float)
    bias = np.where(q < tau, 1.0 - q / tau, 0.0)
    second = q / np.maximum(q, tau) ** 2
    return bias, second


def _context_propensities(policy, data: LoggedDataset, mc):
    """All-action propensities of ``policy`` on every context, shape (n_c, K)."""
    if isinstance(policy, LigParams):
        if mc is None:
            raise ValueError("LIG policies need McSettings")
        return lig_propensities(policy, data.context_features, draw_eps(mc))
    if isinstance(policy, SoftmaxParams):
        return softmax_propensities(policy, data.context_features)
    probs = np.asarray(policy, dtype=float)
    if probs.shape != (data.num_contexts, data.num_actions):
        raise ValueError(f"expected propensity matrix of shape {(data.num_contexts, data.num_actions)}")
    return probs


def _moment_per_context(policy, data, tau, mc, which):
    if data.logger is None:
        raise DatasetError("conditional moments need the logging policy parameters")
    probs = _context_propensities(policy, data, mc)
    terms = clipping_terms(data.logger_propensities(contexts=True), tau)[which]
    return np.sum(probs * terms, axis=1)


def conditional_bias(policy, data: LoggedDataset, tau, mc=None):
    """Average over contexts of ``E_pi[1[pi0 < tau] (1 - pi0 / tau)]``.

    ``policy`` is LIG or softmax parameters, or a precomputed (n_c, K)
    propensity matrix.
    """
    return float(np.mean(_moment_per_context(policy, data, tau, mc, 0)))


def conditional_second_moments(policy, data: LoggedDataset, tau, mc=None):
    """Per-context ``E_pi[pi0 / max(pi0, tau)^2]``."""
    return _moment_per_context(policy, data, tau, mc, 1)


def conditional_second_moment(policy, data: LoggedDataset, tau, mc=None):
    return float(np.mean(conditional_second_moments(policy, data, tau, mc)))


def estimate_logging_risk(data: LoggedDataset):
    """Mean logged cost (context-weighted for grouped data)."""
    return float(np.sum(data.record_weights * data.costs))


def true_risk_labeled(policy, test: LabeledDataset, mc=None):
    """Exact-label risk ``-mean_i sum_{a in y_i} pi(a|x_i)``."""
    if isinstance(policy, SoftmaxParams):
        probs = softmax_propensities(policy, test.features)
        return -float(np.mean(np.sum(probs * test.label_matrix, axis=1)))
    if mc is None:
        raise ValueError("LIG policies need McSettings")
    eps = draw_eps(mc)
    if test.is_multiclass:
        return -float(np.mean(lig_propensities(policy, test.features, eps,
                                               actions=test.first_labels())))
    probs = lig_propensities(policy, test.features, eps)
    return -float(np.mean(np.sum(probs * test.label_matrix, axis=1)))
