"""Certified off-policy learning for contextual bandits.

Learn Gaussian-perturbed linear policies from logged bandit feedback by
minimising PAC-Bayesian risk bounds, and decide whether the learned policy
is guaranteed to improve on the logging policy.
"""
from .bounds import (BoundReport, BoundSettings, LambdaGrid, catoni_bound, cbb_bound,
                     cbb_bound_multi, evaluate_bound, g_fn, gaussian_kl, lambda_grid, ls_bound)
from .data import (DatasetError, LabeledDataset, LoggedDataset, LoggedRecord, convert_supervised,
                   make_synthetic, read_dataset, split_holdout, write_dataset)
from .estimators import (cips_risk, conditional_bias, conditional_second_moment, cvcips_risk,
                         estimate_logging_risk, true_risk_labeled)
from .learn import Certificate, certify, minimize_bound
from .optim import AdamState, OptimSettings, adam_step
from .policies import (GaussianPrior, LigParams, McSettings, SoftmaxParams, lig_propensity,
                       lig_propensities, naive_mc_propensity, train_logging_policy)

__version__ = "0.1.0"
