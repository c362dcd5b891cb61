import numpy as np
import pytest

from bandit_certify.data import LoggedDataset, convert_supervised, make_synthetic, split_holdout
from bandit_certify.policies import GaussianPrior, LigParams, SoftmaxParams, train_logging_policy


@pytest.fixture(scope="session")
def small_env():
    """Labeled data, logger and logged data with K=4, p=5."""
    labeled = make_synthetic(600, 4, 5, label_rule_seed=3, seed=4)
    holdout, rest = split_holdout(labeled, 0.1, seed=5)
    logger = train_logging_policy(holdout, seed=6)
    logged = convert_supervised(rest, logger, alpha=0.5, seed=7)
    return labeled, logger, logged


def random_lig(rng, K, p, spread=1.0):
    return LigParams(spread * rng.standard_normal((K, p)), float(rng.uniform(0.3, 1.5)))


def uniform_logged(n, K, p, seed=0):
    """Logged data from a zero-weight (uniform) logger."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    return LoggedDataset(features=X, actions=rng.integers(0, K, n),
                         costs=-(rng.random(n) < 0.4).astype(float),
                         propensities=np.full(n, 1.0 / K), num_actions=K,
                         logger=SoftmaxParams(np.zeros((K, p))))


def prior_for(data):
    return GaussianPrior.from_logger(data.logger)
