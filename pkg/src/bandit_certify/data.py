"""Logged bandit data, labeled data, supervised-to-bandit conversion and I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .policies import SoftmaxParams, softmax_propensities

PROPENSITY_CHECK_TOL = 1e-9


class DatasetError(ValueError):
    """Raised when a dataset violates its invariants or a file is malformed."""


@dataclass(frozen=True)
class LoggedRecord:
    features: np.ndarray
    action: int
    cost: float
    logging_propensity: float
    group_id: Optional[int] = None


@dataclass(frozen=True, eq=False)
class LoggedDataset:
    """Logged interactions stored column-wise.

    ``groups`` (optional) tags records sharing a context; groups must be
    contiguous and every member of a group carries identical features.
    """

    features: np.ndarray
    actions: np.ndarray
    costs: np.ndarray
    propensities: np.ndarray
    num_actions: int
    groups: Optional[np.ndarray] = None
    logger: Optional[SoftmaxParams] = None
    _group_starts: np.ndarray = field(init=False, repr=False)
    _group_sizes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.features, dtype=float))
        a = np.asarray(self.actions, dtype=np.int64).ravel()
        c = np.asarray(self.costs, dtype=float).ravel()
        q = np.asarray(self.propensities, dtype=float).ravel()
        n = len(a)
        if n == 0:
            raise DatasetError("empty dataset")
        if X.shape[0] != n or len(c) != n or len(q) != n:
            raise DatasetError("column lengths differ")
        K = int(self.num_actions)
        if K < 2:
            raise DatasetError("need at least two actions")
        if np.any(a < 0) or np.any(a >= K):
            raise DatasetError("action out of range")
        if np.any(~np.isfinite(c)) or np.any(c < -1) or np.any(c > 0):
            raise DatasetError("cost out of range [-1, 0]")
        if np.any(~(q > 0)) or np.any(q > 1):
            raise DatasetError("logging propensity out of range (0, 1]")
        for name, val in (("features", X), ("actions", a), ("costs", c), ("propensities", q)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "num_actions", K)
        if self.groups is not None:
            g = np.asarray(self.groups, dtype=np.int64).ravel()
            if len(g) != n:
                raise DatasetError("groups column length differs")
            change = np.flatnonzero(np.diff(g) != 0) + 1
            starts = np.concatenate([[0], change])
            if len(np.unique(g)) != len(starts):
                raise DatasetError("groups must be contiguous")
            sizes = np.diff(np.append(starts, n))
            for s, m in zip(starts, sizes):
                if m > 1 and not np.array_equal(X[s:s + m], np.broadcast_to(X[s], (m, X.shape[1]))):
                    raise DatasetError(f"group {g[s]} members do not share features")
            object.__setattr__(self, "groups", g)
        else:
            starts, sizes = np.arange(n), np.ones(n, dtype=np.int64)
        object.__setattr__(self, "_group_starts", starts)
        object.__setattr__(self, "_group_sizes", sizes)
        if self.logger is not None:
            if self.logger.weights.shape != (K, X.shape[1]):
                raise DatasetError("logger dimensions do not match dataset")
            recomputed = self.logger_propensities()[np.arange(n), a]
            if np.max(np.abs(recomputed - q)) > PROPENSITY_CHECK_TOL:
                raise DatasetError("logged propensities disagree with logger parameters")

    def __len__(self):
        return len(self.actions)

    def __eq__(self, other):
        if not isinstance(other, LoggedDataset):
            return NotImplemented
        same_logger = (self.logger is None and other.logger is None) or (
            self.logger is not None and other.logger is not None
            and np.array_equal(self.logger.weights, other.logger.weights))
        same_groups = (self.groups is None and other.groups is None) or (
            self.groups is not None and other.groups is not None
            and np.array_equal(self.groups, other.groups))
        return (self.num_actions == other.num_actions and same_logger and same_groups
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("features", "actions", "costs", "propensities")))

    @property
    def feature_dim(self):
        return self.features.shape[1]

    @property
    def num_contexts(self):
        return len(self._group_starts)

    @property
    def group_sizes(self):
        return self._group_sizes

    @property
    def group_starts(self):
        return self._group_starts

    @property
    def is_grouped(self):
        return self.groups is not None

    @property
    def context_features(self):
        """One feature row per context (per record when ungrouped)."""
        return self.features[self._group_starts]

    @property
    def record_context(self):
        """Context index of every record."""
        return np.repeat(np.arange(self.num_contexts), self._group_sizes)

    @property
    def record_weights(self):
        """Per-record weight ``1 / (n_c m_i)``; equals ``1/n`` without groups."""
        m = self._group_sizes
        return np.repeat(1.0 / (len(m) * m), m)

    def records(self) -> Iterator[LoggedRecord]:
        for i in range(len(self)):
            yield LoggedRecord(self.features[i], int(self.actions[i]), float(self.costs[i]),
                               float(self.propensities[i]),
                               None if self.groups is None else int(self.groups[i]))

    def logger_propensities(self, contexts=False):
        """Logger probabilities for all actions, per record or per context."""
        if self.logger is None:
            raise DatasetError("dataset carries no logger parameters")
        X = self.context_features if contexts else self.features
        return softmax_propensities(self.logger, X)


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    label_matrix: np.ndarray  # (n, K) boolean
    num_actions: int

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.features, dtype=float))
        Y = np.asarray(self.label_matrix, dtype=bool)
        if len(X) == 0:
            raise DatasetError("empty dataset")
        if Y.shape != (len(X), self.num_actions):
            raise DatasetError("label matrix shape does not match (n, K)")
        if not np.all(Y.any(axis=1)):
            raise DatasetError("every example needs at least one label")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "label_matrix", Y)

    @classmethod
    def from_label_sets(cls, features, labels, num_actions):
        Y = np.zeros((len(labels), num_actions), dtype=bool)
        for i, ys in enumerate(labels):
            for y in ys:
                if not 0 <= y < num_actions:
                    raise DatasetError(f"label {y} out of range for K={num_actions}")
                Y[i, y] = True
        return cls(features, Y, num_actions)

    def __len__(self):
        return len(self.features)

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (self.num_actions == other.num_actions
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.label_matrix, other.label_matrix))

    @property
    def feature_dim(self):
        return self.features.shape[1]

    @property
    def labels(self):
        return [set(np.flatnonzero(row).tolist()) for row in self.label_matrix]

    @property
    def is_multiclass(self):
        return bool(np.all(self.label_matrix.sum(axis=1) == 1))

    def first_labels(self):
        return np.argmax(self.label_matrix, axis=1)

    def subset(self, idx):
        return LabeledDataset(self.features[idx], self.label_matrix[idx], self.num_actions)


def make_synthetic(num_examples, K, p, label_rule_seed, seed, multilabel=False,
                   extra_label_prob=0.1):
    """Gaussian features labeled by a hidden random linear scorer.

    The scorer depends only on ``label_rule_seed`` so train and test sets
    drawn with different ``seed`` share one labeling rule.
    """
    if K < 2 or p < 1 or num_examples < 1:
        raise ValueError("need num_examples >= 1, K >= 2, p >= 1")
    scorer = np.random.default_rng(label_rule_seed).standard_normal((K, p))
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((num_examples, p))
    top = np.argmax(X @ scorer.T, axis=1)
    Y = np.zeros((num_examples, K), dtype=bool)
    Y[np.arange(num_examples), top] = True
    if multilabel:
        Y |= rng.random((num_examples, K)) < extra_label_prob
    return LabeledDataset(X, Y, K)


def split_holdout(data: LabeledDataset, fraction, seed):
    """Disjoint split into (floor(fraction N), remainder) examples."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    n = len(data)
    k = int(np.floor(fraction * n))
    if k == 0 or k == n:
        raise ValueError(f"degenerate split: {k} of {n} examples in the holdout")
    perm = np.random.default_rng(seed).permutation(n)
    return data.subset(np.sort(perm[:k])), data.subset(np.sort(perm[k:]))


def convert_supervised(data: LabeledDataset, logger: SoftmaxParams, alpha, m=1, seed=0):
    """Log ``m`` actions per example from ``softmax(alpha * logger)``.

    Cost is -1 when the logged action is one of the example's labels, else 0.
    """
    if logger.weights.shape != (data.num_actions, data.feature_dim):
        raise ValueError("logger dimensions do not match dataset")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if m < 1:
        raise ValueError("m must be >= 1")
    scaled = logger.scaled(alpha)
    probs = softmax_propensities(scaled, data.features)
    n = len(data)
    rng = np.random.default_rng(seed)
    # interaction j of every context uses the j-th block of n uniforms, so the
    # first m' interactions are shared by every m >= m' with the same seed
    u = rng.random((m, n)).T
    cdf = np.cumsum(probs, axis=1)
    actions = np.minimum((u[:, :, None] > cdf[:, None, :]).sum(axis=2), data.num_actions - 1)
    rows = np.repeat(np.arange(n), m)
    actions = actions.ravel()
    costs = -data.label_matrix[rows, actions].astype(float)
    return LoggedDataset(
        features=data.features[rows],
        actions=actions,
        costs=costs,
        propensities=probs[rows, actions],
        num_actions=data.num_actions,
        groups=rows if m > 1 else None,
        logger=scaled,
    )


# -- files -------------------------------------------------------------------


def _parse_lines(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed line ({exc.msg})") from None


def write_dataset(data: LoggedDataset, path):
    header = {"K": data.num_actions, "p": data.feature_dim,
              "logger": None if data.logger is None else data.logger.weights.tolist()}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for i in range(len(data)):
            rec = {"features": data.features[i].tolist(), "action": int(data.actions[i]),
                   "cost": float(data.costs[i]), "propensity": float(data.propensities[i]),
                   "group": None if data.groups is None else int(data.groups[i])}
            fh.write(json.dumps(rec) + "\n")


def read_dataset(path) -> LoggedDataset:
    lines = _parse_lines(path)
    try:
        _, header = next(lines)
    except StopIteration:
        raise DatasetError(f"{path}: empty file") from None
    K, p = header.get("K"), header.get("p")
    if not isinstance(K, int) or not isinstance(p, int):
        raise DatasetError(f"{path}:1: header must carry integer K and p")
    X, a, c, q, g = [], [], [], [], []
    for lineno, rec in lines:
        try:
            feats = rec["features"]
            if len(feats) != p:
                raise DatasetError(f"{path}:{lineno}: expected {p} features, got {len(feats)}")
            cost, prop, act = float(rec["cost"]), float(rec["propensity"]), int(rec["action"])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DatasetError):
                raise
            raise DatasetError(f"{path}:{lineno}: malformed record ({exc!r})") from None
        if not -1.0 <= cost <= 0.0:
            raise DatasetError(f"{path}:{lineno}: cost out of range ({cost})")
        if not 0.0 < prop <= 1.0:
            raise DatasetError(f"{path}:{lineno}: propensity out of range ({prop})")
        if not 0 <= act < K:
            raise DatasetError(f"{path}:{lineno}: action out of range ({act})")
        X.append(feats)
        a.append(act)
        c.append(cost)
        q.append(prop)
        g.append(rec.get("group"))
    if not a:
        raise DatasetError(f"{path}: no records")
    if any(v is None for v in g) and not all(v is None for v in g):
        raise DatasetError(f"{path}: either every record or none carries a group")
    logger = None if header.get("logger") is None else SoftmaxParams(np.asarray(header["logger"]))
    return LoggedDataset(np.asarray(X, dtype=float).reshape(-1, p), a, c, q, K,
                         groups=None if g[0] is None else g, logger=logger)


def write_labeled(data: LabeledDataset, path):
    with open(path, "w") as fh:
        fh.write(json.dumps({"K": data.num_actions, "p": data.feature_dim}) + "\n")
        for x, ys in zip(data.features, data.labels):
            fh.write(json.dumps({"features": x.tolist(), "labels": sorted(ys)}) + "\n")


def read_labeled(path) -> LabeledDataset:
    lines = _parse_lines(path)
    try:
        _, header = next(lines)
    except StopIteration:
        raise DatasetError(f"{path}: empty file") from None
    K, p = header.get("K"), header.get("p")
    X, labels = [], []
    for lineno, rec in lines:
        if "features" not in rec or "labels" not in rec or len(rec["features"]) != p:
            raise DatasetError(f"{path}:{lineno}: malformed labeled record")
        if not rec["labels"]:
            raise DatasetError(f"{path}:{lineno}: example without labels")
        X.append(rec["features"])
        labels.append(rec["labels"])
    if not X:
        raise DatasetError(f"{path}: no examples")
    return LabeledDataset.from_label_sets(np.asarray(X, dtype=float).reshape(-1, p), labels, K)
