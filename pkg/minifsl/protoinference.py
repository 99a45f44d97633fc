"""Prototype-based inference: ProtoNet, soft k-means (SemiPN) and CIPA.

A soft assignment is a plain ``(n_rows, n_way)`` array whose rows are
probability vectors over the episode classes.
"""

import dataclasses
import enum
import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from minifsl.calibration import CalibrationConfig, calibrate_episode
from minifsl.errors import InvalidConfig, MissingClass, ShapeError
from minifsl.numerics import cosine_matrix, softmax, sq_euclidean_matrix

log = logging.getLogger(__name__)


class Distance(enum.Enum):
    COSINE = "cosine"
    NEG_EUCLIDEAN = "neg_euclidean"


class Mode(enum.Enum):
    TRANSDUCTIVE = "transductive"
    SEMI_SUPERVISED = "semi_supervised"


class Strategy(enum.Enum):
    PROTONET = "protonet"
    SEMIPN = "semipn"
    CIPA = "cipa"


@dataclass(frozen=True)
class InferenceConfig:
    tau: float = 15.0
    sigma: float = 0.2
    n_iter: int = 20
    distance: Distance = Distance.COSINE
    mode: Mode = Mode.TRANSDUCTIVE
    strategy: Strategy = Strategy.CIPA
    keep_history: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidConfig(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.sigma <= 1.0:
            raise InvalidConfig(f"sigma must lie in [0, 1], got {self.sigma}")
        if self.n_iter < 0:
            raise InvalidConfig(f"n_iter must be non-negative, got {self.n_iter}")

    def to_json(self):
        return {
            "tau": self.tau,
            "sigma": self.sigma,
            "n_iter": self.n_iter,
            "distance": self.distance.value,
            "mode": self.mode.value,
            "strategy": self.strategy.value,
            "history": self.keep_history,
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            tau=float(d.get("tau", 15.0)),
            sigma=float(d.get("sigma", 0.2)),
            n_iter=int(d.get("n_iter", 20)),
            distance=Distance(d.get("distance", "cosine")),
            mode=Mode(d.get("mode", "transductive")),
            strategy=Strategy(d.get("strategy", "cipa")),
            keep_history=bool(d.get("history", True)),
        )


@dataclass
class Prototypes:
    """Class centers, their per-iteration history and convexity weights.

    ``weights[c]`` holds the coefficients of center ``c`` over the stacked
    rows ``[support; pool]`` that produced it.
    """

    centers: np.ndarray
    history: Optional[List[np.ndarray]] = None
    weights: Optional[np.ndarray] = None

    @property
    def n_way(self):
        return self.centers.shape[0]


@dataclass
class InferenceResult:
    query: np.ndarray
    pool: Optional[np.ndarray] = None
    prototypes: Optional[Prototypes] = None


def _class_weights(support_labels, n_way, extra=None):
    labels = np.asarray(support_labels, dtype=np.int64)
    counts = np.zeros((n_way, labels.shape[0]))
    counts[labels, np.arange(labels.shape[0])] = 1.0
    if extra is not None:
        counts = np.hstack([counts, extra.T])
    totals = counts.sum(axis=1)
    for c in range(n_way):
        if not totals[c] > 0:
            raise MissingClass(c)
    return counts / totals[:, None]


def init_prototypes(support_features, support_labels, n_way, keep_history=True):
    support = np.asarray(support_features, dtype=np.float64)
    labels = np.asarray(support_labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_way):
        raise MissingClass(int(labels.max()), f"Support label outside 0..{n_way - 1}")
    weights = _class_weights(labels, n_way)
    centers = weights @ support
    history = [centers.copy()] if keep_history else None
    return Prototypes(centers=centers, history=history, weights=weights)


def _centers(prototypes):
    if isinstance(prototypes, Prototypes):
        return prototypes.centers
    return np.asarray(prototypes, dtype=np.float64)


def similarities(features, prototypes, distance):
    centers = _centers(prototypes)
    if distance == Distance.COSINE:
        return cosine_matrix(features, centers)
    return -sq_euclidean_matrix(features, centers)


def predict_soft(features, prototypes, tau, distance=Distance.COSINE):
    if not tau > 0:
        raise InvalidConfig(f"tau must be positive, got {tau}")
    features = np.asarray(features, dtype=np.float64)
    centers = _centers(prototypes)
    if features.shape[0] == 0:
        return np.empty((0, centers.shape[0]))
    return softmax(tau * similarities(features, centers, distance), axis=1)


def soft_kmeans_update(
    support_features, support_labels, extra_features, assignment, n_way=None
):
    """One soft k-means step: support rows count fully, extra rows by probability."""
    support = np.asarray(support_features, dtype=np.float64)
    extra = np.asarray(extra_features, dtype=np.float64).reshape(-1, support.shape[1])
    assignment = np.asarray(assignment, dtype=np.float64)
    if n_way is None:
        if extra.shape[0]:
            n_way = assignment.shape[-1]
        else:
            n_way = int(np.max(support_labels)) + 1
    if extra.shape[0] == 0:
        assignment = np.zeros((0, n_way))
    elif assignment.shape != (extra.shape[0], n_way):
        raise ShapeError(
            f"Assignment of shape {assignment.shape} for {extra.shape[0]} rows and {n_way} classes"
        )
    weights = _class_weights(support_labels, n_way, extra=assignment)
    rows = np.vstack([support, extra])
    centers = weights @ rows
    return Prototypes(centers=centers, history=[centers.copy()], weights=weights)


def momentum_blend(p_new, p_old, sigma):
    if p_new.centers.shape != p_old.centers.shape:
        raise ShapeError(
            f"Prototype shapes differ: {p_new.centers.shape} vs {p_old.centers.shape}"
        )
    if not 0.0 <= sigma <= 1.0:
        raise InvalidConfig(f"sigma must lie in [0, 1], got {sigma}")
    centers = sigma * p_new.centers + (1.0 - sigma) * p_old.centers
    weights = None
    if p_new.weights is not None and p_old.weights is not None:
        if p_new.weights.shape != p_old.weights.shape:
            raise ShapeError("Prototype weight shapes differ")
        weights = sigma * p_new.weights + (1.0 - sigma) * p_old.weights
    history = None
    if p_old.history is not None:
        history = p_old.history + [centers.copy()]
    return Prototypes(centers=centers, history=history, weights=weights)


def adaptation_pool(episode, mode):
    if mode == Mode.TRANSDUCTIVE:
        return episode.query_features
    pool = getattr(episode, "unlabeled_features", None)
    if pool is None:
        return np.empty((0, episode.support_features.shape[1]))
    return pool


def cipa_infer(episode, config):
    """Iterative prototype adaptation on an already calibrated episode.

    Returns the query soft assignment and the final prototypes.
    """
    support = np.asarray(episode.support_features, dtype=np.float64)
    labels = np.asarray(episode.support_labels, dtype=np.int64)
    n_way = episode.n_way
    pool = np.asarray(adaptation_pool(episode, config.mode), dtype=np.float64)

    protos = init_prototypes(support, labels, n_way, keep_history=config.keep_history)
    protos.weights = np.hstack([protos.weights, np.zeros((n_way, pool.shape[0]))])

    for _ in range(config.n_iter):
        # pseudo-labels are recomputed from the current prototypes every step
        pseudo = predict_soft(pool, protos.centers, config.tau, config.distance)
        updated = soft_kmeans_update(support, labels, pool, pseudo, n_way=n_way)
        protos = momentum_blend(updated, protos, config.sigma)

    final = predict_soft(episode.query_features, protos.centers, config.tau, config.distance)
    return final, protos


def semipn_infer(episode, config):
    """Soft k-means refinement on raw features, without momentum.

    Returns the query soft assignment and the final prototypes.
    """
    raw = calibrate_episode(episode, CalibrationConfig.off())
    return cipa_infer(raw, dataclasses.replace(config, sigma=1.0))


def protonet_infer(episode, config):
    protos = init_prototypes(
        episode.support_features, episode.support_labels, episode.n_way, keep_history=False
    )
    return predict_soft(episode.query_features, protos.centers, config.tau, config.distance)


def uncentered_queries(calib_config, mode):
    """Calibration for ``mode``: queries are never centered in semi-supervised mode."""
    if mode == Mode.SEMI_SUPERVISED and calib_config.center_query_set:
        log.warning("Semi-supervised mode: queries are not centered")
        return dataclasses.replace(calib_config, center_query_set=False)
    return calib_config


def run_strategy(episode, calib_config, config):
    """Run ``config.strategy`` on a raw episode and collect what scoring needs."""
    if config.strategy == Strategy.PROTONET:
        return InferenceResult(query=protonet_infer(episode, config))

    if config.strategy == Strategy.SEMIPN:
        query, protos = semipn_infer(episode, config)
        pool = np.asarray(adaptation_pool(episode, config.mode), dtype=np.float64)
    else:
        calibrated = calibrate_episode(episode, uncentered_queries(calib_config, config.mode))
        query, protos = cipa_infer(calibrated, config)
        pool = adaptation_pool(calibrated, config.mode)
    pool_assignment = predict_soft(pool, protos.centers, config.tau, config.distance)
    return InferenceResult(query=query, pool=pool_assignment, prototypes=protos)
