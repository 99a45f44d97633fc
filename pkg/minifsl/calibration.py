"""Feature calibration ahead of prototype inference.

Each feature set of an episode goes through power transform, centering by
the set's own mean, and l2 normalization, in that order. Every step can be
switched off on its own.
"""

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from minifsl.errors import (
    DegenerateVector,
    EmptySet,
    InvalidConfig,
    NegativeFeature,
    ShapeError,
)
from minifsl.numerics import check_finite

log = logging.getLogger(__name__)


class NegativePolicy(enum.Enum):
    REJECT = "reject"
    SIGNED_POWER = "signed_power"


@dataclass(frozen=True)
class CalibrationConfig:
    beta: float = 0.5
    apply_power: bool = True
    apply_center: bool = True
    apply_l2: bool = True
    center_query_set: bool = True
    center_unlabeled_set: bool = True
    negative_policy: NegativePolicy = NegativePolicy.REJECT

    def __post_init__(self):
        if not self.beta > 0:
            raise InvalidConfig(f"Power exponent must be positive, got {self.beta}")

    @classmethod
    def off(cls):
        return cls(apply_power=False, apply_center=False, apply_l2=False)

    def to_json(self):
        return {
            "beta": self.beta,
            "power": self.apply_power,
            "center": self.apply_center,
            "l2": self.apply_l2,
            "center_query": self.center_query_set,
            "center_unlabeled": self.center_unlabeled_set,
            "negative_policy": self.negative_policy.value,
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            beta=float(d.get("beta", 0.5)),
            apply_power=bool(d.get("power", True)),
            apply_center=bool(d.get("center", True)),
            apply_l2=bool(d.get("l2", True)),
            center_query_set=bool(d.get("center_query", True)),
            center_unlabeled_set=bool(d.get("center_unlabeled", True)),
            negative_policy=NegativePolicy(d.get("negative_policy", "reject")),
        )


@dataclass
class CalibratedEpisode:
    support_features: np.ndarray
    support_labels: np.ndarray
    query_features: np.ndarray
    unlabeled_features: np.ndarray
    provenance: CalibrationConfig = field(default_factory=CalibrationConfig.off)

    @property
    def n_way(self):
        return int(self.support_labels.max()) + 1


def power_transform(x, beta, policy=NegativePolicy.REJECT):
    """x**beta scaled to unit norm, along the last axis."""
    x = check_finite(x)
    if policy == NegativePolicy.REJECT:
        if np.any(x < 0):
            raise NegativeFeature(
                "Power transform of negative features; use the signed_power policy"
            )
        p = np.power(x, beta)
    else:
        p = np.sign(x) * np.power(np.abs(x), beta)
    norms = np.linalg.norm(p, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateVector("Power transform of an all-zero vector")
    return p / norms


def center_set(rows):
    rows = check_finite(rows)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise EmptySet("Cannot center an empty set")
    return rows - rows.mean(axis=0)


def l2_normalize(x):
    x = check_finite(x)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateVector("l2 normalization of a zero vector")
    return x / norms


def calibrate_set(rows, config, center):
    if config.apply_power:
        rows = power_transform(rows, config.beta, config.negative_policy)
    if config.apply_center and center:
        if rows.shape[0] < 2:
            log.warning(
                "Centering a set of %d row(s) maps it to zero", rows.shape[0]
            )
        rows = center_set(rows)
    if config.apply_l2:
        rows = l2_normalize(rows)
    return rows


def calibrate_episode(episode, config):
    support = np.asarray(episode.support_features, dtype=np.float64)
    query = np.asarray(episode.query_features, dtype=np.float64)
    unlabeled = getattr(episode, "unlabeled_features", None)
    if unlabeled is None:
        unlabeled = np.empty((0, support.shape[1]))
    unlabeled = np.asarray(unlabeled, dtype=np.float64)

    d = support.shape[1]
    for name, rows in (("query", query), ("unlabeled", unlabeled)):
        if rows.shape[0] and rows.shape[1] != d:
            raise ShapeError(f"{name} features have dimension {rows.shape[1]}, expected {d}")

    support = calibrate_set(support, config, center=True)
    if query.shape[0]:
        query = calibrate_set(query, config, center=config.center_query_set)
    if unlabeled.shape[0]:
        unlabeled = calibrate_set(unlabeled, config, center=config.center_unlabeled_set)

    return CalibratedEpisode(
        support_features=support,
        support_labels=np.asarray(episode.support_labels),
        query_features=query,
        unlabeled_features=unlabeled,
        provenance=config,
    )
