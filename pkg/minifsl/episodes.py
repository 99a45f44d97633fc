"""Feature sets, class splits and N-way K-shot episode sampling."""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from minifsl.errors import EmptySet, InfeasibleEpisode, InvalidConfig, InvalidInput
from minifsl.numerics import check_finite

log = logging.getLogger(__name__)


@dataclass
class FeatureSet:
    features: np.ndarray
    labels: np.ndarray
    class_names: Optional[List[str]] = None
    source: str = ""
    image_shape: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        self.features = check_finite(self.features, "features")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise EmptySet("A feature set needs at least one row")
        if self.labels.shape != (self.features.shape[0],):
            raise InvalidInput(
                f"{self.labels.shape[0]} labels for {self.features.shape[0]} feature rows"
            )
        if self.image_shape is not None:
            self.image_shape = tuple(int(s) for s in self.image_shape)
            if int(np.prod(self.image_shape)) != self.features.shape[1]:
                raise InvalidInput(f"Image shape {self.image_shape} does not match dimension {self.dim}")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def classes(self):
        return np.unique(self.labels)

    @property
    def n_classes(self):
        return len(self.classes)

    def class_indices(self):
        return {int(c): np.flatnonzero(self.labels == c) for c in self.classes}

    def remapped(self):
        """Same set with labels mapped onto 0..C-1 in sorted order of the old ids."""
        old, new = np.unique(self.labels, return_inverse=True)
        if np.array_equal(old, np.arange(len(old))):
            return self
        names = self.class_names
        if names is None or len(names) != len(old):
            names = [str(int(c)) for c in old]
        return FeatureSet(self.features, new, names, self.source, self.image_shape)

    def subset(self, classes):
        """Rows of ``classes``, relabelled 0..len(classes)-1 in the given order."""
        classes = [int(c) for c in classes]
        lookup = {c: i for i, c in enumerate(classes)}
        mask = np.isin(self.labels, classes)
        if not mask.any():
            raise EmptySet(f"No rows for classes {classes}")
        labels = np.array([lookup[int(c)] for c in self.labels[mask]], dtype=np.int64)
        names = None
        if self.class_names is not None:
            names = [self.class_names[c] for c in classes]
        return FeatureSet(self.features[mask], labels, names, self.source, self.image_shape)


@dataclass(frozen=True)
class SplitSpec:
    base_classes: frozenset
    val_classes: frozenset
    novel_classes: frozenset

    def __post_init__(self):
        for name in ("base_classes", "val_classes", "novel_classes"):
            object.__setattr__(self, name, frozenset(int(c) for c in getattr(self, name)))
        self.check_disjoint()

    def check_disjoint(self):
        pairs = (
            ("base", self.base_classes, "val", self.val_classes),
            ("base", self.base_classes, "novel", self.novel_classes),
            ("val", self.val_classes, "novel", self.novel_classes),
        )
        for n1, s1, n2, s2 in pairs:
            common = s1 & s2
            if common:
                raise InvalidConfig(f"Classes {sorted(common)} are both {n1} and {n2}")

    @classmethod
    def from_counts(cls, n_base, n_val, n_novel):
        ids = np.arange(n_base + n_val + n_novel)
        return cls(
            frozenset(ids[:n_base]),
            frozenset(ids[n_base : n_base + n_val]),
            frozenset(ids[n_base + n_val :]),
        )

    def select(self, feature_set, part):
        """Rows of one part (``base``, ``val`` or ``novel``), relabelled contiguously."""
        self.check_disjoint()
        classes = sorted(getattr(self, f"{part}_classes"))
        missing = set(classes) - set(int(c) for c in feature_set.classes)
        if missing:
            raise InvalidConfig(f"Split names classes {sorted(missing)} absent from the dataset")
        return feature_set.subset(classes)

    def to_json(self):
        return {
            "base": sorted(self.base_classes),
            "val": sorted(self.val_classes),
            "novel": sorted(self.novel_classes),
        }

    @classmethod
    def from_json(cls, d):
        if "counts" in d:
            return cls.from_counts(*d["counts"])
        return cls(frozenset(d.get("base", [])), frozenset(d.get("val", [])), frozenset(d.get("novel", [])))


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 15
    m_unlabeled: int = 0
    imbalance: Optional[Tuple[int, ...]] = None
    labeled_fraction: Optional[float] = None

    def __post_init__(self):
        if self.n_way < 2:
            raise InvalidConfig(f"n_way must be at least 2, got {self.n_way}")
        if self.k_shot < 1:
            raise InvalidConfig(f"k_shot must be at least 1, got {self.k_shot}")
        if self.q_query < 0 or self.m_unlabeled < 0:
            raise InvalidConfig("Query and unlabeled counts must be non-negative")
        if self.imbalance is not None:
            object.__setattr__(self, "imbalance", tuple(int(q) for q in self.imbalance))
            if len(self.imbalance) != self.n_way or min(self.imbalance) < 0:
                raise InvalidConfig(f"imbalance needs {self.n_way} non-negative counts")
        if self.labeled_fraction is not None and not 0.0 < self.labeled_fraction < 1.0:
            raise InvalidConfig("labeled_fraction must lie in (0, 1)")

    def query_counts(self):
        if self.imbalance is not None:
            return list(self.imbalance)
        return [self.q_query] * self.n_way

    def to_json(self):
        return {
            "n_way": self.n_way,
            "k_shot": self.k_shot,
            "q_query": self.q_query,
            "m_unlabeled": self.m_unlabeled,
            "imbalance": None if self.imbalance is None else list(self.imbalance),
            "labeled_fraction": self.labeled_fraction,
        }

    @classmethod
    def from_json(cls, d):
        imb = d.get("imbalance")
        frac = d.get("labeled_fraction")
        return cls(
            n_way=int(d.get("n_way", 5)),
            k_shot=int(d.get("k_shot", 1)),
            q_query=int(d.get("q_query", 15)),
            m_unlabeled=int(d.get("m_unlabeled", 0)),
            imbalance=None if imb is None else tuple(imb),
            labeled_fraction=None if frac is None else float(frac),
        )


@dataclass
class Episode:
    """One task; labels are episode-local (0..N-1) and ``classes`` maps them back.

    Unlabeled labels are kept for scoring pseudo-labels only; inference never
    reads them.
    """

    support_features: np.ndarray
    support_labels: np.ndarray
    query_features: np.ndarray
    query_labels: np.ndarray
    unlabeled_features: np.ndarray
    unlabeled_labels: np.ndarray
    classes: np.ndarray
    support_index: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    query_index: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    unlabeled_index: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def n_way(self):
        return len(self.classes)


def _gather(feature_set, parts):
    idx = np.concatenate(parts).astype(np.int64) if parts else np.empty(0, dtype=np.int64)
    return idx, feature_set.features[idx].reshape(len(idx), feature_set.dim)


def sample_episode(feature_set, spec, rng, classes=None):
    """Draw one episode: N classes, then K support, Q query and M unlabeled per class.

    All draws are without replacement, and come from ``rng`` only.
    """
    gen = rng.generator
    by_class = feature_set.class_indices()
    available = sorted(by_class) if classes is None else sorted(int(c) for c in classes)
    if len(available) < spec.n_way:
        raise InvalidConfig(f"{spec.n_way}-way episodes need {spec.n_way} classes, have {len(available)}")
    chosen = gen.choice(available, size=spec.n_way, replace=False)
    q_counts = spec.query_counts()
    K, M = spec.k_shot, spec.m_unlabeled

    support, query, unlabeled = [], [], []
    s_lab, q_lab, u_lab = [], [], []
    for slot, c in enumerate(chosen):
        idx = by_class[int(c)]
        need = K + q_counts[slot]
        if spec.labeled_fraction is not None:
            cut = int(math.ceil(spec.labeled_fraction * len(idx)))
            labeled, pool = idx[:cut], idx[cut:]
            if len(labeled) < need:
                raise InfeasibleEpisode(int(c), need, len(labeled))
            if len(pool) < M:
                raise InfeasibleEpisode(int(c), M, len(pool))
            drawn = gen.permutation(labeled)[:need]
            extra = gen.permutation(pool)[:M]
        else:
            if len(idx) < need + M:
                raise InfeasibleEpisode(int(c), need + M, len(idx))
            perm = gen.permutation(idx)
            drawn, extra = perm[:need], perm[need : need + M]
        support.append(drawn[:K])
        query.append(drawn[K:])
        unlabeled.append(extra)
        s_lab.append(np.full(K, slot))
        q_lab.append(np.full(q_counts[slot], slot))
        u_lab.append(np.full(M, slot))

    s_idx, s_x = _gather(feature_set, support)
    q_idx, q_x = _gather(feature_set, query)
    u_idx, u_x = _gather(feature_set, unlabeled)
    return Episode(
        support_features=s_x,
        support_labels=np.concatenate(s_lab).astype(np.int64),
        query_features=q_x,
        query_labels=np.concatenate(q_lab).astype(np.int64),
        unlabeled_features=u_x,
        unlabeled_labels=np.concatenate(u_lab).astype(np.int64),
        classes=np.asarray(chosen, dtype=np.int64),
        support_index=s_idx,
        query_index=q_idx,
        unlabeled_index=u_idx,
    )


def synth_gaussian_dataset(
    rng, n_classes, per_class, dim, spread=1.0, noise=0.3, relu=False, offset=0.0
):
    """Isotropic Gaussian classes with means on the sphere of radius ``spread``.

    ``offset`` is added to every coordinate of every class mean, shifting the
    whole set away from the origin; ``relu`` clamps features at zero.
    """
    if n_classes < 2 or per_class < 1 or dim < 1:
        raise InvalidConfig("Need at least 2 classes, 1 example per class and 1 dimension")
    if spread < 0 or noise < 0:
        raise InvalidConfig("spread and noise must be non-negative")
    gen = rng.generator
    directions = gen.normal(size=(n_classes, dim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    means = spread * directions / norms + offset
    labels = np.repeat(np.arange(n_classes), per_class)
    features = means[labels] + noise * gen.normal(size=(len(labels), dim))
    if relu:
        features = np.maximum(features, 0.0)
    return FeatureSet(
        features,
        labels,
        source=f"gaussian(C={n_classes}, n={per_class}, d={dim}, spread={spread}, noise={noise})",
    )


def synth_image_dataset(rng, n_classes, per_class, size=8, noise=0.1):
    """Toy square images: one random template per class plus pixel noise, in [0, 1]."""
    if n_classes < 2 or per_class < 1 or size < 2:
        raise InvalidConfig("Need at least 2 classes, 1 example per class and 2x2 images")
    gen = rng.generator
    templates = gen.random((n_classes, size, size))
    labels = np.repeat(np.arange(n_classes), per_class)
    images = templates[labels] + noise * gen.normal(size=(len(labels), size, size))
    images = np.clip(images, 0.0, 1.0)
    return FeatureSet(
        images.reshape(len(labels), -1),
        labels,
        source=f"images(C={n_classes}, n={per_class}, size={size}, noise={noise})",
        image_shape=(size, size),
    )
