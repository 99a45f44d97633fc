"""Embedding training: cross entropy, hybrid consistency and rotation losses.

Every loss returns ``(loss, grads)`` with ``grads`` aligned to
``model.parameters()``. The hybrid consistency loss mixes the hidden
representations of a weakly augmented x1 and a strongly augmented x2 at a
random layer, with one lambda per pair shared by features and labels.
With ``mm_mode`` both branches are weakly augmented, which is Manifold Mixup.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from minifsl.augment import AugmentPolicy, strong_augment, weak_augment
from minifsl.episodes import FeatureSet
from minifsl.errors import (
    EmptySet,
    InvalidConfig,
    InvalidInput,
    InvalidLabel,
    InvalidLayer,
    MissingHead,
    ShapeError,
    TrainingDiverged,
)
from minifsl.numerics import derive_stream, log_softmax, sample_beta, softmax

log = logging.getLogger(__name__)

CURVE_COLUMNS = ["epoch", "loss_ce", "loss_hct", "loss_rot", "train_acc", "val_acc"]


@dataclass(frozen=True)
class HctConfig:
    alpha: float = 2.0
    eta: float = 1.0
    eligible_layers: Optional[Tuple[int, ...]] = None
    schedule_fraction: float = 1.0 / 3.0
    weak_aug: AugmentPolicy = field(default_factory=AugmentPolicy.identity)
    strong_aug: AugmentPolicy = field(default_factory=AugmentPolicy.identity)
    mm_mode: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidConfig(f"alpha must be positive, got {self.alpha}")
        if self.eta < 0:
            raise InvalidConfig(f"eta must be non-negative, got {self.eta}")
        if self.eligible_layers is not None and len(self.eligible_layers) == 0:
            raise InvalidConfig("eligible_layers must not be empty")
        if not 0.0 <= self.schedule_fraction <= 1.0:
            raise InvalidConfig("schedule_fraction must lie in [0, 1]")

    def layers_for(self, model):
        if self.eligible_layers is None:
            return tuple(range(model.n_layers + 1))
        for l in self.eligible_layers:
            if not 0 <= l <= model.n_layers:
                raise InvalidLayer(f"Eligible layer {l} outside 0..{model.n_layers}")
        return tuple(sorted(set(self.eligible_layers)))

    def to_json(self):
        return {
            "alpha": self.alpha,
            "eta": self.eta,
            "eligible_layers": None if self.eligible_layers is None else list(self.eligible_layers),
            "schedule_fraction": self.schedule_fraction,
            "weak_aug": self.weak_aug.to_json(),
            "strong_aug": self.strong_aug.to_json(),
            "mm_mode": self.mm_mode,
        }

    @classmethod
    def from_json(cls, d):
        layers = d.get("eligible_layers")
        return cls(
            alpha=float(d.get("alpha", 2.0)),
            eta=float(d.get("eta", 1.0)),
            eligible_layers=None if layers is None else tuple(int(l) for l in layers),
            schedule_fraction=float(d.get("schedule_fraction", 1.0 / 3.0)),
            weak_aug=AugmentPolicy.from_json(d.get("weak_aug", {})),
            strong_aug=AugmentPolicy.from_json(d.get("strong_aug", {})),
            mm_mode=bool(d.get("mm_mode", False)),
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rot: bool = False
    hct: Optional[HctConfig] = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("epochs and batch_size must be positive")
        if not self.lr > 0:
            raise InvalidConfig("lr must be positive")

    def to_json(self):
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "rot": self.rot,
            "hct": None if self.hct is None else self.hct.to_json(),
        }


# ----------------------------------------------------------------------
# mixing


def mix_hidden(h1, h2, lam):
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    if h1.shape != h2.shape:
        raise ShapeError(f"Cannot mix hidden vectors of shapes {h1.shape} and {h2.shape}")
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0) or np.any(lam > 1):
        raise InvalidInput("lambda must lie in [0, 1]")
    return lam * h1 + (1.0 - lam) * h2


def _check_one_hot(y):
    y = np.asarray(y, dtype=np.float64)
    ok = np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)
    if not ok:
        raise InvalidLabel("Labels are not valid one-hot vectors")
    return y


def mix_labels(y1, y2, lam):
    y1 = _check_one_hot(y1)
    y2 = _check_one_hot(y2)
    if y1.shape != y2.shape:
        raise InvalidLabel(f"One-hot shapes differ: {y1.shape} vs {y2.shape}")
    return mix_hidden(y1, y2, lam)


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidLabel(f"Labels outside 0..{n_classes - 1}")
    y = np.zeros((labels.shape[0], n_classes))
    y[np.arange(labels.shape[0]), labels] = 1.0
    return y


# ----------------------------------------------------------------------
# losses


def _soft_ce(logits, targets):
    """Per-row cross entropy against soft targets, and its gradient w.r.t. logits."""
    if not np.all(np.isfinite(logits)):
        raise TrainingDiverged("Non-finite logits")
    logp = log_softmax(logits, axis=1)
    row_losses = -np.sum(targets * logp, axis=1)
    dlogits = softmax(logits, axis=1) - targets
    return row_losses, dlogits


def _head_loss(model, x, targets, grads, head="classifier"):
    cache = []
    emb = model.forward_full(x, cache)
    row_losses, dlogits = _soft_ce(model.head_forward(emb, head), targets)
    dlogits /= x.shape[0]
    demb = model.head_backward(dlogits, emb, grads, head)
    model._backward_range(demb, cache, grads)
    return row_losses.mean()


def ce_loss(model, batch):
    x, y = batch
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptySet("Cross entropy of an empty batch")
    grads = model.zero_grads()
    loss = _head_loss(model, x, one_hot(y, model.n_classes), grads)
    return loss, grads


def _as_images(x, image_shape):
    return x.reshape((x.shape[0],) + tuple(image_shape))


def _augment_branch(fn, x, rng, policy, image_shape):
    if policy.is_image:
        if image_shape is None:
            raise InvalidInput(f"{policy.kind.value} needs image inputs")
        return fn(_as_images(x, image_shape), rng, policy).reshape(x.shape[0], -1)
    return fn(x, rng, policy)


def hct_loss(model, pair_batch, rng, config, lam=None, layers=None):
    """Mixed-feature consistency loss over ``(x1, y1, x2, y2)`` pairs.

    ``lam`` and ``layers`` override the per-pair draws.
    """
    x1, y1, x2, y2 = pair_batch
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    B = x1.shape[0]
    if B == 0:
        raise EmptySet("Consistency loss of an empty batch")
    if x2.shape != x1.shape:
        raise ShapeError("Pair members must have the same shape")

    eligible = config.layers_for(model)
    if lam is None:
        lam = sample_beta(derive_stream(rng, 1), config.alpha, size=B)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (B,))
    if layers is None:
        layers = derive_stream(rng, 2).generator.choice(eligible, size=B)
    layers = np.broadcast_to(np.asarray(layers, dtype=np.int64), (B,))

    image_shape = model.image_shape
    xa = _augment_branch(weak_augment, x1, derive_stream(rng, 3), config.weak_aug, image_shape)
    if config.mm_mode:
        xb = _augment_branch(weak_augment, x2, derive_stream(rng, 4), config.weak_aug, image_shape)
    else:
        xb = _augment_branch(strong_augment, x2, derive_stream(rng, 4), config.strong_aug, image_shape)

    n = model.n_classes
    targets = mix_labels(one_hot(y1, n), one_hot(y2, n), lam[:, None])

    grads = model.zero_grads()
    row_losses = np.empty(B)
    for l in np.unique(layers):
        idx = np.flatnonzero(layers == l)
        lam_l = lam[idx][:, None]
        cache_a, cache_b, cache_up = [], [], []
        ha = model.forward_to_layer(xa[idx], int(l), cache_a)
        hb = model.forward_to_layer(xb[idx], int(l), cache_b)
        emb = model.forward_from_layer(mix_hidden(ha, hb, lam_l), int(l), cache_up)
        losses, dlogits = _soft_ce(model.head_forward(emb), targets[idx])
        row_losses[idx] = losses
        dlogits /= B
        dmix = model._backward_range(model.head_backward(dlogits, emb, grads), cache_up, grads)
        model._backward_range(lam_l * dmix, cache_a, grads)
        model._backward_range((1.0 - lam_l) * dmix, cache_b, grads)
    return row_losses.mean(), grads


def rotate_images(images, ks):
    return np.stack([np.rot90(img, int(k)) for img, k in zip(images, ks)])


def rot_loss(model, image_batch, rng, ks=None):
    """4-way rotation prediction on images rotated by k * 90 degrees."""
    images = np.asarray(image_batch, dtype=np.float64)
    if images.ndim != 3 or images.shape[1] != images.shape[2]:
        raise InvalidInput(f"Rotation loss needs a batch of square images, got {images.shape}")
    if not model.has_rotation_head:
        raise MissingHead("Rotation loss needs a rotation head")
    B = images.shape[0]
    if B == 0:
        raise EmptySet("Rotation loss of an empty batch")
    if ks is None:
        ks = rng.generator.integers(0, 4, size=B)
    ks = np.broadcast_to(np.asarray(ks, dtype=np.int64), (B,))
    x = rotate_images(images, ks).reshape(B, -1)
    grads = model.zero_grads()
    loss = _head_loss(model, x, one_hot(ks, 4), grads, head="rotation")
    return loss, grads


# ----------------------------------------------------------------------
# optimization


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(p)):
                raise TrainingDiverged(f"Non-finite parameters after step {self.t}")


def hct_start_epoch(config, epochs):
    return int(math.ceil(config.schedule_fraction * epochs))


def train(model, dataset, train_config, rng, reporter=None, monitor=None):
    """Train a copy of ``model`` on ``dataset``; returns (model, loss curves).

    Cross entropy (plus rotation loss when enabled) is optimized from the
    first epoch; the consistency term joins at ``hct_start_epoch``.
    ``monitor(model)`` may return a validation accuracy per epoch.
    """
    model = model.copy()
    X = np.asarray(dataset.features, dtype=np.float64)
    Y = np.asarray(dataset.labels, dtype=np.int64)
    n = X.shape[0]
    if n == 0:
        raise EmptySet("Training set is empty")
    if Y.max() >= model.n_classes:
        raise InvalidLabel(f"Dataset has labels beyond the {model.n_classes} head outputs")

    cfg = train_config
    hct = cfg.hct if cfg.hct is not None and cfg.hct.eta > 0 else None
    start = hct_start_epoch(hct, cfg.epochs) if hct is not None else cfg.epochs
    use_rot = cfg.rot
    image_shape = getattr(dataset, "image_shape", None)
    if use_rot and image_shape is None:
        log.warning("Rotation loss is only defined for images; skipping it on vector data")
        use_rot = False

    shuffle_gen = derive_stream(rng, 1).generator
    pair_gen = derive_stream(rng, 4).generator
    hct_rng = derive_stream(rng, 2)
    rot_rng = derive_stream(rng, 3)

    params = model.parameters()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        sums = {"loss_ce": 0.0, "loss_hct": 0.0, "loss_rot": 0.0}
        n_batches = 0
        perm = shuffle_gen.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            xb, yb = X[idx], Y[idx]
            loss, grads = ce_loss(model, (xb, yb))
            sums["loss_ce"] += loss

            if use_rot:
                l_rot, g_rot = rot_loss(model, _as_images(xb, image_shape), derive_stream(rot_rng, step))
                sums["loss_rot"] += l_rot
                for g, gr in zip(grads, g_rot):
                    g += gr

            if hct is not None and epoch >= start:
                # pairs drawn from the batch with replacement
                i1 = pair_gen.integers(0, len(idx), size=len(idx))
                i2 = pair_gen.integers(0, len(idx), size=len(idx))
                pairs = (xb[i1], yb[i1], xb[i2], yb[i2])
                l_hct, g_hct = hct_loss(model, pairs, derive_stream(hct_rng, step), hct)
                sums["loss_hct"] += l_hct
                for g, gh in zip(grads, g_hct):
                    g += hct.eta * gh

            if not np.isfinite(sum(sums.values())):
                raise TrainingDiverged(f"Loss became NaN at epoch {epoch}, step {step}")
            opt.step(params, grads)
            n_batches += 1
            step += 1

        row = {"epoch": epoch}
        row.update({k: v / n_batches for k, v in sums.items()})
        row["train_acc"] = float(np.mean(model.predict(X) == Y))
        row["val_acc"] = float(monitor(model)) if monitor is not None else float("nan")
        rows.append(row)
        if reporter is not None:
            reporter.report(row)

    return model, pd.DataFrame(rows, columns=CURVE_COLUMNS)


def embed_feature_set(model, feature_set):
    """Run ``model`` over a feature set and return the embedded set."""
    emb = model.forward_full(feature_set.features)
    return FeatureSet(
        features=emb,
        labels=np.asarray(feature_set.labels).copy(),
        class_names=feature_set.class_names,
        source=f"embedded({feature_set.source})",
    )
