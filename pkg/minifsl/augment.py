"""Label-preserving augmentation for vectors and toy images.

Weak image augmentation is a zero-padded random crop plus a horizontal flip.
Strong image augmentation applies ``n_ops`` operations drawn without
replacement from OPS, then cuts out one square. Vector policies perturb
with Gaussian noise, the strong one also rescales and drops coordinates.

Images are float arrays in [0, 1]; batches are ``(B, H, W)`` for images and
``(B, d)`` for vectors.
"""

import enum
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from minifsl.errors import InvalidConfig, InvalidInput


class AugmentKind(enum.Enum):
    IDENTITY = "identity"
    WEAK_VECTOR = "weak_vector"
    STRONG_VECTOR = "strong_vector"
    WEAK_IMAGE = "weak_image"
    STRONG_IMAGE = "strong_image"


IMAGE_KINDS = (AugmentKind.WEAK_IMAGE, AugmentKind.STRONG_IMAGE)
WEAK_KINDS = (AugmentKind.IDENTITY, AugmentKind.WEAK_VECTOR, AugmentKind.WEAK_IMAGE)
STRONG_KINDS = (AugmentKind.IDENTITY, AugmentKind.STRONG_VECTOR, AugmentKind.STRONG_IMAGE)


@dataclass(frozen=True)
class AugmentPolicy:
    kind: AugmentKind = AugmentKind.IDENTITY
    noise: float = 0.05
    dropout: float = 0.0
    scale: float = 0.0
    crop_pad: int = 2
    flip_prob: float = 0.5
    n_ops: int = 2
    magnitude: float = 0.5
    cutout: int = 4

    def __post_init__(self):
        if self.noise < 0:
            raise InvalidConfig("noise must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must lie in [0, 1)")
        if not 0.0 <= self.scale < 1.0:
            raise InvalidConfig("scale jitter must lie in [0, 1)")
        if self.crop_pad < 0 or self.cutout < 0:
            raise InvalidConfig("crop padding and cutout size must be non-negative")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise InvalidConfig("flip probability must lie in [0, 1]")
        if not 0 <= self.n_ops <= len(OPS):
            raise InvalidConfig(f"n_ops must lie in 0..{len(OPS)}")
        if not 0.0 <= self.magnitude <= 1.0:
            raise InvalidConfig("magnitude must lie in [0, 1]")

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def weak_vector(cls, noise=0.05):
        return cls(kind=AugmentKind.WEAK_VECTOR, noise=noise)

    @classmethod
    def strong_vector(cls, noise=0.3, dropout=0.2, scale=0.2):
        return cls(kind=AugmentKind.STRONG_VECTOR, noise=noise, dropout=dropout, scale=scale)

    @classmethod
    def weak_image(cls, crop_pad=2, flip_prob=0.5):
        return cls(kind=AugmentKind.WEAK_IMAGE, crop_pad=crop_pad, flip_prob=flip_prob)

    @classmethod
    def strong_image(cls, n_ops=2, magnitude=0.5, cutout=4):
        return cls(kind=AugmentKind.STRONG_IMAGE, n_ops=n_ops, magnitude=magnitude, cutout=cutout)

    @property
    def is_image(self):
        return self.kind in IMAGE_KINDS

    def to_json(self):
        return {
            "kind": self.kind.value,
            "noise": self.noise,
            "dropout": self.dropout,
            "scale": self.scale,
            "crop_pad": self.crop_pad,
            "flip_prob": self.flip_prob,
            "n_ops": self.n_ops,
            "magnitude": self.magnitude,
            "cutout": self.cutout,
        }

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["kind"] = AugmentKind(d.get("kind", "identity"))
        return cls(**d)


# ----------------------------------------------------------------------
# single-image operations


def hflip(img):
    return img[..., ::-1].copy()


def crop(img, pad, dy, dx):
    """Window of the zero-padded image at offset (dy, dx); (pad, pad) is the identity."""
    if pad == 0:
        return img.copy()
    padded = np.pad(img, pad, mode="constant")
    h, w = img.shape
    return padded[dy : dy + h, dx : dx + w]


def cutout_origin(gen, shape, size):
    h, w = shape
    y = int(gen.integers(0, h - size + 1))
    x = int(gen.integers(0, w - size + 1))
    return y, x


def cutout(img, size, y, x):
    out = img.copy()
    out[y : y + size, x : x + size] = 0.0
    return out


def _invert(img, m, gen):
    return 1.0 - img


def _quantize(img, m, gen):
    levels = 2 + int(round((1.0 - m) * 6))
    return np.round(img * (levels - 1)) / (levels - 1)


def _contrast(img, m, gen):
    f = 1.0 + gen.uniform(-0.9, 0.9) * m
    mean = img.mean()
    return np.clip(mean + f * (img - mean), 0.0, 1.0)


def _brightness(img, m, gen):
    f = 1.0 + gen.uniform(-0.9, 0.9) * m
    return np.clip(img * f, 0.0, 1.0)


def _translate(img, m, gen):
    limit = m * img.shape[0] / 3.0
    dy, dx = gen.uniform(-limit, limit, size=2)
    return ndimage.shift(img, (round(dy), round(dx)), order=0, cval=0.0)


def _rotate_small(img, m, gen):
    angle = gen.uniform(-30.0, 30.0) * m
    return np.clip(ndimage.rotate(img, angle, reshape=False, order=1, cval=0.0), 0.0, 1.0)


def _shear(img, m, gen):
    s = gen.uniform(-0.3, 0.3) * m
    matrix = np.array([[1.0, s], [0.0, 1.0]])
    center = (np.array(img.shape) - 1) / 2.0
    offset = center - matrix @ center
    out = ndimage.affine_transform(img, matrix, offset=offset, order=1, cval=0.0)
    return np.clip(out, 0.0, 1.0)


def _additive_noise(img, m, gen):
    return np.clip(img + gen.normal(0.0, 0.1 * m, size=img.shape), 0.0, 1.0)


OPS = (
    ("invert", _invert),
    ("quantize", _quantize),
    ("contrast", _contrast),
    ("brightness", _brightness),
    ("translate", _translate),
    ("rotate_small", _rotate_small),
    ("shear", _shear),
    ("additive_noise", _additive_noise),
)


# ----------------------------------------------------------------------
# batch policies


def _check_modality(x, policy):
    x = np.asarray(x, dtype=np.float64)
    if policy.kind == AugmentKind.IDENTITY:
        return x
    if policy.is_image and x.ndim != 3:
        raise InvalidInput(f"{policy.kind.value} expects a (B, H, W) image batch, got {x.shape}")
    if not policy.is_image and x.ndim != 2:
        raise InvalidInput(f"{policy.kind.value} expects a (B, d) vector batch, got {x.shape}")
    return x


def _weak_image(x, gen, policy):
    out = np.empty_like(x)
    p = policy.crop_pad
    for i, img in enumerate(x):
        dy, dx = gen.integers(0, 2 * p + 1, size=2)
        img = crop(img, p, dy, dx)
        if gen.random() < policy.flip_prob:
            img = hflip(img)
        out[i] = img
    return out


def _strong_image(x, gen, policy):
    out = np.empty_like(x)
    size = min(policy.cutout, *x.shape[1:])
    for i, img in enumerate(x):
        for k in gen.choice(len(OPS), size=policy.n_ops, replace=False):
            img = OPS[k][1](img, policy.magnitude, gen)
        if size > 0:
            y0, x0 = cutout_origin(gen, img.shape, size)
            img = cutout(img, size, y0, x0)
        out[i] = img
    return out


def _weak_vector(x, gen, policy):
    return x + gen.normal(0.0, policy.noise, size=x.shape)


def _strong_vector(x, gen, policy):
    scale = gen.uniform(1.0 - policy.scale, 1.0 + policy.scale, size=(x.shape[0], 1))
    out = x * scale + gen.normal(0.0, policy.noise, size=x.shape)
    keep = gen.random(x.shape) >= policy.dropout
    return out * keep


_DISPATCH = {
    AugmentKind.WEAK_VECTOR: _weak_vector,
    AugmentKind.STRONG_VECTOR: _strong_vector,
    AugmentKind.WEAK_IMAGE: _weak_image,
    AugmentKind.STRONG_IMAGE: _strong_image,
}


def augment(x, rng, policy):
    x = _check_modality(x, policy)
    if policy.kind == AugmentKind.IDENTITY:
        return x
    return _DISPATCH[policy.kind](x, rng.generator, policy)


def weak_augment(x, rng, policy):
    if policy.kind not in WEAK_KINDS:
        raise InvalidConfig(f"{policy.kind.value} is not a weak augmentation")
    return augment(x, rng, policy)


def strong_augment(x, rng, policy):
    if policy.kind not in STRONG_KINDS:
        raise InvalidConfig(f"{policy.kind.value} is not a strong augmentation")
    return augment(x, rng, policy)
