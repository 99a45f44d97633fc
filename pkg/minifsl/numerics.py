"""Random streams and the vector primitives everything else builds on.

All arrays are float64. Random numbers come from numpy's counter-based
Philox generator, keyed by ``(seed, stream_id)``; child streams are derived
from the parent ids and a tag, never from the parent's consumed state, so
the draws an episode sees do not depend on which worker ran it or in which
order.
"""

import numpy as np
from scipy import special

from minifsl.errors import DegenerateVector, InvalidConfig, InvalidInput

UINT64 = 2**64


class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    The underlying generator is created on first use. Two streams with the
    same ids produce bit-identical sequences; use :func:`derive_stream` to
    hand independent streams to workers.
    """

    def __init__(self, seed, stream_id=0):
        if seed < 0 or stream_id < 0:
            raise InvalidConfig("Seeds and stream ids must be non-negative")
        self.seed = int(seed) % UINT64
        self.stream_id = int(stream_id) % UINT64
        self._gen = None

    @property
    def generator(self):
        if self._gen is None:
            ss = np.random.SeedSequence([self.seed, self.stream_id])
            self._gen = np.random.Generator(np.random.Philox(ss))
        return self._gen

    def __eq__(self, other):
        return (
            isinstance(other, RngStream)
            and self.seed == other.seed
            and self.stream_id == other.stream_id
        )

    def __hash__(self):
        return hash((self.seed, self.stream_id))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def derive_stream(rng, tag):
    """Child stream of ``rng`` for ``tag``; order of nested derivations matters."""
    if tag < 0:
        raise InvalidConfig("Stream tags must be non-negative")
    ss = np.random.SeedSequence([rng.seed, rng.stream_id, int(tag) % UINT64])
    child_id = int(ss.generate_state(1, np.uint64)[0])
    return RngStream(rng.seed, child_id)


def check_finite(x, what="input"):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInput(f"Non-finite values in {what}")
    return x


def softmax(logits, axis=-1):
    logits = check_finite(logits, "logits")
    # scipy subtracts the max before exponentiating
    return special.softmax(logits, axis=axis)


def log_softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=np.float64)
    return logits - special.logsumexp(logits, axis=axis, keepdims=True)


def row_norms(x):
    return np.linalg.norm(np.asarray(x, dtype=np.float64), axis=-1)


def cosine_similarity(a, b):
    a = check_finite(a)
    b = check_finite(b)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateVector("Cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_matrix(a, b):
    """Pairwise cosine similarities between the rows of ``a`` and ``b``."""
    a = check_finite(a)
    b = check_finite(b)
    na = row_norms(a)
    nb = row_norms(b)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateVector("Cosine similarity of a zero-norm vector")
    sim = (a / na[:, None]) @ (b / nb[:, None]).T
    return np.clip(sim, -1.0, 1.0)


def sq_euclidean_matrix(a, b):
    a = check_finite(a)
    b = check_finite(b)
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def sample_beta(rng, alpha, size=None):
    """Draw from Beta(alpha, alpha) as g1 / (g1 + g2) with g1, g2 ~ Gamma(alpha)."""
    if not alpha > 0:
        raise InvalidConfig(f"Beta parameter must be positive, got {alpha}")
    gen = rng.generator
    g1 = gen.standard_gamma(alpha, size)
    g2 = gen.standard_gamma(alpha, size)
    denom = g1 + g2
    with np.errstate(invalid="ignore", divide="ignore"):
        lam = np.where(denom > 0, g1 / denom, 0.5)
    if size is None:
        return float(lam)
    return lam
