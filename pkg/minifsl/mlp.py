"""A small ReLU embedding network with hand-written backprop.

The embedding is f = f^L o ... o f^1 o f^0 where f^0 is the identity and
each f^l (l >= 1) is an affine map followed by ReLU. Passes can be split at
any layer l: ``forward_from_layer(forward_to_layer(x, l), l)`` is the full
embedding. A linear classifier head maps embeddings to base-class logits,
and an optional second head predicts one of four image rotations.

Parameters are kept as a flat list of arrays in a fixed order (block
weights and biases, then classifier head, then rotation head) so gradients
and optimizer state can be plain lists of the same shapes.
"""

import copy

import numpy as np

from minifsl.errors import InvalidLayer, MissingHead, ShapeError
from minifsl.numerics import RngStream

N_ROTATIONS = 4


class MlpModel:
    def __init__(
        self,
        input_dim,
        n_classes,
        hidden=(128, 128, 128),
        embed_dim=64,
        rotation_head=False,
        image_shape=None,
        rng=None,
    ):
        if rng is None:
            rng = RngStream(0)
        gen = rng.generator
        self.input_dim = int(input_dim)
        self.n_classes = int(n_classes)
        self.hidden = tuple(int(h) for h in hidden)
        self.embed_dim = int(embed_dim)
        self.image_shape = tuple(image_shape) if image_shape is not None else None

        widths = (self.input_dim,) + self.hidden + (self.embed_dim,)
        self.blocks = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            W = gen.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.blocks.append([W, np.zeros(fan_out)])

        def _head(n_out):
            W = gen.normal(0.0, np.sqrt(1.0 / self.embed_dim), size=(self.embed_dim, n_out))
            return [W, np.zeros(n_out)]

        self.classifier = _head(self.n_classes)
        self.rotation = _head(N_ROTATIONS) if rotation_head else None

    @property
    def n_layers(self):
        return len(self.blocks)

    @property
    def has_rotation_head(self):
        return self.rotation is not None

    def parameters(self):
        params = [p for block in self.blocks for p in block]
        params += self.classifier
        if self.rotation is not None:
            params += self.rotation
        return params

    def param_names(self):
        names = []
        for i in range(self.n_layers):
            names += [f"block{i + 1}.W", f"block{i + 1}.b"]
        names += ["classifier.W", "classifier.b"]
        if self.rotation is not None:
            names += ["rotation.W", "rotation.b"]
        return names

    def zero_grads(self):
        return [np.zeros_like(p) for p in self.parameters()]

    def copy(self):
        return copy.deepcopy(self)

    # ------------------------------------------------------------------
    def _check_layer(self, l):
        if not 0 <= l <= self.n_layers:
            raise InvalidLayer(f"Layer {l} outside 0..{self.n_layers}")

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"Expected inputs of dimension {self.input_dim}, got {x.shape}")
        return x

    def _forward_range(self, h, start, stop, cache=None):
        for i in range(start, stop):
            W, b = self.blocks[i]
            z = h @ W + b
            if cache is not None:
                cache.append((i, h, z))
            h = np.maximum(z, 0.0)
        return h

    def _backward_range(self, dh, cache, grads):
        """Backprop ``dh`` through the cached blocks, accumulating into ``grads``."""
        for i, h_in, z in reversed(cache):
            dz = dh * (z > 0)
            W, _ = self.blocks[i]
            grads[2 * i] += h_in.T @ dz
            grads[2 * i + 1] += dz.sum(axis=0)
            dh = dz @ W.T
        return dh

    def forward_to_layer(self, x, l, cache=None):
        self._check_layer(l)
        return self._forward_range(self._check_input(x), 0, l, cache)

    def forward_from_layer(self, h, l, cache=None):
        self._check_layer(l)
        h = np.asarray(h, dtype=np.float64)
        if h.ndim == 1:
            h = h[None, :]
        return self._forward_range(h, l, self.n_layers, cache)

    def forward_full(self, x, cache=None):
        return self.forward_to_layer(x, self.n_layers, cache)

    embed = forward_full

    # ------------------------------------------------------------------
    def _head_index(self, head):
        base = 2 * self.n_layers
        if head == "classifier":
            return base
        if self.rotation is None:
            raise MissingHead("Model has no rotation head")
        return base + 2

    def _head(self, head):
        if head == "classifier":
            return self.classifier
        if self.rotation is None:
            raise MissingHead("Model has no rotation head")
        return self.rotation

    def head_forward(self, emb, head="classifier"):
        W, b = self._head(head)
        return emb @ W + b

    def head_backward(self, dlogits, emb, grads, head="classifier"):
        W, _ = self._head(head)
        k = self._head_index(head)
        grads[k] += emb.T @ dlogits
        grads[k + 1] += dlogits.sum(axis=0)
        return dlogits @ W.T

    def logits(self, x, head="classifier"):
        return self.head_forward(self.forward_full(x), head)

    def predict(self, x):
        return np.argmax(self.logits(x), axis=1)
