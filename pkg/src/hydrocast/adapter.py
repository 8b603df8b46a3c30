"""Frozen general-purpose temporal encoder with a small trainable residual
adapter. The frozen stack is seeded at construction and never updated; the
adapter starts as an exact identity (zero-initialized output layer)."""

from __future__ import annotations

import hashlib

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Module, glorot, zeros

EMBED_DIM = 64
_HIDDEN = 128
_BOTTLENECK = 8


class FrozenEncoder(Module):
    """Depth-3 dense+tanh stack mapping a length-L window to a 64-dim embedding.

    Stands in for a pre-trained temporal encoder: weights are drawn from the
    given seed and marked non-trainable, so no gradient ever reaches them.
    """

    def __init__(self, window: int, seed: int):
        rng = np.random.default_rng(seed)
        self.seed = seed
        def frozen(fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)),
                          requires_grad=False)
        self.w1 = frozen(window, _HIDDEN)
        self.b1 = Tensor(np.zeros(_HIDDEN))
        self.w2 = frozen(_HIDDEN, _HIDDEN)
        self.b2 = Tensor(np.zeros(_HIDDEN))
        self.w3 = frozen(_HIDDEN, EMBED_DIM)
        self.b3 = Tensor(np.zeros(EMBED_DIM))

    def encode(self, x: Tensor) -> Tensor:
        """(B, L) -> (B, 64), deterministic, gradient-free on this side."""
        h = ad.tanh(x @ self.w1 + self.b1)
        h = ad.tanh(h @ self.w2 + self.b2)
        return ad.tanh(h @ self.w3 + self.b3)

    def weights_hash(self) -> str:
        digest = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()


class ResidualAdapter(Module):
    """Bottleneck pair of dense maps (64 -> 8 -> 64) applied residually:
    h' = h + A(h). Must stay under 5% of the frozen encoder's parameters."""

    def __init__(self, encoder: FrozenEncoder, rng: np.random.Generator):
        self.w_down = glorot(rng, EMBED_DIM, _BOTTLENECK)
        self.b_down = zeros(_BOTTLENECK)
        self.w_up = zeros(_BOTTLENECK, EMBED_DIM)  # zero init: identity at start
        self.b_up = zeros(EMBED_DIM)
        budget = 0.05 * encoder.parameter_count(trainable_only=False)
        own = self.parameter_count()
        if own >= budget:
            raise ValueError(
                f"adapter has {own} parameters, exceeding 5% of the frozen "
                f"encoder ({budget:.0f})")

    def adapt(self, h: Tensor) -> Tensor:
        delta = ad.tanh(h @ self.w_down + self.b_down) @ self.w_up + self.b_up
        return h + delta
