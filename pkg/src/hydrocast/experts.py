"""Five lightweight residual-window forecasters with distinct inductive biases.

Every expert maps (residual window, covariates, optional foundation embedding)
to an H-step vector. Pooled features are concatenated with mean-pooled
covariates and the foundation embedding right before each expert's final dense
layer. Each expert must stay under the 60k-parameter budget, enforced at
construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decomposition import replicate_pad
from .layers import Module, glorot, zeros

EXPERT_NAMES = ("linear", "frequency", "patch", "lstm", "dynnorm")
PARAM_BUDGET = 60_000
FREQUENCY_PERIODS = (7, 14, 30, 91, 182)


@dataclass
class ExpertInput:
    """Shared input bundle for one batch of windows."""

    r_window: Tensor                 # (B, L)
    u_window: Tensor | None          # (B, L, C) standardized covariates
    foundation: Tensor | None = None  # (B, F) adapted embedding

    @property
    def batch(self) -> int:
        return self.r_window.shape[0]




class Expert(Module):
    """Common plumbing: tail feature concat and the parameter budget check."""

    name = "expert"

    def __init__(self, horizon: int, covariates: bool, foundation_dim: int):
        self.horizon = horizon
        self.covariates = covariates
        self.foundation_dim = foundation_dim

    def _tail_dims(self) -> int:
        return (2 if self.covariates else 0) + self.foundation_dim

    def _tail(self, pooled: Tensor, inp: ExpertInput) -> Tensor:
        parts = [pooled]
        if self.covariates:
            parts.append(ad.tmean(inp.u_window, axis=1))
        if self.foundation_dim:
            parts.append(inp.foundation)
        return ad.concatenate(parts, axis=1) if len(parts) > 1 else pooled

    def _check_budget(self):
        n = self.parameter_count()
        if n >= PARAM_BUDGET:
            raise ValueError(
                f"{self.name} expert has {n} parameters, budget is {PARAM_BUDGET}")

    def forward(self, inp: ExpertInput) -> Tensor:
        raise NotImplementedError


class LinearExpert(Expert):
    """Single dense map from the flattened window plus pooled covariates."""

    name = "linear"

    def __init__(self, window: int, horizon: int, covariates: bool,
                 foundation_dim: int, rng: np.random.Generator):
        super().__init__(horizon, covariates, foundation_dim)
        d = window + self._tail_dims()
        self.w = glorot(rng, d, horizon)
        self.b = zeros(horizon)
        self._check_budget()

    def forward(self, inp: ExpertInput) -> Tensor:
        feats = self._tail(inp.r_window, inp)
        return feats @ self.w + self.b


class FrequencyExpert(Expert):
    """Fixed sin/cos projections on hydrologic periods plus a three-layer
    convolution summary (kernels 7, 15, 31)."""

    name = "frequency"

    def __init__(self, window: int, horizon: int, covariates: bool,
                 foundation_dim: int, rng: np.random.Generator):
        super().__init__(horizon, covariates, foundation_dim)
        t = np.arange(window)
        basis = []
        for p in FREQUENCY_PERIODS:
            basis.append(np.cos(2 * np.pi * t / p))
            basis.append(np.sin(2 * np.pi * t / p))
        self._basis = np.stack(basis, axis=1) / window  # (L, 10), fixed grid
        ch = 8
        self.k1 = glorot(rng, 7, ch, shape=(ch, 1, 7))
        self.b1 = zeros(ch)
        self.k2 = glorot(rng, ch * 15, ch, shape=(ch, ch, 15))
        self.b2 = zeros(ch)
        self.k3 = glorot(rng, ch * 31, ch, shape=(ch, ch, 31))
        self.b3 = zeros(ch)
        d = 2 * len(FREQUENCY_PERIODS) + ch + self._tail_dims()
        self.w = glorot(rng, d, horizon)
        self.b = zeros(horizon)
        self._check_budget()

    def forward(self, inp: ExpertInput) -> Tensor:
        proj = inp.r_window @ Tensor(self._basis)
        h = ad.reshape(inp.r_window, (inp.batch, 1, inp.r_window.shape[1]))
        for k, b, pad in ((self.k1, self.b1, 3), (self.k2, self.b2, 7),
                          (self.k3, self.b3, 15)):
            h = ad.tanh(ad.conv1d(replicate_pad(h, pad, pad), k, b))
        summary = ad.tmean(h, axis=2)
        feats = self._tail(ad.concatenate([proj, summary], axis=1), inp)
        return feats @ self.w + self.b


class PatchAttentionExpert(Expert):
    """Patch tokens (length 16, stride 8), learned positions, one two-head
    self-attention layer with a feed-forward block, mean-pooled."""

    name = "patch"

    def __init__(self, window: int, horizon: int, covariates: bool,
                 foundation_dim: int, rng: np.random.Generator,
                 patch_len: int = 16, stride: int = 8, dim: int = 32,
                 heads: int = 2):
        super().__init__(horizon, covariates, foundation_dim)
        self.patch_len = patch_len
        self.stride = stride
        self.dim = dim
        self.heads = heads
        self.pad_to = max(window, patch_len)
        self.n_patches = (self.pad_to - patch_len) // stride + 1
        starts = np.arange(self.n_patches) * stride
        self._patch_idx = starts[:, None] + np.arange(patch_len)[None, :]

        self.embed_w = glorot(rng, patch_len, dim)
        self.embed_b = zeros(dim)
        self.positions = Tensor(rng.normal(0, 0.02, size=(self.n_patches, dim)),
                                requires_grad=True)
        self.wq = glorot(rng, dim, dim)
        self.wk = glorot(rng, dim, dim)
        self.wv = glorot(rng, dim, dim)
        self.wo = glorot(rng, dim, dim)
        self.ff1_w = glorot(rng, dim, 2 * dim)
        self.ff1_b = zeros(2 * dim)
        self.ff2_w = glorot(rng, 2 * dim, dim)
        self.ff2_b = zeros(dim)
        d = dim + self._tail_dims()
        self.w = glorot(rng, d, horizon)
        self.b = zeros(horizon)
        self._check_budget()

    def _heads_split(self, x: Tensor) -> Tensor:
        B, n, d = x.shape
        return ad.transpose(ad.reshape(x, (B, n, self.heads, d // self.heads)),
                            (0, 2, 1, 3))

    def forward(self, inp: ExpertInput) -> Tensor:
        B = inp.batch
        r = inp.r_window
        if r.shape[1] < self.pad_to:
            r = replicate_pad(r, 0, self.pad_to - r.shape[1])
        tokens = ad.gather_last(r, self._patch_idx)          # (B, n, 16)
        tokens = tokens @ self.embed_w + self.embed_b
        tokens = tokens + self.positions
        q = self._heads_split(tokens @ self.wq)
        k = self._heads_split(tokens @ self.wk)
        v = self._heads_split(tokens @ self.wv)
        att = ad.multihead_attention(q, k, v)                # (B, h, n, dh)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)),
                         (B, self.n_patches, self.dim))
        tokens = tokens + att @ self.wo
        ff = ad.tanh(tokens @ self.ff1_w + self.ff1_b) @ self.ff2_w + self.ff2_b
        tokens = tokens + ff
        pooled = ad.tmean(tokens, axis=1)
        feats = self._tail(pooled, inp)
        return feats @ self.w + self.b


class RecurrentExpert(Expert):
    """Single-layer LSTM over (residual, covariates) steps; the final hidden
    state drives the output head."""

    name = "lstm"

    def __init__(self, window: int, horizon: int, covariates: bool,
                 foundation_dim: int, rng: np.random.Generator, hidden: int = 32):
        super().__init__(horizon, covariates, foundation_dim)
        self.hidden = hidden
        d_in = 1 + (2 if covariates else 0)
        self.wx = glorot(rng, d_in, 4 * hidden)
        self.wh = glorot(rng, hidden, 4 * hidden)
        self.b_gates = zeros(4 * hidden)
        d = hidden + self.foundation_dim
        self.w = glorot(rng, d, horizon)
        self.b = zeros(horizon)
        self._check_budget()

    def forward(self, inp: ExpertInput) -> Tensor:
        B, L = inp.r_window.shape
        r = ad.reshape(inp.r_window, (B, L, 1))
        seq = ad.concatenate([r, inp.u_window], axis=2) if self.covariates else r
        h_final = ad.lstm_sequence(seq, self.wx, self.wh, self.b_gates)
        parts = [h_final]
        if self.foundation_dim:
            parts.append(inp.foundation)
        feats = ad.concatenate(parts, axis=1) if len(parts) > 1 else h_final
        return feats @ self.w + self.b


class DynNormAttentionExpert(Expert):
    """Self-attention over day-level tokens rescaled by the window's own
    statistics; the output is mapped back through those statistics."""

    name = "dynnorm"
    EPS = 1e-6

    def __init__(self, window: int, horizon: int, covariates: bool,
                 foundation_dim: int, rng: np.random.Generator,
                 dim: int = 16, heads: int = 2):
        super().__init__(horizon, covariates, foundation_dim)
        self.dim = dim
        self.heads = heads
        self.embed_w = glorot(rng, 1, dim)
        self.embed_b = zeros(dim)
        self.wq = glorot(rng, dim, dim)
        self.wk = glorot(rng, dim, dim)
        self.wv = glorot(rng, dim, dim)
        self.wo = glorot(rng, dim, dim)
        d = dim + self._tail_dims()
        self.w = glorot(rng, d, horizon)
        self.b = zeros(horizon)
        self._check_budget()

    def forward(self, inp: ExpertInput) -> Tensor:
        B, L = inp.r_window.shape
        mu = ad.tmean(inp.r_window, axis=1, keepdims=True)            # (B, 1)
        # eps^2 inside the root keeps the gradient finite on constant windows
        sigma = ad.sqrt(ad.tvariance(inp.r_window, axis=1, keepdims=True) + self.EPS ** 2)
        normed = (inp.r_window - mu) / (sigma + self.EPS)
        tokens = ad.reshape(normed, (B, L, 1)) @ self.embed_w + self.embed_b
        dh = self.dim // self.heads
        def split(x):
            return ad.transpose(ad.reshape(x, (B, L, self.heads, dh)), (0, 2, 1, 3))
        att = ad.multihead_attention(split(tokens @ self.wq),
                                     split(tokens @ self.wk),
                                     split(tokens @ self.wv))
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, L, self.dim))
        pooled = ad.tmean(att @ self.wo, axis=1)
        feats = self._tail(pooled, inp)
        raw = feats @ self.w + self.b
        return raw * sigma + mu


def build_experts(window: int, horizon: int, covariates: bool,
                  foundation_dim: int, rng: np.random.Generator,
                  names=EXPERT_NAMES) -> dict[str, Expert]:
    factories = {
        "linear": LinearExpert,
        "frequency": FrequencyExpert,
        "patch": PatchAttentionExpert,
        "lstm": RecurrentExpert,
        "dynnorm": DynNormAttentionExpert,
    }
    return {name: factories[name](window, horizon, covariates, foundation_dim, rng)
            for name in names}


def run_all_experts(experts: dict[str, Expert], inp: ExpertInput,
                    names=EXPERT_NAMES) -> Tensor:
    """Stack expert forecasts in fixed order: (B, K, H)."""
    rows = []
    for name in names:
        out = experts[name].forward(inp)
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError(f"{name} expert produced non-finite output")
        rows.append(ad.reshape(out, (inp.batch, 1, out.shape[1])))
    return ad.concatenate(rows, axis=1)
