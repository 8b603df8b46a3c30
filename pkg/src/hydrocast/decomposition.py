"""Learnable trend/seasonal/residual split and multi-step extrapolation.

The trend is a linear projection of the input window; the seasonal term is a
truncated Fourier basis with a trainable base period whose coefficients are
emitted per window by a small convolutional spectral encoder. The residual is
whatever remains, so the three components always reconstruct the input
exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .layers import Module, glorot, zeros

TWO_PI = 2.0 * math.pi


def replicate_pad(x: Tensor, left: int, right: int) -> Tensor:
    """Edge-replication padding along the last axis of (B, C, T) or (B, T)."""
    parts = []
    first = x[..., :1]
    last = x[..., -1:]
    if left:
        parts.append(ad.broadcast_to(first, (*x.shape[:-1], left)))
    parts.append(x)
    if right:
        parts.append(ad.broadcast_to(last, (*x.shape[:-1], right)))
    return ad.concatenate(parts, axis=-1) if len(parts) > 1 else x


class LinearTrend(Module):
    """Trend as a dense projection of the lag window: T_t = w . x + b."""

    def __init__(self, window: int, rng: np.random.Generator):
        self.window = window
        # start near a moving average so the residual begins small
        self.w = Tensor(np.full(window, 1.0 / window)
                        + rng.normal(0, 0.01 / window, size=window), requires_grad=True)
        self.b = zeros()

    def end_value(self, x: Tensor) -> Tensor:
        """(B, L) -> (B,): trend at the window's final day."""
        if x.shape[-1] != self.window:
            raise ValueError(
                f"trend: window length {x.shape[-1]} does not match model ({self.window})")
        return x @ self.w + self.b

    def curve(self, x: Tensor) -> Tensor:
        """(B, L) -> (B, L): the projection applied at every causal sub-window.

        The earliest positions pad on the left with the first observed value.
        """
        if x.shape[-1] != self.window:
            raise ValueError(
                f"trend: window length {x.shape[-1]} does not match model ({self.window})")
        L = self.window
        padded = ad.concatenate(
            [ad.broadcast_to(x[:, :1], (x.shape[0], L - 1)), x], axis=1)
        return ad.sliding_dot(padded, self.w) + self.b

    def extrapolate(self, x: Tensor, horizon: int) -> Tensor:
        """Roll the projection forward, feeding back its own outputs.

        The window for step h drops the oldest day and appends the previous
        trend value, so the extrapolation follows the model's smooth path
        rather than raw forecasts.
        """
        buf = x
        prev = ad.reshape(self.end_value(x), (x.shape[0], 1))
        steps = []
        for _ in range(horizon):
            buf = ad.concatenate([buf[:, 1:], prev], axis=1)
            prev = ad.reshape(self.end_value(buf), (x.shape[0], 1))
            steps.append(prev)
        return ad.concatenate(steps, axis=1)


class SpectralEncoder(Module):
    """Two same-length conv layers (kernel 7, channels 8 then 16, tanh) with
    global average pooling; shared trunk for seasonal coefficients, masked
    reconstruction and the multi-scale embeddings."""

    CHANNELS = (8, 16)
    KERNEL = 7

    def __init__(self, rng: np.random.Generator):
        k = self.KERNEL
        c1, c2 = self.CHANNELS
        self.k1 = glorot(rng, k, c1, shape=(c1, 1, k))
        self.b1 = zeros(c1)
        self.k2 = glorot(rng, c1 * k, c2, shape=(c2, c1, k))
        self.b2 = zeros(c2)
        self.out_dim = c2

    def features(self, x: Tensor) -> Tensor:
        """(B, T) -> (B, 16) pooled features; any T >= 1 (edge padding)."""
        pad = self.KERNEL // 2
        h = ad.reshape(x, (x.shape[0], 1, x.shape[1]))
        h = ad.tanh(ad.conv1d(replicate_pad(h, pad, pad), self.k1, self.b1))
        h = ad.tanh(ad.conv1d(replicate_pad(h, pad, pad), self.k2, self.b2))
        return ad.tmean(h, axis=2)


class FourierSeasonal(Module):
    """Truncated Fourier seasonality with a trainable base period.

    Coefficients come from the spectral encoder per window by default; the
    global mode replaces them with directly trained constants (ablation).
    """

    def __init__(self, window: int, cfg: ModelConfig, rng: np.random.Generator):
        self.window = window
        self.harmonics = cfg.harmonics
        self.period_min = cfg.period_min
        self.period_max = cfg.period_max
        self.global_mode = cfg.seasonal_global_coefficients
        self.period = Tensor(np.asarray(cfg.period_init), requires_grad=True)
        self.encoder = SpectralEncoder(rng)
        self.coeff_head_w = glorot(rng, self.encoder.out_dim, 2 * cfg.harmonics)
        self.coeff_head_b = zeros(2 * cfg.harmonics)
        self.global_coeffs = Tensor(rng.normal(0, 0.1, size=2 * cfg.harmonics),
                                    requires_grad=True)

    def coefficients(self, x: Tensor) -> Tensor:
        """(B, L) -> (B, 2*M): cosine coefficients then sine coefficients."""
        if self.global_mode:
            return ad.broadcast_to(
                ad.reshape(self.global_coeffs, (1, 2 * self.harmonics)),
                (x.shape[0], 2 * self.harmonics))
        feats = self.encoder.features(x)
        return feats @ self.coeff_head_w + self.coeff_head_b

    def curve(self, coeffs: Tensor, t_grid: np.ndarray) -> Tensor:
        """Evaluate the basis at absolute day indices t_grid (B, n) -> (B, n)."""
        M = self.harmonics
        total = None
        t_const = Tensor(np.asarray(t_grid, dtype=np.float64))
        for m in range(1, M + 1):
            phase = (t_const * (TWO_PI * m)) / self.period
            alpha = coeffs[:, m - 1:m]
            beta = coeffs[:, M + m - 1:M + m]
            term = alpha * ad.cos(phase) + beta * ad.sin(phase)
            total = term if total is None else total + term
        return total

    def clamp_period(self) -> None:
        """Keep the base period inside its stability bounds (applied after
        every optimizer step)."""
        self.period.data = np.clip(self.period.data, self.period_min, self.period_max)


@dataclass
class DecompositionResult:
    """Additive split of one batch of windows plus extrapolations."""

    trend: Tensor            # (B, L)
    seasonal: Tensor         # (B, L)
    residual: Tensor         # (B, L)
    trend_hat: Tensor        # (B, H)
    seasonal_hat: Tensor     # (B, H)
    coefficients: Tensor     # (B, 2M)


def decompose(x: Tensor, t_anchor: np.ndarray, trend: LinearTrend,
              seasonal: FourierSeasonal, horizon: int) -> DecompositionResult:
    """Split windows into trend + seasonal + residual and extrapolate both
    structured parts ``horizon`` steps; x = T + S + R holds exactly."""
    B, L = x.shape
    t_anchor = np.asarray(t_anchor, dtype=np.int64)
    in_grid = t_anchor[:, None] + np.arange(-L + 1, 1)[None, :]
    out_grid = t_anchor[:, None] + np.arange(1, horizon + 1)[None, :]

    T = trend.curve(x)
    coeffs = seasonal.coefficients(x)
    S = seasonal.curve(coeffs, in_grid)
    R = x - T - S
    T_hat = trend.extrapolate(x, horizon)
    S_hat = seasonal.curve(coeffs, out_grid)
    return DecompositionResult(trend=T, seasonal=S, residual=R,
                               trend_hat=T_hat, seasonal_hat=S_hat,
                               coefficients=coeffs)
