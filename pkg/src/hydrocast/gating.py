"""Hydrologic context features, softmax gate, convex fusion, forecast assembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import DataConfig
from .data import DataError, DatasetStats, SeriesRecord
from .layers import Module, glorot, zeros

YEAR_DAYS = 365.25
CONTEXT_DIM = 10  # doy sin/cos, api, local variance, rain percentile, flood flag, 4 static


def compute_api(precip_history: np.ndarray, gamma: float, n_p: int) -> float:
    """Antecedent precipitation index: sum of gamma^(i-1) * p_{t-i}.

    ``precip_history`` ends the day before the anchor (last entry is p_{t-1}).
    """
    if not 0 < gamma < 1:
        raise ValueError(f"compute_api: gamma must lie in (0, 1), got {gamma}")
    if n_p < 1:
        raise ValueError(f"compute_api: n_p must be at least 1, got {n_p}")
    hist = np.asarray(precip_history, dtype=np.float64)
    if hist.shape[-1] < n_p:
        raise ValueError(
            f"compute_api: need {n_p} days of history, got {hist.shape[-1]}")
    recent = hist[..., -n_p:][..., ::-1]
    return float(recent @ (gamma ** np.arange(n_p)))


@dataclass
class ContextVector:
    """Raw hydrologic regime features at one anchor day."""

    doy_sin: float
    doy_cos: float
    api: float
    local_var: float
    rain_pct: float
    flood_flag: float
    static_desc: np.ndarray


def compute_context(record: SeriesRecord, t: int, cfg: DataConfig,
                    stats: DatasetStats) -> ContextVector:
    """Context features at day t, causal and training-split-calibrated.

    The flood flag compares the current observation against the frozen 0.9
    training quantile; the precipitation percentile uses the frozen training
    grid. Raises when t lacks the required history, in which case the caller
    should drop the window.
    """
    need = max(cfg.api_days, cfg.variance_days)
    if t < need:
        raise DataError(
            f"compute_context: anchor {t} has fewer than {need} days of history; "
            "drop this window")
    if t >= len(record):
        raise DataError(f"compute_context: anchor {t} outside record of length {len(record)}")
    doy = float(record.day_of_year()[t])
    phase = 2 * np.pi * doy / YEAR_DAYS
    api = compute_api(record.precip[:t], cfg.api_decay, cfg.api_days)
    x_std = stats.standardize_runoff(record.runoff)
    local_var = float(x_std[t - cfg.variance_days + 1:t + 1].var())
    rain_pct = float(stats.precip_percentile(np.asarray([record.precip[t]]))[0])
    flood = 1.0 if x_std[t] > stats.q90_std else 0.0
    return ContextVector(
        doy_sin=float(np.sin(phase)), doy_cos=float(np.cos(phase)),
        api=api, local_var=local_var, rain_pct=rain_pct, flood_flag=flood,
        static_desc=record.static_desc.copy(),
    )


def context_matrix(record: SeriesRecord, anchors: np.ndarray, stats: DatasetStats,
                   cfg: DataConfig, x_std: np.ndarray | None = None) -> np.ndarray:
    """Vectorized gate input for a batch of anchors: (B, 10).

    API and local variance are z-scored with training-split constants so the
    gate's tanh layer sees comparable magnitudes.
    """
    anchors = np.asarray(anchors, dtype=np.int64)
    need = max(cfg.api_days, cfg.variance_days)
    if anchors.size and int(anchors.min()) < need:
        raise DataError(
            f"context_matrix: anchor {int(anchors.min())} has fewer than {need} "
            "days of history")
    if x_std is None:
        x_std = stats.standardize_runoff(record.runoff)
    doy = record.day_of_year()[anchors].astype(np.float64)
    phase = 2 * np.pi * doy / YEAR_DAYS

    n_p = cfg.api_days
    decay = cfg.api_decay ** np.arange(n_p)
    hist = record.precip[anchors[:, None] - np.arange(1, n_p + 1)[None, :]]
    api = hist @ decay

    delta = cfg.variance_days
    var_grid = x_std[anchors[:, None] + np.arange(-delta + 1, 1)[None, :]]
    local_var = var_grid.var(axis=1)

    rain_pct = stats.precip_percentile(record.precip[anchors])
    flood = (x_std[anchors] > stats.q90_std).astype(np.float64)

    out = np.empty((anchors.size, CONTEXT_DIM))
    out[:, 0] = np.sin(phase)
    out[:, 1] = np.cos(phase)
    out[:, 2] = (api - stats.api_mean) / stats.api_std
    out[:, 3] = (local_var - stats.localvar_mean) / stats.localvar_std
    out[:, 4] = rain_pct
    out[:, 5] = flood
    out[:, 6:] = record.static_desc[None, :]
    return out


class ContextGate(Module):
    """Two-layer tanh MLP producing convex expert weights via softmax."""

    def __init__(self, n_experts: int, hidden: int, rng: np.random.Generator):
        self.w1 = glorot(rng, CONTEXT_DIM, hidden)
        self.b1 = zeros(hidden)
        self.w2 = glorot(rng, hidden, n_experts)
        self.b2 = zeros(n_experts)
        self.n_experts = n_experts

    def forward(self, context: Tensor) -> Tensor:
        """(B, 10) context -> (B, K) weights on the open simplex."""
        hidden = ad.tanh(context @ self.w1 + self.b1)
        scores = hidden @ self.w2 + self.b2
        return ad.softmax(scores, axis=-1)


def fuse(expert_outputs: Tensor, gate_weights: Tensor) -> Tensor:
    """Convex combination of expert forecasts: (B, K, H), (B, K) -> (B, H)."""
    B, K, H = expert_outputs.shape
    if gate_weights.shape != (B, K):
        raise ValueError(
            f"fuse: gate weights {gate_weights.shape} do not match expert "
            f"outputs {expert_outputs.shape}")
    g = ad.reshape(gate_weights, (B, 1, K))
    return ad.reshape(g @ expert_outputs, (B, H))


def assemble_forecast(trend_hat: Tensor, seasonal_hat: Tensor, residual_hat: Tensor) -> Tensor:
    """Final forecast: extrapolated trend + seasonal + fused residual."""
    if trend_hat.shape != seasonal_hat.shape or trend_hat.shape != residual_hat.shape:
        raise ValueError(
            f"assemble_forecast: component shapes differ: {trend_hat.shape}, "
            f"{seasonal_hat.shape}, {residual_hat.shape}")
    return trend_hat + seasonal_hat + residual_hat


def gate_entropy(gate_weights: Tensor) -> Tensor:
    """Shannon entropy of each weight vector, with 0*log(0) := 0; (B, K) -> (B,).

    Softmax output is strictly positive, so the training path is fully
    differentiable; vectors containing exact zeros (one-hot probes) are
    evaluated without graph participation.
    """
    if np.any(gate_weights.data <= 0):
        g = gate_weights.data
        terms = np.where(g > 0, g * np.log(np.where(g > 0, g, 1.0)), 0.0)
        return Tensor(-terms.sum(axis=-1))
    return -ad.tsum(gate_weights * ad.log(gate_weights), axis=-1)
