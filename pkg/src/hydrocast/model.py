"""The full forecaster: decomposition feeding a gated expert ensemble, with
an optional frozen-encoder/adapter path and the self-supervised heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adapter import EMBED_DIM, FrozenEncoder, ResidualAdapter
from .autodiff import Tensor
from .config import ModelConfig
from .decomposition import FourierSeasonal, LinearTrend, decompose
from .experts import EXPERT_NAMES, ExpertInput, build_experts, run_all_experts
from .gating import ContextGate, assemble_forecast, fuse
from .layers import Module, glorot, zeros
from .objectives import l2_normalize

NO_DECAY_NAME = "seasonal.period"


@dataclass
class ForwardOutput:
    """Everything one batched forward produces."""

    forecast: Tensor                 # (B, H)
    trend_hat: Tensor | None         # (B, H)
    seasonal_hat: Tensor | None      # (B, H)
    residual_hat: Tensor | None      # (B, H) fused expert forecast
    expert_stack: Tensor | None      # (B, K, H)
    gate: Tensor | None              # (B, K)
    trend: Tensor | None             # (B, L) in-window curves
    seasonal: Tensor | None
    residual: Tensor | None


class ForecastModel(Module):
    """Config-driven assembly of all trainable components.

    Ablation switches: ``use_decomposition`` (off: experts see the raw
    window and the forecast is the fused output alone), ``gating``
    ("uniform" replaces the context gate by constant 1/K weights),
    ``active_expert`` (single-expert variant; the other experts are skipped
    and receive no gradient), ``residual_experts_enabled`` (off: the
    forecast is the trend+seasonal extrapolation only),
    ``foundation_enabled`` (frozen encoder + adapter concatenated into every
    expert's final features).
    """

    def __init__(self, window: int, horizon: int, cfg: ModelConfig):
        self.window = window
        self.horizon = horizon
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)

        self.trend = LinearTrend(window, rng)
        self.seasonal = FourierSeasonal(window, cfg, rng)

        self.expert_names = ((cfg.active_expert,) if cfg.active_expert
                             else EXPERT_NAMES)
        foundation_dim = EMBED_DIM if cfg.foundation_enabled else 0
        if cfg.residual_experts_enabled:
            self._experts = ExpertBank(window, horizon, cfg.covariates_enabled,
                                       foundation_dim, rng, self.expert_names)
            if cfg.gating == "softmax" and not cfg.active_expert:
                self.gate = ContextGate(len(self.expert_names), cfg.gate_hidden, rng)
        if cfg.foundation_enabled:
            self.frozen_encoder = FrozenEncoder(window, cfg.foundation_seed)
            self.adapter = ResidualAdapter(self.frozen_encoder, rng)

        # self-supervised heads over the spectral encoder's shared features
        feat_dim = self.seasonal.encoder.out_dim
        self.mask_token = zeros()
        self.recon_w = glorot(rng, feat_dim, window)
        self.recon_b = zeros(window)
        self.project_w = glorot(rng, feat_dim, cfg.embed_dim)
        self.project_b = zeros(cfg.embed_dim)

    # -- main forward -----------------------------------------------------

    def forward(self, x: np.ndarray, u: np.ndarray, context: np.ndarray,
                t_anchor: np.ndarray) -> ForwardOutput:
        """Batched forecast: x (B, L) standardized runoff, u (B, L, C)
        covariates, context (B, 10), t_anchor absolute day indices."""
        B = x.shape[0]
        x_t = Tensor(x)
        cfg = self.cfg

        if cfg.use_decomposition:
            dec = decompose(x_t, t_anchor, self.trend, self.seasonal, self.horizon)
            r_window = dec.residual
            trend_hat, seasonal_hat = dec.trend_hat, dec.seasonal_hat
            trend_curve, seasonal_curve, residual_curve = dec.trend, dec.seasonal, dec.residual
        else:
            r_window = x_t
            trend_hat = seasonal_hat = None
            trend_curve = seasonal_curve = residual_curve = None

        if not cfg.residual_experts_enabled:
            if not cfg.use_decomposition:
                raise ValueError("model: residual experts and decomposition cannot both be off")
            return ForwardOutput(
                forecast=trend_hat + seasonal_hat,
                trend_hat=trend_hat, seasonal_hat=seasonal_hat,
                residual_hat=None, expert_stack=None, gate=None,
                trend=trend_curve, seasonal=seasonal_curve, residual=residual_curve)

        foundation = None
        if cfg.foundation_enabled:
            foundation = self.adapter.adapt(self.frozen_encoder.encode(x_t))

        inp = ExpertInput(
            r_window=r_window,
            u_window=Tensor(u) if cfg.covariates_enabled else None,
            foundation=foundation)
        stack = run_all_experts(self._experts.as_dict(), inp, self.expert_names)

        K = len(self.expert_names)
        if cfg.active_expert:
            gate = Tensor(np.ones((B, 1)))
        elif cfg.gating == "uniform":
            gate = Tensor(np.full((B, K), 1.0 / K))
        else:
            gate = self.gate.forward(Tensor(context))

        residual_hat = fuse(stack, gate)
        if cfg.use_decomposition:
            forecast = assemble_forecast(trend_hat, seasonal_hat, residual_hat)
        else:
            forecast = residual_hat
        return ForwardOutput(
            forecast=forecast, trend_hat=trend_hat, seasonal_hat=seasonal_hat,
            residual_hat=residual_hat, expert_stack=stack, gate=gate,
            trend=trend_curve, seasonal=seasonal_curve, residual=residual_curve)

    # -- self-supervised paths ---------------------------------------------

    def reconstruct_masked(self, x: np.ndarray, mask: np.ndarray) -> Tensor:
        """Replace masked positions by the learned token value, encode, and
        predict the full window from the pooled features."""
        keep = Tensor(x * ~mask)
        token_field = self.mask_token * Tensor(mask.astype(np.float64))
        masked_input = keep + token_field
        feats = self.seasonal.encoder.features(masked_input)
        return feats @ self.recon_w + self.recon_b

    def embed_scale(self, view: np.ndarray) -> Tensor:
        """Shared-trunk embedding of one scale view, L2-normalized."""
        feats = self.seasonal.encoder.features(Tensor(view))
        return l2_normalize(feats @ self.project_w + self.project_b)

    # -- bookkeeping --------------------------------------------------------

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def penalized_parameters(self) -> list[Tensor]:
        """Parameters under the L2 penalty and weight decay: all trainable
        ones except the seasonal base period, whose scale (~365) is physical
        and already constrained by its clamp."""
        return [p for n, p in self.trainable_parameters() if n != NO_DECAY_NAME]

    def frozen_hash(self) -> str | None:
        if self.cfg.foundation_enabled:
            return self.frozen_encoder.weights_hash()
        return None


class ExpertBank(Module):
    """Holds the expert set so parameter names stay stable and qualified."""

    def __init__(self, window, horizon, covariates, foundation_dim, rng, names):
        for name in names:
            setattr(self, name, build_experts(
                window, horizon, covariates, foundation_dim, rng, (name,))[name])
        self._names = names

    def as_dict(self):
        return {name: getattr(self, name) for name in self._names}
