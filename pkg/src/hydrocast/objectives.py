"""Loss terms: supervised composite (mixed base, extreme emphasis, efficiency
scores), masked reconstruction, multi-scale contrastive alignment,
augmentation consistency, variance-filtered pseudo-labeling, regularization,
and their weighted total."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import LossConfig
from .gating import gate_entropy

EPS = 1e-8


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- supervised composite -------------------------------------------------------

def loss_mse_mae(x, x_hat, alpha: float, beta: float) -> Tensor:
    """Mixed base: mean over the horizon of alpha*e^2 + beta*|e|."""
    x, x_hat = _as_tensor(x), _as_tensor(x_hat)
    e = x - x_hat
    return ad.tmean(e * e * alpha + ad.absolute(e) * beta)


def loss_extreme(x, x_hat, q90: float, eta: float) -> Tensor:
    """Squared error scaled by eta wherever the observed value exceeds the
    0.9 training quantile."""
    x, x_hat = _as_tensor(x), _as_tensor(x_hat)
    weights = np.where(x.data > q90, eta, 1.0)
    e = x - x_hat
    return ad.tmean(e * e * Tensor(weights))


def nse(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Nash-Sutcliffe efficiency of one horizon slice (1 is perfect)."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    denom = float(((x - x.mean()) ** 2).sum())
    if denom < EPS:
        return float("nan")
    return 1.0 - float(((x - x_hat) ** 2).sum()) / denom


def kge(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Kling-Gupta efficiency: 1 minus the distance of (correlation,
    variability ratio, bias ratio) from (1, 1, 1)."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    sx, sxh = x.std(), x_hat.std()
    mx = x.mean()
    if sx < EPS or sxh < EPS or abs(mx) < EPS:
        return float("nan")
    r = float(np.corrcoef(x, x_hat)[0, 1])
    alpha_r = float(sxh / sx)
    beta_r = float(x_hat.mean() / mx)
    return 1.0 - float(np.sqrt((r - 1) ** 2 + (alpha_r - 1) ** 2 + (beta_r - 1) ** 2))


def nse_loss_batch(x: np.ndarray, x_hat: Tensor) -> tuple[Tensor | float, int]:
    """Mean 1 - NSE over windows with enough variance; returns the loss and
    the count of skipped (near-constant truth) windows."""
    x = np.asarray(x, dtype=np.float64)
    denom = ((x - x.mean(axis=1, keepdims=True)) ** 2).sum(axis=1)
    valid = denom >= EPS
    skipped = int((~valid).sum())
    if not valid.any():
        return 0.0, skipped
    e = Tensor(x) - x_hat
    num = ad.tsum(e * e, axis=1)
    ratio = ad.take_rows(num, np.nonzero(valid)[0]) / Tensor(denom[valid])
    return ad.tmean(ratio), skipped


def kge_loss_batch(x: np.ndarray, x_hat: Tensor) -> tuple[Tensor | float, int]:
    """Mean 1 - KGE over windows where truth and forecast are non-degenerate."""
    x = np.asarray(x, dtype=np.float64)
    H = x.shape[1]
    mx = x.mean(axis=1)
    sx = x.std(axis=1)
    var_hat = x_hat.data.var(axis=1)
    valid = (sx >= EPS) & (np.abs(mx) >= EPS) & (var_hat >= EPS * EPS)
    skipped = int((~valid).sum())
    if not valid.any():
        return 0.0, skipped
    idx = np.nonzero(valid)[0]
    xh = ad.take_rows(x_hat, idx)
    xv = x[idx]
    mxh = ad.tmean(xh, axis=1, keepdims=True)
    centered = xh - mxh
    s_hat = ad.sqrt(ad.tsum(centered * centered, axis=1) / H)
    cx = Tensor(xv - xv.mean(axis=1, keepdims=True))
    cov = ad.tsum(centered * cx, axis=1) / H
    r = cov / (s_hat * Tensor(sx[idx]))
    alpha_r = s_hat / Tensor(sx[idx])
    beta_r = ad.reshape(mxh, (len(idx),)) / Tensor(mx[idx])
    one = Tensor(np.ones(len(idx)))
    dist = ad.sqrt((r - one) * (r - one) + (alpha_r - one) * (alpha_r - one)
                   + (beta_r - one) * (beta_r - one))
    return ad.tmean(dist), skipped


def loss_supervised(x: np.ndarray, x_hat: Tensor, cfg: LossConfig,
                    q90: float) -> tuple[Tensor, dict]:
    """Weighted aggregate of the four supervised terms.

    Returns the scalar tensor plus a breakdown with unweighted term values
    and skipped-window counters.
    """
    base = loss_mse_mae(x, x_hat, cfg.mse_mix, cfg.mae_mix)
    ext = loss_extreme(x, x_hat, q90, cfg.extreme_multiplier)
    nse_term, nse_skipped = nse_loss_batch(np.atleast_2d(x), _ensure_2d(x_hat))
    kge_term, kge_skipped = kge_loss_batch(np.atleast_2d(x), _ensure_2d(x_hat))
    total = base * cfg.gamma_base + ext * cfg.gamma_extreme
    if isinstance(nse_term, Tensor):
        total = total + nse_term * cfg.gamma_nse
    if isinstance(kge_term, Tensor):
        total = total + kge_term * cfg.gamma_kge
    detail = {
        "mse_mae": float(base.data),
        "ext": float(ext.data),
        "nse": float(nse_term.data) if isinstance(nse_term, Tensor) else 0.0,
        "kge": float(kge_term.data) if isinstance(kge_term, Tensor) else 0.0,
        "nse_skipped": nse_skipped,
        "kge_skipped": kge_skipped,
    }
    return total, detail


def _ensure_2d(x_hat: Tensor) -> Tensor:
    return x_hat if x_hat.ndim == 2 else ad.reshape(x_hat, (1, x_hat.shape[0]))


# -- masked reconstruction -------------------------------------------------------

def sample_mask_matrix(batch: int, length: int, p: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Per-window Bernoulli(p) masks; empty rows redraw once, then fall back
    to a single uniform index so every row masks something."""
    mask = rng.random((batch, length)) < p
    empty = ~mask.any(axis=1)
    if empty.any():
        mask[empty] = rng.random((int(empty.sum()), length)) < p
    for row in np.nonzero(~mask.any(axis=1))[0]:
        mask[row, rng.integers(0, length)] = True
    return mask


def loss_masked_reconstruction(x: np.ndarray, mask: np.ndarray,
                               recon: Tensor) -> Tensor:
    """Per-window mean squared error over the masked positions only."""
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    err = Tensor(x) - recon
    se = err * err * Tensor(mask.astype(np.float64))
    per_window = ad.tsum(se, axis=1) / Tensor(mask.sum(axis=1).astype(np.float64))
    return ad.tmean(per_window)


# -- multi-scale contrastive -------------------------------------------------------

def l2_normalize(z: Tensor) -> Tensor:
    norm = ad.sqrt(ad.tsum(z * z, axis=-1, keepdims=True) + 1e-12)
    return z / norm


def loss_contrastive(z_daily: Tensor, z_scales: dict[str, Tensor],
                     temperature: float) -> Tensor:
    """InfoNCE with daily embeddings as anchors: for each coarser scale the
    positive is the same window's embedding, negatives are the other windows
    at that scale."""
    if temperature <= 0:
        raise ValueError("loss_contrastive: temperature must be positive")
    terms = []
    for _, z_s in sorted(z_scales.items()):
        logits = (z_daily @ ad.transpose(z_s, (1, 0))) / temperature
        log_probs = ad.log_softmax(logits, axis=1)
        terms.append(-ad.tmean(ad.take_diagonal(log_probs)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / float(len(terms))


# -- augmentation and consistency ----------------------------------------------------

def augment(x: np.ndarray, rng: np.random.Generator, noise_scale: float = 0.02,
            crop_fraction: float = 0.9) -> np.ndarray:
    """Mild Gaussian noise (sigma relative to each window's std) plus a random
    contiguous crop re-interpolated back to full length."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B, L = x.shape
    out = x.copy()
    if noise_scale > 0:
        std = out.std(axis=1, keepdims=True)
        out = out + rng.normal(0.0, 1.0, size=out.shape) * std * noise_scale
    if crop_fraction < 1.0:
        m = max(2, int(round(crop_fraction * L)))
        starts = rng.integers(0, L - m + 1, size=B)
        grid = np.linspace(0.0, m - 1.0, L)
        src = np.arange(m, dtype=np.float64)
        cropped = np.empty_like(out)
        for b in range(B):
            seg = out[b, starts[b]:starts[b] + m]
            cropped[b] = np.interp(grid, src, seg)
        out = cropped
    return out if x.ndim == 2 else out[0]


def loss_consistency(x_hat_a: Tensor, x_hat_b: Tensor) -> Tensor:
    """Mean squared gap between forecasts from two augmented views."""
    d = x_hat_a - x_hat_b
    return ad.tmean(d * d)


# -- pseudo-labeling ---------------------------------------------------------------

def pseudo_label_filter(expert_outputs: np.ndarray, threshold: float
                        ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ensemble variance gate: accept (window, horizon) pairs whose
    population variance across experts is below the threshold; the pseudo
    label is the ensemble mean. Returns (accept, labels, variance)."""
    y = np.asarray(expert_outputs, dtype=np.float64)
    variance = y.var(axis=1)
    labels = y.mean(axis=1)
    return variance < threshold, labels, variance


def loss_pseudo(x_hat: Tensor, labels: np.ndarray, accept: np.ndarray) -> Tensor | float:
    """Mean squared gap between the fused forecast and the (detached) pseudo
    labels over accepted pairs; 0.0 when nothing is accepted."""
    accept = np.asarray(accept, dtype=bool)
    if not accept.any():
        return 0.0
    diff = x_hat - Tensor(np.asarray(labels, dtype=np.float64))
    sel = ad.masked_select(diff, accept)
    return ad.tmean(sel * sel)


# -- regularization -----------------------------------------------------------------

def loss_regularization(gate_weights: Tensor | None, params: list[Tensor],
                        entropy_weight: float, l2_weight: float
                        ) -> tuple[Tensor | float, float, float]:
    """Gate-entropy penalty (positive weight discourages diffuse gates) plus
    squared parameter norm. Returns (term, entropy value, l2 value)."""
    term = 0.0
    ent_val = 0.0
    if gate_weights is not None and entropy_weight > 0:
        ent = ad.tmean(gate_entropy(gate_weights))
        ent_val = float(ent.data)
        term = ent * entropy_weight
    l2_val = 0.0
    if l2_weight > 0 and params:
        sq = None
        for p in params:
            s = ad.tsum(p * p)
            sq = s if sq is None else sq + s
        l2_val = float(sq.data)
        term = sq * l2_weight if isinstance(term, float) and term == 0.0 \
            else term + sq * l2_weight
    return term, ent_val, l2_val


# -- total ---------------------------------------------------------------------------

@dataclass
class LossReport:
    """Unweighted per-term values and the weighted total for one batch."""

    sup: float = 0.0
    mse_mae: float = 0.0
    ext: float = 0.0
    nse: float = 0.0
    kge: float = 0.0
    mask: float = 0.0
    ctr: float = 0.0
    cons: float = 0.0
    pl: float = 0.0
    reg: float = 0.0
    total: float = 0.0
    nse_skipped: int = 0
    kge_skipped: int = 0
    pl_accept_fraction: float = 0.0
    pl_threshold: float = 0.0

    def to_json_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def loss_total(terms: dict, cfg: LossConfig) -> tuple[Tensor | float, LossReport]:
    """Weighted sum of the six loss groups; the report keeps unweighted values."""
    weights = {
        "sup": cfg.sup, "mask": cfg.mask, "ctr": cfg.contrastive,
        "cons": cfg.consistency, "pl": cfg.pseudo, "reg": cfg.reg,
    }
    total = None
    report = LossReport()
    for name, w in weights.items():
        term = terms.get(name, 0.0)
        value = float(term.data) if isinstance(term, Tensor) else float(term)
        setattr(report, name, value)
        if w == 0.0 or not isinstance(term, Tensor):
            continue
        contrib = term * w
        total = contrib if total is None else total + contrib
    if total is None:
        total = 0.0
    report.total = float(total.data) if isinstance(total, Tensor) else float(total)
    for extra in ("mse_mae", "ext", "nse", "kge", "nse_skipped", "kge_skipped",
                  "pl_accept_fraction", "pl_threshold"):
        if extra in terms:
            setattr(report, extra, terms[extra])
    return total, report
