"""Optimization loop: paired labeled/unlabeled batches, the full multi-task
objective, AdamW with decoupled weight decay, gradient clipping, a pseudo-label
variance-threshold curriculum, and early stopping on validation loss."""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from .autodiff import Tensor, no_grad
from .config import RunConfig, TrainConfig
from .data import (DatasetStats, SeriesRecord, SplitSpec, WindowPlan,
                   aggregate_scales, generate_synthetic)
from .model import ForecastModel


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


# -- optimizer -----------------------------------------------------------------

class AdamW:
    """Adam with bias-corrected moments and decoupled weight decay."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0, no_decay: set[str] | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.no_decay = no_decay or set()
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params:
            g = p.grad if p.grad is not None else 0.0
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            if self.weight_decay and name not in self.no_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step_count": np.asarray(float(self.step_count))}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays["step_count"])
        for name in self.m:
            self.m[name] = np.asarray(arrays[f"m.{name}"], dtype=np.float64).copy()
            self.v[name] = np.asarray(arrays[f"v.{name}"], dtype=np.float64).copy()


def clip_gradients(params: list[tuple[str, Tensor]], max_norm: float) -> float:
    """Scale all gradients so their global norm stays below max_norm."""
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# -- curriculum -------------------------------------------------------------------

def curriculum_percentile(epoch: int, cfg: TrainConfig) -> float:
    """Pseudo-label variance-threshold percentile: linear ramp from the start
    to the end value over the configured epochs, flat afterwards."""
    if cfg.curriculum_epochs <= 0:
        return cfg.curriculum_end
    frac = min(epoch / cfg.curriculum_epochs, 1.0)
    return cfg.curriculum_start + (cfg.curriculum_end - cfg.curriculum_start) * frac


# -- batches -----------------------------------------------------------------------

def _batches(anchors: np.ndarray, batch_size: int):
    for i in range(0, len(anchors), batch_size):
        yield anchors[i:i + batch_size]


class _UnlabeledStream:
    """Cycles unlabeled anchors, reshuffling on exhaustion."""

    def __init__(self, anchors: np.ndarray, rng: np.random.Generator):
        self.anchors = anchors
        self.rng = rng
        self._queue = rng.permutation(anchors) if len(anchors) else anchors

    def take(self, n: int) -> np.ndarray:
        if len(self.anchors) == 0:
            return self.anchors
        while len(self._queue) < n:
            self._queue = np.concatenate(
                [self._queue, self.rng.permutation(self.anchors)])
        out, self._queue = self._queue[:n], self._queue[n:]
        return out


# -- loss evaluation ----------------------------------------------------------------

def _labeled_terms(model: ForecastModel, plan: WindowPlan, anchors: np.ndarray,
                   cfg: RunConfig) -> tuple[dict, Tensor]:
    x, u = plan.gather_inputs(anchors)
    ctx = plan.gather_context(anchors)
    targets = plan.gather_targets(anchors)
    out = model.forward(x, u, ctx, anchors)
    terms = _supervised_terms(model, out.forecast, out.gate, targets, cfg, plan)
    return terms, out.forecast


def _supervised_terms(model: ForecastModel, forecast: Tensor, gate,
                      targets: np.ndarray, cfg: RunConfig,
                      plan: WindowPlan) -> dict:
    sup, detail = obj.loss_supervised(targets, forecast, cfg.losses,
                                      plan.stats.q90_std)
    reg, ent_val, l2_val = obj.loss_regularization(
        gate, model.penalized_parameters(),
        cfg.losses.entropy_weight, cfg.losses.l2_weight)
    return {"sup": sup, "reg": reg, **detail,
            "gate_entropy": ent_val, "l2": l2_val}


def _step_terms(model: ForecastModel, plan: WindowPlan,
                labeled_anchors: np.ndarray, unlabeled_anchors: np.ndarray,
                cfg: RunConfig, q_percentile: float,
                rng: np.random.Generator) -> dict:
    """All loss terms for one iteration: the supervised pair plus, when an
    unlabeled batch is available, pseudo-labeling on the clean windows,
    consistency across two augmented views, masked reconstruction and the
    multi-scale contrastive alignment."""
    lcfg = cfg.losses
    terms, _ = _labeled_terms(model, plan, labeled_anchors, cfg)
    if len(unlabeled_anchors) == 0:
        return terms

    xu, uu = plan.gather_inputs(unlabeled_anchors)
    ctxu = plan.gather_context(unlabeled_anchors)

    if lcfg.pseudo > 0:
        clean = model.forward(xu, uu, ctxu, unlabeled_anchors)
        stack_vals = clean.expert_stack.data
        if clean.trend_hat is not None:
            base = clean.trend_hat.data + clean.seasonal_hat.data
            stack_vals = stack_vals + base[:, None, :]
        variances = stack_vals.var(axis=1)
        threshold = float(np.percentile(variances, q_percentile))
        accept, labels, _ = obj.pseudo_label_filter(stack_vals, threshold)
        terms["pl"] = obj.loss_pseudo(clean.forecast, labels, accept)
        terms["pl_accept_fraction"] = float(accept.mean())
        terms["pl_threshold"] = threshold

    if lcfg.consistency > 0:
        xa = obj.augment(xu, rng, lcfg.noise_scale, lcfg.crop_fraction)
        xb = obj.augment(xu, rng, lcfg.noise_scale, lcfg.crop_fraction)
        fa = model.forward(xa, uu, ctxu, unlabeled_anchors).forecast
        fb = model.forward(xb, uu, ctxu, unlabeled_anchors).forecast
        terms["cons"] = obj.loss_consistency(fa, fb)

    if lcfg.mask > 0:
        mask = obj.sample_mask_matrix(xu.shape[0], xu.shape[1],
                                      lcfg.mask_fraction, rng)
        recon = model.reconstruct_masked(xu, mask)
        terms["mask"] = obj.loss_masked_reconstruction(xu, mask, recon)

    if lcfg.contrastive > 0:
        views = aggregate_scales(xu)
        z_daily = model.embed_scale(views["daily"])
        z_scales = {name: model.embed_scale(views[name])
                    for name in ("weekly", "monthly")}
        terms["ctr"] = obj.loss_contrastive(z_daily, z_scales,
                                            lcfg.contrastive_temperature)
    return terms


def validation_loss(model: ForecastModel, plan: WindowPlan, cfg: RunConfig,
                    split: str = "val", chunk: int = 256) -> float:
    """Mean supervised loss over a split's labeled windows, without a graph."""
    anchors = plan.labeled[split]
    if len(anchors) == 0:
        return float("nan")
    total, n = 0.0, 0
    with no_grad():
        for batch in _batches(anchors, chunk):
            x, u = plan.gather_inputs(batch)
            ctx = plan.gather_context(batch)
            targets = plan.gather_targets(batch)
            out = model.forward(x, u, ctx, batch)
            sup, _ = obj.loss_supervised(targets, out.forecast, cfg.losses,
                                         plan.stats.q90_std)
            total += float(sup.data) * len(batch)
            n += len(batch)
    return total / n


# -- the loop -----------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    report: obj.LossReport
    val_loss: float
    q_percentile: float

    def to_json_line(self) -> str:
        payload = json.loads(self.report.to_json_line())
        payload.update(epoch=self.epoch, val_loss=self.val_loss,
                       q_percentile=self.q_percentile)
        return json.dumps(payload, sort_keys=True)


@dataclass
class TrainResult:
    model: ForecastModel
    stats: DatasetStats
    split: SplitSpec
    plan: WindowPlan
    history: list[EpochRecord]
    best_epoch: int
    best_val: float
    config: RunConfig
    frozen_hash_before: str | None
    frozen_hash_after: str | None
    record: SeriesRecord = field(repr=False, default=None)
    optimizer_arrays: dict = field(default_factory=dict, repr=False)


def train_epoch(model: ForecastModel, plan: WindowPlan, cfg: RunConfig,
                optimizer: AdamW, epoch: int, seed: int) -> obj.LossReport:
    """One pass over the labeled training windows with a paired unlabeled
    batch per iteration; returns the mean per-iteration loss report."""
    tcfg = cfg.training
    ss = np.random.SeedSequence([seed, epoch, 0x5EED])
    r_shuffle, r_unlab, r_aug = [np.random.default_rng(s) for s in ss.spawn(3)]

    labeled = r_shuffle.permutation(plan.labeled["train"])
    if len(labeled) == 0:
        raise ValueError("train split has no labeled windows")
    stream = _UnlabeledStream(plan.unlabeled["train"], r_unlab)
    q_pct = curriculum_percentile(epoch, tcfg)
    use_unlabeled = (len(plan.unlabeled["train"]) > 0 and
                     (cfg.losses.mask > 0 or cfg.losses.contrastive > 0 or
                      cfg.losses.consistency > 0 or cfg.losses.pseudo > 0))

    reports: list[obj.LossReport] = []
    for batch in _batches(labeled, tcfg.batch_size):
        unlabeled_batch = stream.take(len(batch)) if use_unlabeled else \
            np.zeros(0, dtype=np.int64)
        terms = _step_terms(model, plan, batch, unlabeled_batch, cfg,
                            q_pct, r_aug)
        total, report = obj.loss_total(terms, cfg.losses)
        if not np.isfinite(report.total):
            offender = [name for name in ("sup", "mask", "ctr", "cons", "pl", "reg")
                        if not np.isfinite(getattr(report, name))]
            raise NumericError(
                f"non-finite loss at epoch {epoch}: term(s) {offender or ['total']}")
        if isinstance(total, Tensor):
            total.backward()
            clip_gradients(optimizer.params, tcfg.clip_norm)
            optimizer.step()
            model.seasonal.clamp_period()
            optimizer.zero_grad()
        reports.append(report)

    return _mean_report(reports)


def _mean_report(reports: list[obj.LossReport]) -> obj.LossReport:
    out = obj.LossReport()
    n = max(len(reports), 1)
    for name in ("sup", "mse_mae", "ext", "nse", "kge", "mask", "ctr", "cons",
                 "pl", "reg", "total", "pl_accept_fraction", "pl_threshold"):
        setattr(out, name, sum(getattr(r, name) for r in reports) / n)
    out.nse_skipped = sum(r.nse_skipped for r in reports)
    out.kge_skipped = sum(r.kge_skipped for r in reports)
    return out


def fit(cfg: RunConfig, record: SeriesRecord | None = None,
        max_epochs: int | None = None, quiet: bool = True) -> TrainResult:
    """Train per the config: generate or accept a series, split it
    chronologically, and optimize with early stopping on validation
    supervised loss. The best-epoch parameters are restored at the end."""
    cfg.validate()
    if record is None:
        record = generate_synthetic(cfg.synthetic)
    split = SplitSpec.from_fractions(len(record), cfg.data.train_fraction,
                                     cfg.data.val_fraction)
    stats = DatasetStats.fit(record, split, cfg.data)
    plan = WindowPlan(record, split, cfg.data, stats)
    model = ForecastModel(cfg.data.window, cfg.data.horizon, cfg.model)
    frozen_before = model.frozen_hash()

    from .model import NO_DECAY_NAME
    optimizer = AdamW(model.trainable_parameters(), lr=cfg.training.learning_rate,
                      beta1=cfg.training.beta1, beta2=cfg.training.beta2,
                      eps=cfg.training.opt_eps,
                      weight_decay=cfg.training.weight_decay,
                      no_decay={NO_DECAY_NAME})

    epochs = cfg.training.epochs if max_epochs is None else min(
        cfg.training.epochs, max_epochs)
    history: list[EpochRecord] = []
    best_val = np.inf
    best_epoch = -1
    best_params: dict[str, np.ndarray] | None = None
    best_opt: dict[str, np.ndarray] | None = None
    bad_epochs = 0

    for epoch in range(epochs):
        report = train_epoch(model, plan, cfg, optimizer, epoch,
                             cfg.training.seed)
        val = validation_loss(model, plan, cfg)
        history.append(EpochRecord(epoch=epoch, report=report, val_loss=val,
                                   q_percentile=curriculum_percentile(epoch, cfg.training)))
        if not quiet:
            print(f"epoch {epoch:3d}  train {report.total:.5f}  val {val:.5f}")
        if np.isfinite(val) and val < best_val:
            best_val = val
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.state_arrays().items()}
            best_opt = {k: v.copy() for k, v in optimizer.state_arrays().items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > cfg.training.patience:
                break

    if best_params is not None:
        model.load_state_arrays(best_params)
        optimizer.load_state_arrays(best_opt)
    return TrainResult(model=model, stats=stats, split=split, plan=plan,
                       history=history, best_epoch=best_epoch, best_val=best_val,
                       config=cfg, frozen_hash_before=frozen_before,
                       frozen_hash_after=model.frozen_hash(), record=record,
                       optimizer_arrays=optimizer.state_arrays())


# -- checkpoints ------------------------------------------------------------------

_MAGIC = b"HYDROCAST1\n"


def save_checkpoint(path: str, result: TrainResult) -> None:
    """Deterministic binary dump: parameters, optimizer state, dataset
    statistics, config text and hash. Identical runs produce identical bytes."""
    arrays: dict[str, np.ndarray] = {}
    for name, arr in result.model.state_arrays().items():
        arrays[f"model.{name}"] = arr
    for name, arr in result.stats.to_arrays().items():
        arrays[f"stats.{name}"] = arr
    for name, arr in result.optimizer_arrays.items():
        arrays[f"opt.{name}"] = arr

    meta = {
        "version": 1,
        "config_hash": result.config.hash(),
        "config_ini": result.config.to_ini(),
        "best_epoch": result.best_epoch,
        "best_val": result.best_val,
        "frozen_hash": result.frozen_hash_after,
        "seed": result.config.training.seed,
        "split": [result.split.train_end, result.split.val_end, result.split.n_days],
        "arrays": [],
    }
    names = sorted(arrays)
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        meta["arrays"].append({"name": name, "shape": list(arr.shape),
                               "offset": offset})
        offset += arr.nbytes
    header = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype=np.float64).tobytes())


def load_checkpoint(path: str) -> tuple[ForecastModel, DatasetStats, RunConfig, dict]:
    """Rebuild the model, statistics and config from a checkpoint file."""
    from .config import parse_config
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a hydrocast checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(hlen).decode())
        blob = fh.read()
    arrays = {}
    entries = meta["arrays"]
    for i, entry in enumerate(entries):
        start = entry["offset"]
        end = entries[i + 1]["offset"] if i + 1 < len(entries) else len(blob)
        arr = np.frombuffer(blob[start:end], dtype=np.float64).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()

    cfg = parse_config(meta["config_ini"])
    model = ForecastModel(cfg.data.window, cfg.data.horizon, cfg.model)
    model.load_state_arrays({k[len("model."):]: v for k, v in arrays.items()
                             if k.startswith("model.")})
    stats = DatasetStats.from_arrays({k[len("stats."):]: v for k, v in arrays.items()
                                      if k.startswith("stats.")})
    return model, stats, cfg, meta


def write_history(path: str, history: list[EpochRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(rec.to_json_line() + "\n")
