"""Synthetic hydrograph generation, CSV ingestion, splitting and windowing.

All model-facing arrays are standardized with training-split statistics;
quantile grids are frozen from the training split as well, so no feature of
any window depends on data after its anchor day plus those fixed statistics.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from .config import DataConfig, SyntheticConfig


class DataError(ValueError):
    """Invalid series data (bad file, bad dates, bad values)."""


# -- record -------------------------------------------------------------------

@dataclass
class SeriesRecord:
    """One basin's aligned daily sequences plus static descriptors.

    ``labeled_mask`` is False on days whose runoff may not be used as a
    supervised target (gauge outages and the like); the values themselves
    remain present and usable as inputs.
    """

    dates: np.ndarray                 # datetime64[D], strictly consecutive
    runoff: np.ndarray                # m3/s, non-negative
    precip: np.ndarray                # mm/day
    temp: np.ndarray                  # degrees C
    static_desc: np.ndarray = field(default_factory=lambda: np.zeros(4))
    labeled_mask: np.ndarray | None = None
    components: dict[str, np.ndarray] | None = None  # synthetic ground truth

    def __post_init__(self):
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.runoff = np.asarray(self.runoff, dtype=np.float64)
        self.precip = np.asarray(self.precip, dtype=np.float64)
        self.temp = np.asarray(self.temp, dtype=np.float64)
        self.static_desc = np.asarray(self.static_desc, dtype=np.float64)
        if self.labeled_mask is None:
            self.labeled_mask = np.ones(len(self.dates), dtype=bool)
        self.labeled_mask = np.asarray(self.labeled_mask, dtype=bool)
        n = len(self.dates)
        for name in ("runoff", "precip", "temp", "labeled_mask"):
            if len(getattr(self, name)) != n:
                raise DataError(
                    f"series length mismatch: {name} has {len(getattr(self, name))} "
                    f"entries, dates has {n}")
        if self.static_desc.shape != (4,):
            raise DataError(f"static_desc must have 4 entries, got {self.static_desc.shape}")
        if n > 1:
            deltas = np.diff(self.dates).astype(int)
            bad = np.nonzero(deltas != 1)[0]
            if bad.size:
                i = int(bad[0])
                raise DataError(
                    f"dates must be consecutive days: gap after {self.dates[i]} "
                    f"(next is {self.dates[i + 1]})")
        for name in ("runoff", "precip", "temp"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                i = int(np.nonzero(~np.isfinite(arr))[0][0])
                raise DataError(f"non-finite {name} value at row {i + 1} ({self.dates[i]})")
        if np.any(self.runoff < 0):
            i = int(np.nonzero(self.runoff < 0)[0][0])
            raise DataError(f"negative runoff at row {i + 1} ({self.dates[i]})")

    def __len__(self) -> int:
        return len(self.dates)

    def day_of_year(self) -> np.ndarray:
        """0-based day within the calendar year for every record day."""
        years = self.dates.astype("datetime64[Y]")
        return (self.dates - years.astype("datetime64[D]")).astype(np.int64)


# -- synthetic generation -------------------------------------------------------

def _calendar_days(start: str, years: float) -> np.ndarray:
    d0 = date.fromisoformat(start)
    if float(years).is_integer():
        d1 = date(d0.year + int(years), d0.month, d0.day)
        n = (d1 - d0).days
    else:
        n = int(round(years * 365.25))
    return np.arange(np.datetime64(d0, "D"), np.datetime64(d0, "D") + n)


def generate_synthetic(cfg: SyntheticConfig | None = None, seed: int | None = None) -> SeriesRecord:
    """Seeded synthetic daily basin: drifting baseline, modulated seasonal
    cycle, storm-driven event pulses with exponential recession, AR(1) noise.

    With ``event_rate == 0`` and ``noise_scale == 0`` the runoff equals
    max(0, trend + seasonal) exactly. Ground-truth components are stored on
    the record, with residual defined as runoff minus trend minus seasonal.
    """
    cfg = cfg or SyntheticConfig()
    seed = cfg.seed if seed is None else seed
    ss = np.random.SeedSequence(seed)
    r_trend, r_precip, r_storm, r_noise, r_static, r_label, r_temp = \
        [np.random.default_rng(s) for s in ss.spawn(7)]

    dates = _calendar_days(cfg.start_date, cfg.years)
    n = len(dates)
    t = np.arange(n, dtype=np.float64)

    # piecewise-linear drift with a knot roughly every two years
    n_knots = max(3, int(cfg.years / 2) + 2)
    knots = np.linspace(0, n - 1, n_knots)
    knot_vals = cfg.base_level + np.cumsum(r_trend.normal(0.0, 0.8, size=n_knots))
    trend = np.interp(t, knots, knot_vals)

    # annual + semiannual harmonics; annual amplitude slowly modulated
    phase1 = r_trend.uniform(0, 2 * np.pi)
    phase2 = r_trend.uniform(0, 2 * np.pi)
    mod = 1.0 + 0.25 * np.sin(2 * np.pi * t / (7.3 * 365.25) + r_trend.uniform(0, 2 * np.pi))
    seasonal = (3.5 * mod * np.cos(2 * np.pi * t / 365.25 + phase1)
                + 1.2 * np.cos(4 * np.pi * t / 365.25 + phase2))

    # precipitation: seasonal wet-day background plus storm bursts
    season01 = 0.5 + 0.5 * np.sin(2 * np.pi * t / 365.25 + phase1 + np.pi / 3)
    wet_prob = 0.15 + 0.35 * season01
    wet = r_precip.random(n) < wet_prob
    precip = np.where(wet, r_precip.gamma(0.9, 6.0, size=n), 0.0)

    storm_prob = cfg.event_rate * (0.006 + 0.035 * season01)
    storms = r_storm.random(n) < storm_prob
    storm_precip = np.zeros(n)
    storm_precip[storms] = r_storm.gamma(2.0, 16.0, size=int(storms.sum()))
    precip = precip + storm_precip

    # storm pulses routed through an exponential recession kernel
    kernel = 0.35 * np.exp(-np.arange(40) / 6.0)
    events = np.convolve(storm_precip, kernel)[:n] * 0.25

    noise = np.zeros(n)
    sigma = 0.35 * cfg.noise_scale
    if sigma > 0:
        eps = r_noise.normal(0.0, sigma, size=n)
        phi = 0.7
        for i in range(1, n):
            noise[i] = phi * noise[i - 1] + eps[i]
        noise[0] = eps[0]

    runoff = np.maximum(0.0, trend + seasonal + events + noise)
    residual = runoff - trend - seasonal

    temp = 16.0 + 8.0 * np.cos(2 * np.pi * (t - 200.0) / 365.25) + r_temp.normal(0, 1.5, size=n)

    labeled = np.ones(n, dtype=bool)
    target = int(round(cfg.unlabeled_fraction * n))
    guard = 0
    while target > 0 and (~labeled).sum() < target and guard < 10_000:
        length = int(r_label.integers(30, 61))
        start = int(r_label.integers(0, max(1, n - length)))
        labeled[start:start + length] = False
        guard += 1

    static = r_static.normal(0.0, 1.0, size=4)

    return SeriesRecord(
        dates=dates, runoff=runoff, precip=precip, temp=temp,
        static_desc=static, labeled_mask=labeled,
        components={"trend": trend, "seasonal": seasonal, "residual": residual},
    )


# -- CSV input/output ------------------------------------------------------------

_HEADER = ["date", "runoff", "precip", "temp"]


def load_csv(path: str) -> SeriesRecord:
    """Read a daily series; header date,runoff,precip,temp[,labeled,...].

    Extra trailing columns are reserved and ignored. Errors carry 1-based
    data row numbers.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip().lower() for h in header]
        if header[:4] != _HEADER:
            raise DataError(
                f"{path}: header must start with {','.join(_HEADER)}, got {','.join(header)}")
        has_labeled = len(header) > 4 and header[4] == "labeled"

        dates, runoff, precip, temp, labeled = [], [], [], [], []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 4:
                raise DataError(f"{path}: row {row_no}: expected at least 4 columns")
            try:
                d = np.datetime64(date.fromisoformat(row[0].strip()), "D")
            except ValueError:
                raise DataError(f"{path}: row {row_no}: bad ISO date {row[0]!r}") from None
            vals = []
            for col, name in zip(row[1:4], _HEADER[1:]):
                try:
                    v = float(col)
                except ValueError:
                    raise DataError(
                        f"{path}: row {row_no}: bad {name} value {col!r}") from None
                if math.isnan(v):
                    raise DataError(f"{path}: row {row_no}: NaN {name}")
                vals.append(v)
            if vals[0] < 0:
                raise DataError(f"{path}: row {row_no}: negative runoff {vals[0]}")
            if has_labeled:
                flag = row[4].strip()
                if flag not in ("0", "1"):
                    raise DataError(
                        f"{path}: row {row_no}: labeled column must be 0 or 1, got {flag!r}")
                labeled.append(flag == "1")
            dates.append(d)
            runoff.append(vals[0])
            precip.append(vals[1])
            temp.append(vals[2])

    if not dates:
        raise DataError(f"{path}: no data rows")
    darr = np.array(dates, dtype="datetime64[D]")
    deltas = np.diff(darr).astype(int)
    dup = np.nonzero(deltas == 0)[0]
    if dup.size:
        raise DataError(f"{path}: duplicated date {darr[int(dup[0])]}")
    back = np.nonzero(deltas < 0)[0]
    if back.size:
        i = int(back[0])
        raise DataError(f"{path}: dates not increasing at row {i + 2} ({darr[i + 1]})")
    gap = np.nonzero(deltas > 1)[0]
    if gap.size:
        i = int(gap[0])
        raise DataError(
            f"{path}: missing days between {darr[i]} and {darr[i + 1]}")
    return SeriesRecord(
        dates=darr, runoff=np.array(runoff), precip=np.array(precip),
        temp=np.array(temp),
        labeled_mask=np.array(labeled, dtype=bool) if has_labeled else None,
    )


def write_csv(record: SeriesRecord, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_HEADER + ["labeled"])
        for i in range(len(record)):
            writer.writerow([
                str(record.dates[i]),
                repr(float(record.runoff[i])),
                repr(float(record.precip[i])),
                repr(float(record.temp[i])),
                "1" if record.labeled_mask[i] else "0",
            ])


def write_components_csv(record: SeriesRecord, path: str,
                         trend=None, seasonal=None) -> None:
    """Per-day observed/trend/seasonal/residual dump (ground truth or learned)."""
    trend = record.components["trend"] if trend is None else trend
    seasonal = record.components["seasonal"] if seasonal is None else seasonal
    residual = record.runoff - trend - seasonal
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "observed", "trend", "seasonal", "residual"])
        for i in range(len(record)):
            writer.writerow([str(record.dates[i]), f"{record.runoff[i]:.8g}",
                             f"{trend[i]:.8g}", f"{seasonal[i]:.8g}", f"{residual[i]:.8g}"])


# -- chronological splits -----------------------------------------------------------

@dataclass
class SplitSpec:
    """Chronological train/validation/test boundaries (end-exclusive indices)."""

    train_end: int
    val_end: int
    n_days: int

    def __post_init__(self):
        if not 0 < self.train_end < self.val_end < self.n_days:
            raise DataError(
                f"split boundaries must be strictly increasing inside the record: "
                f"0 < {self.train_end} < {self.val_end} < {self.n_days}")

    @classmethod
    def from_fractions(cls, n_days: int, train_fraction: float, val_fraction: float) -> "SplitSpec":
        te = int(round(n_days * train_fraction))
        ve = int(round(n_days * (train_fraction + val_fraction)))
        return cls(train_end=te, val_end=ve, n_days=n_days)

    def bounds(self, split: str) -> tuple[int, int]:
        return {
            "train": (0, self.train_end),
            "val": (self.train_end, self.val_end),
            "test": (self.val_end, self.n_days),
        }[split]


# -- training-split statistics -------------------------------------------------------

@dataclass
class DatasetStats:
    """Frozen training-split statistics: z-scoring constants, the 0.9 runoff
    quantile, the precipitation percentile grid, and gate-feature scales."""

    runoff_mean: float
    runoff_std: float
    precip_mean: float
    precip_std: float
    temp_mean: float
    temp_std: float
    q90_std: float
    precip_sorted: np.ndarray
    api_mean: float
    api_std: float
    localvar_mean: float
    localvar_std: float

    @classmethod
    def fit(cls, record: SeriesRecord, split: SplitSpec, data_cfg: DataConfig) -> "DatasetStats":
        lo, hi = split.bounds("train")
        run = record.runoff[lo:hi]
        pre = record.precip[lo:hi]
        tmp = record.temp[lo:hi]
        r_mean, r_std = float(run.mean()), max(float(run.std()), 1e-8)
        p_mean, p_std = float(pre.mean()), max(float(pre.std()), 1e-8)
        t_mean, t_std = float(tmp.mean()), max(float(tmp.std()), 1e-8)
        q90 = (float(np.quantile(run, 0.9)) - r_mean) / r_std

        x_std = (record.runoff - r_mean) / r_std
        n_p, delta = data_cfg.api_days, data_cfg.variance_days
        first = max(n_p, delta)
        apis, lvars = [], []
        decay = data_cfg.api_decay ** np.arange(n_p)
        for t in range(max(first, lo), hi):
            apis.append(float(record.precip[t - n_p:t][::-1] @ decay))
            lvars.append(float(x_std[t - delta + 1:t + 1].var()))
        apis = np.asarray(apis) if apis else np.zeros(1)
        lvars = np.asarray(lvars) if lvars else np.zeros(1)
        return cls(
            runoff_mean=r_mean, runoff_std=r_std,
            precip_mean=p_mean, precip_std=p_std,
            temp_mean=t_mean, temp_std=t_std,
            q90_std=q90, precip_sorted=np.sort(pre),
            api_mean=float(apis.mean()), api_std=max(float(apis.std()), 1e-8),
            localvar_mean=float(lvars.mean()), localvar_std=max(float(lvars.std()), 1e-8),
        )

    def standardize_runoff(self, x: np.ndarray) -> np.ndarray:
        return (x - self.runoff_mean) / self.runoff_std

    def destandardize_runoff(self, x: np.ndarray) -> np.ndarray:
        return x * self.runoff_std + self.runoff_mean

    def covariate_matrix(self, record: SeriesRecord) -> np.ndarray:
        """(n_days, 2) z-scored precipitation and temperature."""
        return np.stack([
            (record.precip - self.precip_mean) / self.precip_std,
            (record.temp - self.temp_mean) / self.temp_std,
        ], axis=1)

    def precip_percentile(self, values: np.ndarray) -> np.ndarray:
        """Empirical CDF of raw precipitation against the training grid."""
        ranks = np.searchsorted(self.precip_sorted, values, side="right")
        return ranks / len(self.precip_sorted)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for f_ in ("runoff_mean", "runoff_std", "precip_mean", "precip_std",
                   "temp_mean", "temp_std", "q90_std", "api_mean", "api_std",
                   "localvar_mean", "localvar_std"):
            out[f_] = np.asarray(getattr(self, f_), dtype=np.float64)
        out["precip_sorted"] = self.precip_sorted
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "DatasetStats":
        kwargs = {k: (v if k == "precip_sorted" else float(v)) for k, v in arrays.items()}
        return cls(**kwargs)


# -- windowing ---------------------------------------------------------------------

@dataclass
class WindowSample:
    """One training or evaluation instance anchored at day t."""

    x_window: np.ndarray           # (L,) standardized runoff
    u_window: np.ndarray           # (L, 2) standardized covariates
    target: np.ndarray | None      # (H,) standardized, None when unlabeled
    t_anchor: int
    context: np.ndarray            # (10,) gate input features


class WindowPlan:
    """All valid window anchors of one record per split, with batched access.

    A window anchored at ``t`` covers inputs [t-L+1, t] and targets
    [t+1, t+H]; both ranges stay inside the anchor's split. A window is
    labeled iff every target day carries a true labeled flag.
    """

    def __init__(self, record: SeriesRecord, split: SplitSpec,
                 data_cfg: DataConfig, stats: DatasetStats | None = None):
        self.record = record
        self.split = split
        self.cfg = data_cfg
        self.stats = stats or DatasetStats.fit(record, split, data_cfg)
        self.x_std = self.stats.standardize_runoff(record.runoff)
        self.u_std = self.stats.covariate_matrix(record)
        L, H = data_cfg.window, data_cfg.horizon
        min_history = max(data_cfg.api_days, data_cfg.variance_days, L - 1)

        self.anchors: dict[str, np.ndarray] = {}
        self.labeled: dict[str, np.ndarray] = {}
        self.unlabeled: dict[str, np.ndarray] = {}
        for name in ("train", "val", "test"):
            lo, hi = split.bounds(name)
            first = max(lo + L - 1, min_history)
            last = hi - 1 - H
            anchors = np.arange(first, last + 1, dtype=np.int64)
            self.anchors[name] = anchors
            if anchors.size:
                tgt = anchors[:, None] + np.arange(1, H + 1)[None, :]
                lab = record.labeled_mask[tgt].all(axis=1)
            else:
                lab = np.zeros(0, dtype=bool)
            self.labeled[name] = anchors[lab]
            self.unlabeled[name] = anchors[~lab]

        self._context_cache: dict[str, np.ndarray] = {}

    def gather_inputs(self, anchors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        L = self.cfg.window
        grid = anchors[:, None] + np.arange(-L + 1, 1)[None, :]
        return self.x_std[grid], self.u_std[grid]

    def gather_targets(self, anchors: np.ndarray) -> np.ndarray:
        H = self.cfg.horizon
        grid = anchors[:, None] + np.arange(1, H + 1)[None, :]
        return self.x_std[grid]

    def gather_context(self, anchors: np.ndarray) -> np.ndarray:
        from .gating import context_matrix
        if "all" not in self._context_cache:
            every = np.concatenate([self.anchors[s] for s in ("train", "val", "test")])
            if every.size:
                full = np.full((self.split.n_days, 10), np.nan)
                full[every] = context_matrix(self.record, every, self.stats,
                                             self.cfg, self.x_std)
                self._context_cache["all"] = full
            else:
                self._context_cache["all"] = np.zeros((self.split.n_days, 10))
        cached = self._context_cache["all"]
        if anchors.size and np.isnan(cached[anchors]).any():
            return context_matrix(self.record, anchors, self.stats, self.cfg,
                                  self.x_std)
        return cached[anchors]

    def sample(self, t_anchor: int, labeled: bool = True) -> WindowSample:
        anchors = np.asarray([t_anchor])
        x, u = self.gather_inputs(anchors)
        ctx = self.gather_context(anchors)
        target = self.gather_targets(anchors)[0] if labeled else None
        return WindowSample(x_window=x[0], u_window=u[0], target=target,
                            t_anchor=t_anchor, context=ctx[0])


def make_windows(record: SeriesRecord, split: SplitSpec, data_cfg: DataConfig,
                 stats: DatasetStats | None = None) -> WindowPlan:
    return WindowPlan(record, split, data_cfg, stats)


def count_candidate_anchors(n_days: int, L: int, H: int) -> int:
    """Sliding stride-1 anchor count before any context filtering."""
    return max(0, n_days - L - H + 1)


# -- masking and multi-scale views ------------------------------------------------

def sample_mask(length: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(p) index mask; redrawn once if empty, then a single uniform
    index as the final fallback so the mask is never empty."""
    mask = np.nonzero(rng.random(length) < p)[0]
    if mask.size == 0:
        mask = np.nonzero(rng.random(length) < p)[0]
    if mask.size == 0:
        mask = np.array([rng.integers(0, length)])
    return mask


def aggregate_scales(x_window: np.ndarray) -> dict[str, np.ndarray]:
    """Daily/weekly/monthly views: non-overlapping 7- and 30-day means over
    the trailing axis; partial tail blocks are dropped."""
    x = np.asarray(x_window, dtype=np.float64)
    out = {"daily": x}
    for name, width in (("weekly", 7), ("monthly", 30)):
        n = x.shape[-1] // width
        if n == 0:
            raise DataError(
                f"aggregate_scales: window of {x.shape[-1]} days has no full "
                f"{width}-day block")
        trimmed = x[..., :n * width]
        out[name] = trimmed.reshape(*x.shape[:-1], n, width).mean(axis=-1)
    return out
