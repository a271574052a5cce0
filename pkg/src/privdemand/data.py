"""Loading, synthesis, splitting, and batching of labeled demand series."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DataFormatError",
    "DemandRecord",
    "Dataset",
    "PriceSchedule",
    "SynthConfig",
    "Batch",
    "load_csv",
    "write_csv",
    "synth_generate",
    "split",
    "batches",
    "build_tou_prices",
]


class DataFormatError(ValueError):
    """A dataset file or row does not match the expected schema."""


@dataclass
class DemandRecord:
    """One H-step demand series with its binary sensitive label.

    ``one_hot`` puts the positive label in position 0, so the mean one-hot
    over a dataset equals the prior vector [p, 1-p].
    """

    demand: np.ndarray
    label: int
    one_hot: np.ndarray = field(init=False)

    def __post_init__(self):
        self.demand = np.asarray(self.demand, dtype=float)
        if self.demand.ndim != 1:
            raise DataFormatError("demand must be a 1-D series")
        if self.label not in (0, 1):
            raise DataFormatError(f"label must be 0 or 1, got {self.label!r}")
        self.one_hot = np.array([float(self.label), 1.0 - float(self.label)])


@dataclass
class Dataset:
    """A collection of demand records sharing one horizon.

    ``prior`` is [p, 1-p] with p the empirical fraction of label-1 records.
    """

    records: list[DemandRecord]
    horizon: int
    prior: np.ndarray
    split_seed: int = 0

    def __post_init__(self):
        for i, rec in enumerate(self.records):
            if rec.demand.shape != (self.horizon,):
                raise DataFormatError(
                    f"record {i}: demand length {rec.demand.shape[0]} != horizon {self.horizon}"
                )

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def from_records(cls, records: list[DemandRecord], horizon: int,
                     split_seed: int = 0) -> "Dataset":
        if not records:
            raise DataFormatError("dataset is empty")
        p = sum(r.label for r in records) / len(records)
        return cls(records, horizon, np.array([p, 1.0 - p]), split_seed)

    def demand_matrix(self) -> np.ndarray:
        return np.stack([r.demand for r in self.records])

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=int)


@dataclass(frozen=True)
class PriceSchedule:
    """Per-interval electricity prices plus the tier definition they came from.

    Tiers are (start, end, price) with half-open interval ranges.
    """

    prices: np.ndarray
    tiers: tuple[tuple[int, int, float], ...]


@dataclass
class SynthConfig:
    """Settings for the synthetic class-separated peak generator."""

    n_records: int = 4000
    horizon: int = 24
    class0_peak: float = 2.0
    class1_peak: float = 4.0
    peak_hours: tuple[int, ...] = (17, 18, 19, 20, 21)
    base_load: float = 1.0
    noise_sd: float = 0.25
    solar_depth: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        gap = abs(self.class1_peak - self.class0_peak)
        if gap < 3.0 * self.noise_sd:
            raise ValueError(
                f"class peaks must differ by >= 3x noise sd ({gap} < {3 * self.noise_sd})"
            )
        if any(h < 0 or h >= self.horizon for h in self.peak_hours):
            raise ValueError("peak_hours outside horizon")


@dataclass(frozen=True)
class Batch:
    """A mini-batch view: demand matrix (m, H), labels (m,), one-hots (m, 2)."""

    demand: np.ndarray
    labels: np.ndarray
    one_hot: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return self.demand.shape[0]


def _parse_float(token: str, row: int, col: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise DataFormatError(
            f"row {row}: column {col} is not numeric: {token!r}"
        ) from None


def load_csv(path, horizon: int, split_seed: int = 0) -> Dataset:
    """Read a dataset file with H demand columns plus one 0/1 label column.

    A single header row is tolerated and skipped when its first cell is not
    numeric. Every data row must have exactly horizon + 1 columns.
    """
    records: list[DemandRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for rownum, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if rownum == 1:
                try:
                    float(row[0])
                except ValueError:
                    continue  # header row
            if len(row) != horizon + 1:
                raise DataFormatError(
                    f"row {rownum}: expected {horizon + 1} columns, got {len(row)}"
                )
            demand = np.array(
                [_parse_float(tok, rownum, j) for j, tok in enumerate(row[:-1])]
            )
            label_tok = row[-1].strip()
            if label_tok not in ("0", "1"):
                raise DataFormatError(
                    f"row {rownum}: label must be 0 or 1, got {label_tok!r}"
                )
            records.append(DemandRecord(demand, int(label_tok)))
    if not records:
        raise DataFormatError(f"{path}: no data rows")
    return Dataset.from_records(records, horizon, split_seed)


def write_csv(ds: Dataset, path) -> None:
    """Write a dataset in the load_csv schema; float formatting round-trips."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"t{j}" for j in range(ds.horizon)] + ["label"])
        for rec in ds.records:
            writer.writerow([repr(v) for v in rec.demand] + [rec.label])


def _solar_shape(horizon: int) -> np.ndarray:
    """Midday generation profile, peaking at 1.0 halfway through the day."""
    j = np.arange(horizon)
    lo, hi = horizon / 4.0, 3.0 * horizon / 4.0
    shape = np.sin(np.pi * (j - lo) / (hi - lo)) ** 2
    shape[(j < lo) | (j > hi)] = 0.0
    return shape


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Generate class-separated peak-demand records, optionally solar-netted.

    Class-k records carry exactly the class-k peak height at peak hours plus
    Gaussian noise everywhere; deterministic for a fixed seed.
    """
    if cfg.n_records < 2:
        raise ValueError("need at least 2 records")
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_records
    labels = np.zeros(n, dtype=int)
    labels[: n // 2] = 1
    labels = labels[rng.permutation(n)]

    peak_mask = np.zeros(cfg.horizon)
    peak_mask[list(cfg.peak_hours)] = 1.0
    solar = cfg.solar_depth * _solar_shape(cfg.horizon)

    records = []
    for lab in labels:
        peak = cfg.class1_peak if lab == 1 else cfg.class0_peak
        base = cfg.base_load * (1.0 - peak_mask) + peak * peak_mask
        noise = rng.normal(0.0, cfg.noise_sd, cfg.horizon) if cfg.noise_sd > 0 else 0.0
        records.append(DemandRecord(base + noise - solar, int(lab)))
    return Dataset.from_records(records, cfg.horizon, split_seed=cfg.seed)


def split(ds: Dataset, train_fraction: float) -> tuple[Dataset, Dataset]:
    """Seeded disjoint partition; train gets ceil(fraction * n) records."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(ds)
    # round() guards float dust in fraction * n before the ceiling
    n_train = math.ceil(round(train_fraction * n, 9) - 1e-9)
    if n_train >= n:
        raise ValueError("test split empty")
    if n_train <= 0:
        raise ValueError("train split empty")
    order = np.random.default_rng(ds.split_seed).permutation(n)
    train = [ds.records[i] for i in order[:n_train]]
    test = [ds.records[i] for i in order[n_train:]]
    return (
        Dataset.from_records(train, ds.horizon, ds.split_seed),
        Dataset.from_records(test, ds.horizon, ds.split_seed),
    )


def batches(ds: Dataset, m: int, seed: int):
    """Yield one seeded-shuffle epoch of batches; the short final batch is kept."""
    n = len(ds)
    if not 1 <= m <= n:
        raise ValueError(f"batch size {m} outside [1, {n}]")
    order = np.random.default_rng(seed).permutation(n)
    demand = ds.demand_matrix()
    labels = ds.labels()
    one_hot = np.stack([r.one_hot for r in ds.records])
    for start in range(0, n, m):
        idx = order[start : start + m]
        yield Batch(demand[idx], labels[idx], one_hot[idx], idx)


#: Hourly two-tier time-of-use template: peak 4pm-9pm.
DEFAULT_TOU_TIERS_24 = ((0, 16, 0.202), (16, 21, 0.463), (21, 24, 0.202))


def default_tou_tiers(horizon: int) -> tuple[tuple[int, int, float], ...]:
    """Scale the hourly two-tier TOU template to a horizon that is a multiple of 24."""
    if horizon % 24 != 0:
        raise ValueError(f"no default tiers for horizon {horizon}; pass tiers explicitly")
    k = horizon // 24
    return tuple((s * k, e * k, p) for s, e, p in DEFAULT_TOU_TIERS_24)


def build_tou_prices(horizon: int, tiers=None) -> PriceSchedule:
    """Fill a price vector from (start, end, price) tiers covering [0, H)."""
    if tiers is None:
        tiers = default_tou_tiers(horizon)
    tiers = tuple((int(s), int(e), float(p)) for s, e, p in tiers)
    prices = np.full(horizon, np.nan)
    for s, e, p in tiers:
        if not 0 <= s < e <= horizon:
            raise ValueError(f"tier ({s}, {e}) outside [0, {horizon})")
        if p <= 0:
            raise ValueError("prices must be strictly positive")
        if np.any(np.isfinite(prices[s:e])):
            raise ValueError(f"tier ({s}, {e}) overlaps an earlier tier")
        prices[s:e] = p
    if np.any(np.isnan(prices)):
        gaps = np.flatnonzero(np.isnan(prices))
        raise ValueError(f"tiers leave intervals uncovered: {gaps.tolist()}")
    return PriceSchedule(prices, tiers)
