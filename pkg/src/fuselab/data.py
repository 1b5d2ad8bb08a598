"""Dataset loading, synthetic benchmark generation, windowing and splits.

Series files are CSV with a header row, an ISO-8601 timestamp in the
first column and one numeric column per channel. Embedding files are
either CSV (one row per time step) or a raw little-endian binary with an
8-byte row-count and 8-byte dimension header followed by float64 data.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import rng as _rng
from .textpath import TEXT_TYPES, ToyEncoder

FREQUENCIES = ("daily", "weekly", "monthly", "toy")

# Lookback and default forecast horizons by reporting frequency.
WINDOW_POLICY = {
    "daily": (96, (48, 96, 192, 336)),
    "weekly": (36, (12, 24, 36, 48)),
    "monthly": (8, (6, 8, 10, 12)),
    "toy": (8, (8,)),
}

STD_FLOOR = 1e-8


class DataError(ValueError):
    pass


class AlignmentError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


def default_window_policy(frequency: str) -> Tuple[int, Tuple[int, ...]]:
    if frequency not in WINDOW_POLICY:
        raise DataError(f"unknown frequency {frequency!r}")
    return WINDOW_POLICY[frequency]


@dataclass
class MultimodalDataset:
    """Aligned numeric series and per-step text embeddings."""

    name: str
    frequency: str
    series: np.ndarray  # (T, C) float64
    text_embeddings: np.ndarray  # (T, D_text) float64
    text_labels: Optional[np.ndarray] = None  # (T,) unicode labels
    timestamps: Optional[List[str]] = None

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float64)
        self.text_embeddings = np.asarray(self.text_embeddings, dtype=np.float64)
        if self.series.ndim != 2 or self.series.shape[1] < 1:
            raise DataError(f"series must be (T, C) with C >= 1, got {self.series.shape}")
        if self.text_embeddings.ndim != 2 or self.text_embeddings.shape[1] < 1:
            raise DataError(
                f"text embeddings must be (T, D) with D >= 1, got {self.text_embeddings.shape}"
            )
        if self.series.shape[0] != self.text_embeddings.shape[0]:
            raise AlignmentError(
                f"{self.name}: series has {self.series.shape[0]} rows but "
                f"embeddings have {self.text_embeddings.shape[0]}"
            )
        if not np.all(np.isfinite(self.series)):
            bad = int(np.argwhere(~np.isfinite(self.series))[0][0])
            raise DataError(f"{self.name}: non-finite series value at row {bad}")
        if self.frequency not in FREQUENCIES:
            raise DataError(f"unknown frequency {self.frequency!r}")
        if self.timestamps is not None:
            for i in range(1, len(self.timestamps)):
                if self.timestamps[i] <= self.timestamps[i - 1]:
                    raise DataError(
                        f"{self.name}: timestamps not strictly increasing at row {i}"
                    )

    @property
    def length(self) -> int:
        return self.series.shape[0]

    @property
    def channels(self) -> int:
        return self.series.shape[1]

    @property
    def text_dim(self) -> int:
        return self.text_embeddings.shape[1]

    def slice(self, start: int, stop: int, name_suffix: str = "") -> "MultimodalDataset":
        return MultimodalDataset(
            name=self.name + name_suffix,
            frequency=self.frequency,
            series=self.series[start:stop],
            text_embeddings=self.text_embeddings[start:stop],
            text_labels=None if self.text_labels is None else self.text_labels[start:stop],
            timestamps=None if self.timestamps is None else self.timestamps[start:stop],
        )


@dataclass
class WindowBatch:
    """Lookback/horizon pairs with aligned raw text embeddings."""

    x: np.ndarray  # (B, L, C)
    y: np.ndarray  # (B, H, C)
    z_text_raw: np.ndarray  # (B, L, D_text)
    labels: Optional[np.ndarray] = None  # (B,) text-type tag of the last lookback step

    @property
    def count(self) -> int:
        return self.x.shape[0]

    @property
    def lookback(self) -> int:
        return self.x.shape[1]

    @property
    def horizon(self) -> int:
        return self.y.shape[1]

    @property
    def channels(self) -> int:
        return self.x.shape[2]

    def subset(self, idx) -> "WindowBatch":
        return WindowBatch(
            x=self.x[idx],
            y=self.y[idx],
            z_text_raw=self.z_text_raw[idx],
            labels=None if self.labels is None else self.labels[idx],
        )


@dataclass
class SplitSpec:
    ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    mode: str = "chronological"

    def __post_init__(self):
        if self.mode != "chronological":
            raise DataError(f"unsupported split mode {self.mode!r}")
        if any(r < 0 for r in self.ratios) or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise DataError(f"split ratios must be nonnegative and sum to 1, got {self.ratios}")


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------


@dataclass
class DatasetSchema:
    """Column spec for loading a series file and its paired embedding file."""

    frequency: str
    embeddings: str | Path
    name: Optional[str] = None
    channel_columns: Optional[Sequence[str]] = None  # default: all non-timestamp columns


def _parse_series_csv(path: Path, channel_columns: Optional[Sequence[str]]):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty series file") from None
        if len(header) < 2:
            raise DataError(f"{path}: need a timestamp column plus at least one channel")
        names = header[1:]
        if channel_columns is not None:
            missing = [c for c in channel_columns if c not in names]
            if missing:
                raise DataError(f"{path}: missing channel columns {missing}")
            cols = [names.index(c) + 1 for c in channel_columns]
        else:
            cols = list(range(1, len(header)))
        timestamps: List[str] = []
        rows: List[List[float]] = []
        for i, row in enumerate(reader):
            if not row:
                continue
            timestamps.append(row[0])
            try:
                values = [float(row[c]) for c in cols]
            except (ValueError, IndexError):
                raise DataError(f"{path}: cannot parse numeric value at row {i + 1}") from None
            if not all(np.isfinite(values)):
                raise DataError(f"{path}: non-finite value at row {i + 1}")
            rows.append(values)
    return timestamps, np.asarray(rows, dtype=np.float64)


def write_embeddings(path: str | Path, embeddings: np.ndarray) -> None:
    """Write a (T, D) float64 embedding matrix as CSV or raw binary."""
    path = Path(path)
    arr = np.ascontiguousarray(embeddings, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"embeddings must be 2-D, got shape {arr.shape}")
    if path.suffix == ".csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in arr:
                writer.writerow([repr(float(v)) for v in row])
    else:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<QQ", arr.shape[0], arr.shape[1]))
            fh.write(arr.astype("<f8").tobytes())


def read_embeddings(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, newline="") as fh:
            rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
        arr = np.asarray(rows, dtype=np.float64)
        if arr.ndim != 2:
            raise DataError(f"{path}: embedding CSV is not rectangular")
        return arr
    raw = path.read_bytes()
    if len(raw) < 16:
        raise DataError(f"{path}: truncated embedding file")
    n, d = struct.unpack("<QQ", raw[:16])
    expected = 16 + n * d * 8
    if len(raw) != expected:
        raise DataError(f"{path}: embedding payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw[16:], dtype="<f8").reshape(n, d).astype(np.float64)


def load_dataset(path: str | Path, schema: DatasetSchema) -> MultimodalDataset:
    """Load a series CSV plus its row-aligned embedding file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"series file not found: {path}")
    emb_path = Path(schema.embeddings)
    if not emb_path.exists():
        raise DataError(f"embedding file not found: {emb_path}")
    timestamps, series = _parse_series_csv(path, schema.channel_columns)
    embeddings = read_embeddings(emb_path)
    return MultimodalDataset(
        name=schema.name or path.stem,
        frequency=schema.frequency,
        series=series,
        text_embeddings=embeddings,
        timestamps=timestamps,
    )


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------

TOY_SEGMENT_RANGE = (20, 60)
TOY_SLOPE_RANGE = (0.02, 0.08)
TOY_NOISE_SIGMA = 0.3


def generate_toy_dataset(
    seed: int,
    n: int = 1000,
    text_dim: int = 32,
    encoder: Optional[ToyEncoder] = None,
) -> MultimodalDataset:
    """Univariate series of alternating linear trends with labelled text.

    Each step carries a text type drawn uniformly from matching /
    contradicting / irrelevant and a deterministic toy embedding. The
    series is globally z-scored after construction.
    """
    if n < 30:
        raise DataError(f"toy dataset needs n >= 30, got {n}")
    gen = _rng.stream(seed, "toy-data")
    enc = encoder or ToyEncoder(dim=text_dim, hash_seed=seed)

    values = np.empty(n)
    directions = np.empty(n, dtype=np.int64)
    level = 0.0
    direction = 1 if gen.uniform() < 0.5 else -1
    t = 0
    while t < n:
        length = int(gen.integers(TOY_SEGMENT_RANGE[0], TOY_SEGMENT_RANGE[1] + 1))
        slope = gen.uniform(*TOY_SLOPE_RANGE) * direction
        for _ in range(min(length, n - t)):
            level += slope
            values[t] = level
            directions[t] = direction
            t += 1
        direction = -direction
    values = values + gen.normal(0.0, TOY_NOISE_SIGMA, n)
    values = (values - values.mean()) / values.std()

    labels = np.array([TEXT_TYPES[int(gen.integers(0, 3))] for _ in range(n)])
    embeddings = np.stack(
        [enc.encode(labels[i], int(directions[i]), step=i) for i in range(n)]
    )
    return MultimodalDataset(
        name=f"toy-{seed}",
        frequency="toy",
        series=values[:, None],
        text_embeddings=embeddings,
        text_labels=labels,
    )


# ---------------------------------------------------------------------------
# splits and windows
# ---------------------------------------------------------------------------


def chronological_split(
    dataset: MultimodalDataset, spec: SplitSpec = SplitSpec(), min_length: int = 0
) -> Tuple[MultimodalDataset, MultimodalDataset, MultimodalDataset]:
    """Contiguous train/val/test segments; boundaries at cumulative floor."""
    t_total = dataset.length
    # tiny nudge so float dust in the cumulative products cannot pull an
    # exact boundary (e.g. 0.7 + 0.1 of 10) below its true floor
    b1 = int(np.floor(spec.ratios[0] * t_total + 1e-9))
    b2 = int(np.floor((spec.ratios[0] + spec.ratios[1]) * t_total + 1e-9))
    parts = (
        dataset.slice(0, b1, "/train"),
        dataset.slice(b1, b2, "/val"),
        dataset.slice(b2, t_total, "/test"),
    )
    if min_length > 0:
        for part, tag in zip(parts, ("train", "val", "test")):
            if part.length < min_length:
                raise InsufficientDataError(
                    f"{dataset.name}: {tag} segment has {part.length} steps, "
                    f"needs at least {min_length}"
                )
    return parts


def make_windows(
    dataset: MultimodalDataset, lookback: int, horizon: int, stride: int = 1
) -> WindowBatch:
    """Slice a dataset into contiguous, non-leaking lookback/horizon pairs."""
    t_total = dataset.length
    if t_total < lookback + horizon:
        raise InsufficientDataError(
            f"{dataset.name}: {t_total} steps cannot fit lookback {lookback} + horizon {horizon}"
        )
    starts = range(0, t_total - lookback - horizon + 1, stride)
    x = np.stack([dataset.series[s : s + lookback] for s in starts])
    y = np.stack([dataset.series[s + lookback : s + lookback + horizon] for s in starts])
    z = np.stack([dataset.text_embeddings[s : s + lookback] for s in starts])
    labels = None
    if dataset.text_labels is not None:
        labels = np.array([dataset.text_labels[s + lookback - 1] for s in starts])
    return WindowBatch(x=x, y=y, z_text_raw=z, labels=labels)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


@dataclass
class Normalizer:
    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,)
    warnings: List[str] = field(default_factory=list)

    def apply(self, arr: np.ndarray) -> np.ndarray:
        return (arr - self.mean) / self.std

    def invert(self, arr: np.ndarray) -> np.ndarray:
        return arr * self.std + self.mean

    def apply_batch(self, batch: WindowBatch) -> WindowBatch:
        return WindowBatch(
            x=self.apply(batch.x),
            y=self.apply(batch.y),
            z_text_raw=batch.z_text_raw,
            labels=batch.labels,
        )


def fit_normalizer(train: WindowBatch) -> Normalizer:
    """Per-channel z-score statistics over the train windows (x and y)."""
    if train.count == 0:
        raise DataError("fit_normalizer: empty train batch")
    stacked = np.concatenate(
        [train.x.reshape(-1, train.channels), train.y.reshape(-1, train.channels)]
    )
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    warnings = []
    for c in np.nonzero(std < STD_FLOOR)[0]:
        warnings.append(f"channel {int(c)} is constant; std floored to {STD_FLOOR}")
    std = np.maximum(std, STD_FLOOR)
    return Normalizer(mean=mean, std=std, warnings=warnings)


@dataclass
class Splits:
    """Windowed, normalized train/val/test batches for one setting."""

    train: WindowBatch
    val: WindowBatch
    test: WindowBatch
    normalizer: Normalizer
    lookback: int
    horizon: int


def prepare_splits(
    dataset: MultimodalDataset,
    lookback: int,
    horizon: int,
    spec: SplitSpec = SplitSpec(),
    stride: int = 1,
) -> Splits:
    train_d, val_d, test_d = chronological_split(dataset, spec, min_length=lookback + horizon)
    train = make_windows(train_d, lookback, horizon, stride)
    val = make_windows(val_d, lookback, horizon, stride)
    test = make_windows(test_d, lookback, horizon, stride)
    norm = fit_normalizer(train)
    return Splits(
        train=norm.apply_batch(train),
        val=norm.apply_batch(val),
        test=norm.apply_batch(test),
        normalizer=norm,
        lookback=lookback,
        horizon=horizon,
    )


# ---------------------------------------------------------------------------
# irrelevant-text substitution
# ---------------------------------------------------------------------------


def substitute_irrelevant_text(
    target: MultimodalDataset, donors: Sequence[MultimodalDataset], seed: int
) -> MultimodalDataset:
    """Replace every text embedding row with one sampled from donor datasets."""
    if not donors:
        raise DataError("substitute_irrelevant_text: donor list is empty")
    for donor in donors:
        if donor.text_dim != target.text_dim:
            raise AlignmentError(
                f"donor {donor.name} embedding dim {donor.text_dim} != "
                f"target dim {target.text_dim}"
            )
    pool = np.concatenate([d.text_embeddings for d in donors])
    gen = _rng.stream(seed, "irrelevant-substitution", target.name)
    picks = gen.integers(0, pool.shape[0], size=target.length)
    return MultimodalDataset(
        name=target.name + "/substituted",
        frequency=target.frequency,
        series=target.series,
        text_embeddings=pool[picks],
        text_labels=None,
        timestamps=target.timestamps,
    )
