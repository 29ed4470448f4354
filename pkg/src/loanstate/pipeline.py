"""Raw-record ingestion: encoding to design matrices, temporal splits,
train-set normalization, deterministic loan-keyed sharding, and shuffled
minibatch streaming over shard files.

File formats (all versioned):
  * input: two CSVs with headers — a static loan table (keyed by loan_id) and
    a monthly performance table (keyed by loan_id, period; carries state and
    next_state as state names);
  * shard cache: fixed-width float32 rows ``[covariates..., state, next_state]``
    with a JSON sidecar recording schema hash, counts, and the hash algorithm.

The shard hash is pinned: FNV-1a 64 over the UTF-8 loan id, xor-mixed with a
SplitMix64-scrambled seed, then SplitMix64-finalized, modulo num_shards.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    NUM_STATES,
    OTHER_LEVEL,
    STATE_INDEX,
    FeatureSchema,
    Panel,
    is_absorbing,
    legality_mask,
)

SHARD_FORMAT_VERSION = 1
HASH_ALGORITHM = "fnv1a64+splitmix64"


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------


@dataclass
class DropReport:
    """Accounting for every raw record: kept + dropped partitions the input."""

    kept: int = 0
    missing_required: dict[str, int] = field(default_factory=dict)
    illegal_transition: int = 0
    after_absorption: int = 0
    unknown_categorical: dict[str, int] = field(default_factory=dict)

    @property
    def dropped(self) -> int:
        return sum(self.missing_required.values()) + self.illegal_transition + self.after_absorption

    def to_json_dict(self) -> dict:
        return {
            "kept": self.kept,
            "dropped": self.dropped,
            "missing_required": dict(self.missing_required),
            "illegal_transition": self.illegal_transition,
            "after_absorption": self.after_absorption,
            "unknown_categorical_routed_to_other": dict(self.unknown_categorical),
        }


def _parse_state(value) -> int:
    if isinstance(value, str):
        return STATE_INDEX[value]
    return int(value)


def _numeric_or_nan(value) -> float:
    if value is None:
        return np.nan
    if isinstance(value, str):
        if value == "":
            return np.nan
        return float(value)
    return float(value)


def encode_columns(schema: FeatureSchema, colmap: dict, states: np.ndarray):
    """Design rows from columnar raw values (one entry per field name).

    Numeric columns are float arrays with NaN marking missing values;
    categorical columns are object arrays of level strings (None = missing).
    Returns (X, required_missing mask, unknown-categorical counts). No rows
    are dropped here; callers own the drop policy.
    """
    states = np.asarray(states, dtype=np.int64)
    n = len(states)
    X = np.zeros((n, schema.num_columns), dtype=np.float64)
    required_missing = np.zeros(n, dtype=bool)
    unknown_cat: dict[str, int] = {}
    col = 0
    for f in schema.raw_fields:
        if f.kind == "numeric":
            vals = np.asarray(colmap[f.name], dtype=np.float64)
            missing = np.isnan(vals)
            if f.required:
                required_missing |= missing
            if not f.encode:
                continue
            X[:, col] = np.where(missing, 0.0, vals)
            if f.required:
                col += 1
            else:
                X[:, col + 1] = missing.astype(np.float64)
                col += 2
        elif f.kind == "categorical":
            vals = np.asarray(colmap[f.name], dtype=object)
            matched = np.zeros(n, dtype=bool)
            for j, lv in enumerate(f.levels):
                hit = vals == lv
                X[:, col + j] = hit
                matched |= hit
            X[:, col + len(f.levels)] = ~matched
            if (~matched).any():
                unknown_cat[f.name] = int((~matched).sum())
            col += len(f.levels) + 1
        else:  # state field: one-hot of the current state
            if n:
                X[np.arange(n), col + states] = 1.0
            col += NUM_STATES
    return X, required_missing, unknown_cat


def encode(schema: FeatureSchema, records) -> tuple[Panel, DropReport]:
    """Encode raw records into normalized-ready design rows.

    Categorical fields expand to full one-hot plus a reserved "other" column;
    unknown levels are routed there and reported, never a crash. Optional
    numeric fields missing a value produce (indicator=1, value=0). Records
    missing a required field, recorded after absorption, or carrying an
    illegal observed transition are dropped and counted (in that precedence).
    """
    records = list(records)
    n = len(records)
    report = DropReport()

    loan_ids = np.array([r.get("loan_id", "") for r in records], dtype=object)
    periods = np.array([int(r.get("period", 0)) for r in records], dtype=np.int64)
    states = np.array([_parse_state(r["state"]) for r in records], dtype=np.int64) if n else np.zeros(0, np.int64)
    next_states = (
        np.array([_parse_state(r["next_state"]) for r in records], dtype=np.int64)
        if n
        else np.zeros(0, np.int64)
    )

    colmap: dict[str, np.ndarray] = {}
    for f in schema.raw_fields:
        if f.kind == "numeric":
            colmap[f.name] = np.array([_numeric_or_nan(r.get(f.name)) for r in records])
        elif f.kind == "categorical":
            colmap[f.name] = np.array(
                [None if r.get(f.name) in (None, "") else str(r.get(f.name)) for r in records],
                dtype=object,
            )
    X, required_missing, unknown_cat = encode_columns(schema, colmap, states)
    report.unknown_categorical = unknown_cat

    drop = np.zeros(n, dtype=bool)
    if n:
        for f in schema.raw_fields:
            if f.kind == "numeric" and f.required:
                missing = np.isnan(colmap[f.name]) & ~drop
                if missing.any():
                    report.missing_required[f.name] = int(missing.sum())
                drop |= missing

        absorbed = np.array([is_absorbing(s) for s in states])
        report.after_absorption = int((absorbed & ~drop).sum())
        drop |= absorbed

        illegal = ~legality_mask()[states, next_states]
        report.illegal_transition = int((illegal & ~drop).sum())
        drop |= illegal

    keep = ~drop
    report.kept = int(keep.sum())
    panel = Panel(loan_ids[keep], periods[keep], X[keep], states[keep], next_states[keep], schema)
    return panel, report


def decode_state_group(schema: FeatureSchema, X: np.ndarray) -> np.ndarray:
    """Recover the current state from the one-hot state-feature group."""
    group = np.asarray(X)[:, list(schema.state_group)]
    if not np.all(np.isin(group, (0.0, 1.0))) or not np.all(group.sum(axis=1) == 1.0):
        raise ValueError("state-feature group is not one-hot")
    return group.argmax(axis=1)


# ---------------------------------------------------------------------------
# Temporal split
# ---------------------------------------------------------------------------


def month_index(year: int, month: int, epoch_year: int = 1995) -> int:
    """Integer month index with 0 = January of the epoch year."""
    return (year - epoch_year) * 12 + (month - 1)


# Paper-default boundaries, as month indices from January 1995. Splits are
# half-open [start, end) on the sample period: a sample at exactly train_end
# goes to validation.
PAPER_TRAIN_END = month_index(2012, 5)
PAPER_VALID_END = month_index(2012, 11)


def temporal_split(panel: Panel, train_end: int, valid_end: int):
    """Partition a panel by sample period into (train, validation, test)."""
    if train_end >= valid_end:
        raise ValueError("train_end must be before valid_end")
    p = panel.periods
    train = panel.subset(p < train_end)
    valid = panel.subset((p >= train_end) & (p < valid_end))
    test = panel.subset(p >= valid_end)
    for name, part in (("train", train), ("validation", valid), ("test", test)):
        if len(part) == 0:
            warnings.warn(f"temporal_split produced an empty {name} split", stacklevel=2)
    return train, valid, test


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

SCALE_GUARD = 1e-12


@dataclass(frozen=True)
class NormalizationStats:
    """Per-column training-set means/stds plus observed ranges.

    Columns with std below 1e-12 get scale 1 and a guard flag. The mask marks
    columns that are z-scored at all; by default every column is (indicators
    included — schema flags can exempt a field group).
    """

    mean: np.ndarray
    std: np.ndarray
    guarded: np.ndarray
    mask: np.ndarray
    col_min: np.ndarray
    col_max: np.ndarray
    n_rows: int

    def to_json_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "guarded": self.guarded.astype(int).tolist(),
            "mask": self.mask.astype(int).tolist(),
            "col_min": self.col_min.tolist(),
            "col_max": self.col_max.tolist(),
            "n_rows": self.n_rows,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "NormalizationStats":
        return cls(
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            guarded=np.asarray(d["guarded"], dtype=bool),
            mask=np.asarray(d["mask"], dtype=bool),
            col_min=np.asarray(d["col_min"], dtype=np.float64),
            col_max=np.asarray(d["col_max"], dtype=np.float64),
            n_rows=int(d["n_rows"]),
        )


def fit_normalization(train_rows: np.ndarray, mask: np.ndarray | None = None) -> NormalizationStats:
    """Column means/stds from training rows only; never refit on test data."""
    X = np.asarray(train_rows, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("fit_normalization needs a non-empty 2-D array")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    guarded = std < SCALE_GUARD
    std = np.where(guarded, 1.0, std)
    if mask is None:
        mask = np.ones(X.shape[1], dtype=bool)
    return NormalizationStats(
        mean=mean,
        std=std,
        guarded=guarded,
        mask=np.asarray(mask, dtype=bool),
        col_min=X.min(axis=0),
        col_max=X.max(axis=0),
        n_rows=X.shape[0],
    )


def apply_normalization(stats: NormalizationStats, rows: np.ndarray) -> np.ndarray:
    X = np.array(rows, dtype=np.float64, copy=True)
    m = stats.mask
    X[:, m] = (X[:, m] - stats.mean[m]) / stats.std[m]
    return X


def denormalize_column(stats: NormalizationStats, col: int, values):
    values = np.asarray(values, dtype=np.float64)
    if stats.mask[col]:
        return values * stats.std[col] + stats.mean[col]
    return values


def normalize_value(stats: NormalizationStats, col: int, value: float) -> float:
    if stats.mask[col]:
        return (value - stats.mean[col]) / stats.std[col]
    return float(value)


def inject_state(X: np.ndarray, schema: FeatureSchema, stats: NormalizationStats, u: int) -> np.ndarray:
    """Copy of normalized design rows with the state-feature group set to the
    one-hot of u (normalized with the same stats the rows were built with)."""
    X = np.array(np.atleast_2d(X), dtype=np.float64, copy=True)
    for pos, col in enumerate(schema.state_group):
        raw = 1.0 if pos == u else 0.0
        X[:, col] = normalize_value(stats, col, raw)
    return X


# ---------------------------------------------------------------------------
# Sharding
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & _MASK64
    return h


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def shard_assign(loan_id: str, num_shards: int, seed: int) -> int:
    """Deterministic shard index; all samples of one loan land in one shard."""
    if num_shards < 1:
        raise ValueError("num_shards must be >= 1")
    h = _fnv1a64(str(loan_id).encode("utf-8")) ^ _splitmix64(seed & _MASK64)
    return _splitmix64(h) % num_shards


@dataclass(frozen=True)
class ShardLayout:
    directory: Path
    num_shards: int
    seed: int
    columns: int  # covariate columns + 2 (state, next_state)
    rows_per_shard: tuple[int, ...]
    schema_hash: str

    @property
    def total_rows(self) -> int:
        return sum(self.rows_per_shard)

    def shard_path(self, k: int) -> Path:
        return Path(self.directory) / f"shard_{k:04d}.bin"

    def to_json_dict(self) -> dict:
        return {
            "version": SHARD_FORMAT_VERSION,
            "hash_algorithm": HASH_ALGORITHM,
            "num_shards": self.num_shards,
            "seed": self.seed,
            "columns": self.columns,
            "rows_per_shard": list(self.rows_per_shard),
            "schema_hash": self.schema_hash,
        }

    def save(self):
        path = Path(self.directory) / "layout.json"
        path.write_text(json.dumps(self.to_json_dict(), indent=1))

    @classmethod
    def load(cls, directory) -> "ShardLayout":
        d = json.loads((Path(directory) / "layout.json").read_text())
        if d["version"] != SHARD_FORMAT_VERSION:
            raise ValueError(f"unsupported shard format version {d['version']}")
        return cls(
            directory=Path(directory),
            num_shards=d["num_shards"],
            seed=d["seed"],
            columns=d["columns"],
            rows_per_shard=tuple(d["rows_per_shard"]),
            schema_hash=d["schema_hash"],
        )


def write_shards(panel: Panel, directory, num_shards: int, seed: int) -> ShardLayout:
    """Write normalized design rows to float32 shard files, keyed by loan id."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    d = panel.covariates.shape[1]
    assign = np.array([shard_assign(lid, num_shards, seed) for lid in panel.loan_ids])
    rows_per_shard = []
    schema_hash = panel.schema.schema_hash() if panel.schema is not None else ""
    for k in range(num_shards):
        sel = assign == k
        block = np.empty((int(sel.sum()), d + 2), dtype=np.float32)
        block[:, :d] = panel.covariates[sel]
        block[:, d] = panel.states[sel]
        block[:, d + 1] = panel.next_states[sel]
        path = directory / f"shard_{k:04d}.bin"
        block.tofile(path)
        sidecar = {
            "version": SHARD_FORMAT_VERSION,
            "shard": k,
            "rows": int(sel.sum()),
            "columns": d + 2,
            "schema_hash": schema_hash,
            "hash_algorithm": HASH_ALGORITHM,
            "seed": seed,
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))
        rows_per_shard.append(int(sel.sum()))
    layout = ShardLayout(
        directory=directory,
        num_shards=num_shards,
        seed=seed,
        columns=d + 2,
        rows_per_shard=tuple(rows_per_shard),
        schema_hash=schema_hash,
    )
    layout.save()
    return layout


def _read_shard(layout: ShardLayout, k: int) -> np.ndarray:
    raw = np.fromfile(layout.shard_path(k), dtype=np.float32)
    if raw.size != layout.rows_per_shard[k] * layout.columns:
        raise ValueError(f"shard {k} is corrupt: size {raw.size} does not match sidecar")
    return raw.reshape(layout.rows_per_shard[k], layout.columns)


def load_shards(layout: ShardLayout):
    """All rows of a shard layout as (X, states, next_states) in float64."""
    blocks = [_read_shard(layout, k) for k in range(layout.num_shards)]
    full = np.concatenate(blocks, axis=0) if blocks else np.zeros((0, layout.columns), np.float32)
    d = layout.columns - 2
    return (
        full[:, :d].astype(np.float64),
        full[:, d].astype(np.int64),
        full[:, d + 1].astype(np.int64),
    )


def minibatch_stream(layout: ShardLayout, batch_size: int, epoch_seed: int):
    """One epoch of shuffled minibatches over the shard files.

    Shard order is shuffled per epoch seed, rows are shuffled within the read
    buffer, every sample is visited exactly once, and only the final batch may
    be short. Yields (X, next_states).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([layout.seed & _MASK64, epoch_seed & _MASK64]))
    order = rng.permutation(layout.num_shards)
    d = layout.columns - 2
    buffer = np.zeros((0, layout.columns), dtype=np.float32)
    for k in order:
        block = _read_shard(layout, int(k))
        buffer = np.concatenate([buffer, block], axis=0)
        buffer = buffer[rng.permutation(len(buffer))]
        n_full = len(buffer) // batch_size
        for i in range(n_full):
            chunk = buffer[i * batch_size : (i + 1) * batch_size]
            yield chunk[:, :d].astype(np.float64), chunk[:, d + 1].astype(np.int64)
        buffer = buffer[n_full * batch_size :]
    if len(buffer):
        yield buffer[:, :d].astype(np.float64), buffer[:, d + 1].astype(np.int64)


class ArrayBatchStream:
    """In-memory batch source with the same epoch contract as minibatch_stream."""

    def __init__(self, X: np.ndarray, y: np.ndarray, batch_size: int, seed: int = 0):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        if len(self.X) != len(self.y):
            raise ValueError("X and y must have equal length")
        self.batch_size = batch_size
        self.seed = seed

    @property
    def n_samples(self) -> int:
        return len(self.y)

    def epoch(self, epoch_index: int):
        rng = np.random.default_rng(np.random.SeedSequence([self.seed & _MASK64, epoch_index & _MASK64]))
        order = rng.permutation(self.n_samples)
        for i in range(0, self.n_samples, self.batch_size):
            sel = order[i : i + self.batch_size]
            yield self.X[sel], self.y[sel]


class ShardBatchStream:
    """Shard-backed batch source for training."""

    def __init__(self, layout: ShardLayout, batch_size: int):
        self.layout = layout
        self.batch_size = batch_size

    @property
    def n_samples(self) -> int:
        return self.layout.total_rows

    def epoch(self, epoch_index: int):
        return minibatch_stream(self.layout, self.batch_size, epoch_index)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def read_csv_records(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def join_loan_tables(static_records, monthly_records):
    """Merge the static loan table onto monthly rows by loan_id."""
    static_by_id = {r["loan_id"]: r for r in static_records}
    merged = []
    for row in monthly_records:
        base = static_by_id.get(row["loan_id"])
        if base is None:
            continue
        rec = dict(base)
        rec.update(row)
        merged.append(rec)
    return merged


def load_panel_csv(schema: FeatureSchema, static_path, monthly_path):
    """Read, join, and encode the two input CSVs into a panel."""
    static = read_csv_records(static_path)
    monthly = read_csv_records(monthly_path)
    return encode(schema, join_loan_tables(static, monthly))
