"""Shared domain types: the 7-state space, transition legality, feature schemas,
loan-month samples, and empirical transition matrices.

All types here are immutable after construction and safe to share across
workers. The state order is fixed and recorded in every serialized artifact.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

STATE_NAMES = ("Current", "DD30", "DD60", "DD90plus", "Foreclosure", "REO", "PaidOff")
NUM_STATES = 7

CURRENT, DD30, DD60, DD90PLUS, FORECLOSURE, REO, PAIDOFF = range(NUM_STATES)

ABSORBING_STATES = (REO, PAIDOFF)
NON_ABSORBING_STATES = (CURRENT, DD30, DD60, DD90PLUS, FORECLOSURE)

# Transitions that never occur: delinquency deepens at most one notch per month.
_ILLEGAL_PAIRS = frozenset({(CURRENT, DD60), (CURRENT, DD90PLUS), (DD30, DD90PLUS)})

STATE_INDEX = {name: i for i, name in enumerate(STATE_NAMES)}


def state_index(name: str) -> int:
    """Map a state name to its fixed index; raises KeyError on unknown names."""
    return STATE_INDEX[name]


def is_absorbing(s: int) -> bool:
    """True iff the state is never exited once entered (REO, PaidOff)."""
    if not 0 <= s < NUM_STATES:
        raise ValueError(f"invalid state index {s}")
    return s in ABSORBING_STATES


def is_legal_transition(from_state: int, to_state: int) -> bool:
    """Whether a one-month transition can occur.

    Illegal: skipping delinquency notches (Current->DD60, Current->DD90plus,
    DD30->DD90plus) and any exit from an absorbing state other than the
    self-loop. Everything else is legal: any state may cure, pay off, or go
    to REO (deed in lieu), and foreclosures may return to current.
    """
    if not (0 <= from_state < NUM_STATES and 0 <= to_state < NUM_STATES):
        raise ValueError(f"invalid state pair ({from_state}, {to_state})")
    if is_absorbing(from_state):
        return to_state == from_state
    return (from_state, to_state) not in _ILLEGAL_PAIRS


def legality_mask() -> np.ndarray:
    """KxK boolean matrix, entry (u, v) true iff u -> v is legal."""
    mask = np.zeros((NUM_STATES, NUM_STATES), dtype=bool)
    for u in range(NUM_STATES):
        for v in range(NUM_STATES):
            mask[u, v] = is_legal_transition(u, v)
    return mask


ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic KxK matrix over the 7 states.

    Row index is the conditioning state, column index the next state. Rows sum
    to 1 within 1e-9 and absorbing rows are unit vectors.
    """

    entries: np.ndarray
    flagged_rows: tuple[int, ...] = ()

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=np.float64)
        if m.shape != (NUM_STATES, NUM_STATES):
            raise ValueError(f"expected {NUM_STATES}x{NUM_STATES}, got {m.shape}")
        if np.any(m < -1e-15) or np.any(m > 1 + 1e-12):
            raise ValueError("entries must lie in [0, 1]")
        row_sums = m.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > ROW_SUM_TOL):
            bad = int(np.argmax(np.abs(row_sums - 1.0)))
            raise ValueError(f"row {bad} sums to {row_sums[bad]!r}, not 1")
        for s in ABSORBING_STATES:
            unit = np.zeros(NUM_STATES)
            unit[s] = 1.0
            if not np.allclose(m[s], unit, atol=ROW_SUM_TOL):
                raise ValueError(f"absorbing row {STATE_NAMES[s]} is not a unit vector")
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "entries", m)

    def __getitem__(self, key):
        return self.entries[key]

    def to_csv(self) -> str:
        """7 header-labeled rows/columns, probabilities with 10 significant digits."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["state"] + list(STATE_NAMES))
        for u in range(NUM_STATES):
            w.writerow([STATE_NAMES[u]] + [f"{p:.10g}" for p in self.entries[u]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TransitionMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        if rows[0][1:] != list(STATE_NAMES):
            raise ValueError("column header does not match the fixed state order")
        m = np.zeros((NUM_STATES, NUM_STATES))
        for row in rows[1:]:
            u = state_index(row[0])
            m[u] = [float(x) for x in row[1:]]
        # renormalize away the 10-digit rounding before validation
        m /= m.sum(axis=1, keepdims=True)
        return cls(m)


def absorbing_unit_rows(m: np.ndarray) -> np.ndarray:
    """Copy of m with absorbing rows replaced by their unit vectors."""
    out = np.array(m, dtype=np.float64, copy=True)
    for s in ABSORBING_STATES:
        out[s] = 0.0
        out[s, s] = 1.0
    return out


# ---------------------------------------------------------------------------
# Feature schema
# ---------------------------------------------------------------------------

NUMERIC = "numeric"
INDICATOR = "indicator"
CATEGORICAL_LEVEL = "categorical-level"

STATE_FIELD = "state"
OTHER_LEVEL = "__other__"


@dataclass(frozen=True)
class RawField:
    """One field of the raw input tables, before encoding.

    kind is "numeric", "categorical", or "state". Numeric fields marked
    required drop the sample when absent; optional numeric fields get a
    missing-value indicator column instead. A field with encode=False is
    carried through the tables (and remains usable by covariate-evolution
    rules) but contributes no design column.
    """

    name: str
    kind: str
    levels: tuple[str, ...] = ()
    required: bool = False
    group: str = "static"
    normalize: bool = True
    encode: bool = True

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical", "state"):
            raise ValueError(f"unknown field kind {self.kind!r}")
        if self.kind == "categorical" and not self.levels:
            raise ValueError(f"categorical field {self.name!r} needs levels")
        if not self.encode and self.kind != "numeric":
            raise ValueError(f"only numeric fields may set encode=False ({self.name!r})")


@dataclass(frozen=True)
class Column:
    name: str
    kind: str  # numeric | indicator | categorical-level
    group: str  # source raw field


@dataclass(frozen=True)
class FeatureSchema:
    """Encoded-column layout of the design matrix.

    Column order is fixed for the lifetime of a model: numeric fields give a
    value column (plus a missing indicator when optional), categoricals give
    one column per level plus a reserved "other" column, and the state field
    gives the 7 state-indicator columns (state_group).
    """

    raw_fields: tuple[RawField, ...]
    columns: tuple[Column, ...] = field(default=None)
    state_group: tuple[int, ...] = field(default=None)

    def __post_init__(self):
        cols: list[Column] = []
        state_group: list[int] = []
        names_seen = set()
        state_fields = [f for f in self.raw_fields if f.kind == "state"]
        if len(state_fields) != 1:
            raise ValueError("schema needs exactly one state field")
        for f in self.raw_fields:
            if f.name in names_seen:
                raise ValueError(f"duplicate field name {f.name!r}")
            names_seen.add(f.name)
            if not f.encode:
                continue
            if f.kind == "numeric":
                cols.append(Column(f.name, NUMERIC, f.name))
                if not f.required:
                    cols.append(Column(f.name + "_missing", INDICATOR, f.name))
            elif f.kind == "categorical":
                for lv in f.levels:
                    cols.append(Column(f"{f.name}={lv}", CATEGORICAL_LEVEL, f.name))
                cols.append(Column(f"{f.name}={OTHER_LEVEL}", CATEGORICAL_LEVEL, f.name))
            else:  # state
                for i, sn in enumerate(STATE_NAMES):
                    state_group.append(len(cols) + i)
                cols.extend(Column(f"state={sn}", INDICATOR, STATE_FIELD) for sn in STATE_NAMES)
        object.__setattr__(self, "columns", tuple(cols))
        object.__setattr__(self, "state_group", tuple(state_group))

    @property
    def num_columns(self) -> int:
        return len(self.columns)

    @property
    def required_fields(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.raw_fields if f.required)

    def column_index(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise KeyError(f"no column named {name!r}")

    def column_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    def normalize_mask(self) -> np.ndarray:
        """Per-column flag: z-score this column when fitting normalization."""
        by_field = {f.name: f.normalize for f in self.raw_fields}
        by_field[STATE_FIELD] = next(
            f.normalize for f in self.raw_fields if f.kind == "state"
        )
        return np.array([by_field[c.group] for c in self.columns], dtype=bool)

    def to_json_dict(self) -> dict:
        return {
            "state_order": list(STATE_NAMES),
            "raw_fields": [
                {
                    "name": f.name,
                    "kind": f.kind,
                    "levels": list(f.levels),
                    "required": f.required,
                    "group": f.group,
                    "normalize": f.normalize,
                    "encode": f.encode,
                }
                for f in self.raw_fields
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "FeatureSchema":
        if d.get("state_order") != list(STATE_NAMES):
            raise ValueError("schema state order does not match this build")
        fields = tuple(
            RawField(
                name=f["name"],
                kind=f["kind"],
                levels=tuple(f.get("levels", ())),
                required=f.get("required", False),
                group=f.get("group", "static"),
                normalize=f.get("normalize", True),
                encode=f.get("encode", True),
            )
            for f in d["raw_fields"]
        )
        return cls(raw_fields=fields)

    def schema_hash(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class LoanMonthSample:
    """One loan-month observation: covariates, current state, realized next state."""

    loan_id: str
    period: int
    covariates: np.ndarray
    state: int
    next_state: int

    def __post_init__(self):
        if is_absorbing(self.state):
            raise ValueError("no rows are recorded after absorption")
        if not is_legal_transition(self.state, self.next_state):
            raise ValueError(
                f"illegal transition {STATE_NAMES[self.state]} -> "
                f"{STATE_NAMES[self.next_state]}"
            )


class Panel:
    """Columnar view of a sequence of loan-month samples.

    Arrays are frozen after construction; partition/merge of transition counts
    over shards of a panel is exact (integer counts).
    """

    def __init__(self, loan_ids, periods, covariates, states, next_states, schema=None):
        self.loan_ids = np.asarray(loan_ids, dtype=object)
        self.periods = np.asarray(periods, dtype=np.int64)
        self.covariates = np.asarray(covariates, dtype=np.float64)
        self.states = np.asarray(states, dtype=np.int64)
        self.next_states = np.asarray(next_states, dtype=np.int64)
        self.schema = schema
        n = len(self.loan_ids)
        for arr in (self.periods, self.covariates, self.states, self.next_states):
            if len(arr) != n:
                raise ValueError("panel arrays must share their first dimension")
            arr.flags.writeable = False
        self.loan_ids.flags.writeable = False

    def __len__(self) -> int:
        return len(self.states)

    def subset(self, mask_or_index) -> "Panel":
        return Panel(
            self.loan_ids[mask_or_index],
            self.periods[mask_or_index],
            self.covariates[mask_or_index],
            self.states[mask_or_index],
            self.next_states[mask_or_index],
            self.schema,
        )

    def samples(self):
        for i in range(len(self)):
            yield LoanMonthSample(
                loan_id=self.loan_ids[i],
                period=int(self.periods[i]),
                covariates=self.covariates[i],
                state=int(self.states[i]),
                next_state=int(self.next_states[i]),
            )


def transition_counts(states, next_states) -> np.ndarray:
    """KxK integer count matrix; pooled counts over partitions merge exactly."""
    states = np.asarray(states, dtype=np.int64)
    next_states = np.asarray(next_states, dtype=np.int64)
    counts = np.zeros((NUM_STATES, NUM_STATES), dtype=np.int64)
    np.add.at(counts, (states, next_states), 1)
    return counts


def counts_to_matrix(counts: np.ndarray) -> TransitionMatrix:
    """Frequency matrix from counts; absorbing rows are unit vectors.

    A non-absorbing state with zero observations is flagged and filled with a
    unit self-loop (insufficient data, never a silent NaN).
    """
    counts = np.asarray(counts, dtype=np.int64)
    m = np.zeros((NUM_STATES, NUM_STATES), dtype=np.float64)
    flagged = []
    for u in NON_ABSORBING_STATES:
        total = counts[u].sum()
        if total == 0:
            flagged.append(u)
            m[u, u] = 1.0
        else:
            m[u] = counts[u] / total
    m = absorbing_unit_rows(m)
    return TransitionMatrix(m, flagged_rows=tuple(flagged))


def empirical_transition_matrix(states, next_states=None) -> TransitionMatrix:
    """Empirical one-month transition frequencies.

    Accepts either (states, next_states) arrays, a Panel, or an iterable of
    LoanMonthSample.
    """
    if next_states is None:
        if isinstance(states, Panel):
            states, next_states = states.states, states.next_states
        else:
            pairs = [(s.state, s.next_state) for s in states]
            if pairs:
                states, next_states = zip(*pairs)
            else:
                states, next_states = [], []
    return counts_to_matrix(transition_counts(states, next_states))
