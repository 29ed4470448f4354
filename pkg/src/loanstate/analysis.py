"""Variable-importance and nonlinearity analysis over a fitted model:
dataset-averaged absolute input gradients, mixed-finite-difference pair and
triple interaction estimators, leave-one-out explanatory power, and
partial-dependence grids.

Interactions are measured on probabilities by default. A logit-probe mode
exists because post-softmax outputs of even a linear model have nonzero mixed
differences; the exact polynomial identities (bilinear -> c*di*dj, quadratic
-> 0) hold only pre-softmax. Estimator values are reported unscaled.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from itertools import combinations, product

import numpy as np

from .core import CURRENT, NUM_STATES, STATE_NAMES, FeatureSchema, Panel, is_absorbing
from .pipeline import NormalizationStats, inject_state
from .trainer import nll_loss

DEFAULT_DELTA = 0.1  # 0.1 training standard deviations in normalized space
DEFAULT_SAMPLE_CAP = 100_000
EIGHT_POINT = "eight_point"
FIVE_POINT = "paper_five_point"


@dataclass(frozen=True)
class ConditioningSet:
    """Samples conditioned on source state u (the set M_u), optionally
    subsampled to a seeded cap."""

    u: int
    indices: np.ndarray
    covariates: np.ndarray
    cap: int | None = None
    seed: int = 0

    def __post_init__(self):
        if len(self.indices) == 0:
            raise ValueError("empty conditioning set")
        for name in ("indices", "covariates"):
            arr = np.asarray(getattr(self, name))
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.indices)


def conditioning_set(panel: Panel, u: int, cap: int | None = DEFAULT_SAMPLE_CAP,
                     seed: int = 0) -> ConditioningSet:
    if is_absorbing(u):
        raise ValueError(f"no samples exist with absorbing state {STATE_NAMES[u]}")
    idx = np.nonzero(panel.states == u)[0]
    if len(idx) == 0:
        raise ValueError(f"no samples with state {STATE_NAMES[u]}")
    if cap is not None and len(idx) > cap:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(idx, size=cap, replace=False))
    return ConditioningSet(u=u, indices=idx, covariates=panel.covariates[idx], cap=cap, seed=seed)


def _probe(model, v: int, mode: str):
    if mode == "prob":
        return lambda X: model.predict_probs(X)[:, v]
    if mode == "logit":
        return lambda X: model.predict_logits(X)[:, v]
    if mode == "logprob":
        # shift-invariant: immune to the common-mode drift of raw logits
        return lambda X: model.predict_log_probs(X)[:, v]
    raise ValueError(f"unknown probe mode {mode!r}")


# ---------------------------------------------------------------------------
# First-order sensitivity
# ---------------------------------------------------------------------------


def sensitivity_all(model, cond: ConditioningSet, v: int) -> np.ndarray:
    """Mean absolute gradient of h(v, x) w.r.t. every input, over M_u."""
    grads = model.input_gradients(cond.covariates, v)
    return np.abs(grads).mean(axis=0)


def sensitivity(model, cond: ConditioningSet, v: int, j: int) -> float:
    """Dataset-averaged |d h(v,x) / d x_j| over the conditioning set."""
    return float(sensitivity_all(model, cond, v)[j])


# ---------------------------------------------------------------------------
# Mixed finite differences
# ---------------------------------------------------------------------------


def mixed_diff2(fn, X: np.ndarray, i: int, j: int, di: float, dj: float) -> float:
    """Mean |f(x+di+dj) - f(x+di) - f(x+dj) + f(x)| over the rows of X.

    The 4-point mixed second difference: zero for additively separable f,
    exactly c*di*dj for a bilinear term c*x_i*x_j, and di*dj*d2f/dxidxj to
    leading order for smooth f.
    """
    if i == j:
        raise ValueError("interaction needs two distinct features")
    if di <= 0 or dj <= 0:
        raise ValueError("shifts must be positive")
    # canonical shift order makes the estimator exactly symmetric in (i, j)
    (i, di), (j, dj) = sorted([(i, di), (j, dj)])
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Xi = X.copy()
    Xi[:, i] += di
    Xj = X.copy()
    Xj[:, j] += dj
    Xij = Xi.copy()
    Xij[:, j] += dj
    return float(np.abs(fn(Xij) - fn(Xi) - fn(Xj) + fn(X)).mean())


def mixed_diff3(fn, X: np.ndarray, i: int, j: int, k: int,
                di: float, dj: float, dk: float, scheme: str = EIGHT_POINT) -> float:
    """Third-order mixed difference over the rows of X.

    The 8-point default annihilates any function with only pairwise
    interactions (quadratics included) and returns exactly c*di*dj*dk on a
    trilinear term. The 5-point variant reproduces the printed estimator
    (f111 - f110 - f101 - f011 + 2 f000) for fidelity comparison; it does not
    share those exactness properties.
    """
    if len({i, j, k}) != 3:
        raise ValueError("interaction needs three distinct features")
    if min(di, dj, dk) <= 0:
        raise ValueError("shifts must be positive")
    # canonical shift order makes the estimator exactly permutation-symmetric
    (i, di), (j, dj), (k, dk) = sorted([(i, di), (j, dj), (k, dk)])
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))

    def shifted(bi, bj, bk):
        Y = X.copy()
        if bi:
            Y[:, i] += di
        if bj:
            Y[:, j] += dj
        if bk:
            Y[:, k] += dk
        return fn(Y)

    f111 = shifted(1, 1, 1)
    f110 = shifted(1, 1, 0)
    f101 = shifted(1, 0, 1)
    f011 = shifted(0, 1, 1)
    f000 = shifted(0, 0, 0)
    if scheme == FIVE_POINT:
        return float(np.abs(f111 - f110 - f101 - f011 + 2.0 * f000).mean())
    if scheme != EIGHT_POINT:
        raise ValueError(f"unknown scheme {scheme!r}")
    f100 = shifted(1, 0, 0)
    f010 = shifted(0, 1, 0)
    f001 = shifted(0, 0, 1)
    return float(np.abs(f111 - f110 - f101 - f011 + f100 + f010 + f001 - f000).mean())


def interaction2(model, cond: ConditioningSet, v: int, i: int, j: int,
                 delta_i: float = DEFAULT_DELTA, delta_j: float = DEFAULT_DELTA,
                 mode: str = "prob") -> float:
    """Pairwise interaction of features (i, j) for transitions u -> v."""
    return mixed_diff2(_probe(model, v, mode), cond.covariates, i, j, delta_i, delta_j)


def interaction3(model, cond: ConditioningSet, v: int, i: int, j: int, k: int,
                 deltas: float | tuple[float, float, float] = DEFAULT_DELTA,
                 mode: str = "prob", scheme: str = EIGHT_POINT) -> float:
    """Triple interaction of features (i, j, k) for transitions u -> v."""
    if np.isscalar(deltas):
        deltas = (deltas, deltas, deltas)
    di, dj, dk = deltas
    return mixed_diff3(_probe(model, v, mode), cond.covariates, i, j, k, di, dj, dk, scheme)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class SensitivityReport:
    """Ranked per-feature (or pair/triple) values, descending, with stable
    tie-break by original index. Values are nonnegative by construction."""

    kind: str
    entries: list  # (label, value), sorted
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(v < 0 for _, v in self.entries):
            raise ValueError("report values must be nonnegative")

    def top(self, k: int | None = None) -> list:
        return self.entries if k is None else self.entries[:k]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for key in sorted(self.metadata):
            w.writerow([f"# {key}", self.metadata[key]])
        w.writerow(["rank", "label", "value"])
        for rank, (label, value) in enumerate(self.entries, start=1):
            w.writerow([rank, label, f"{value!r}"])
        return buf.getvalue()


def rank_report(values, labels, kind: str = "sensitivity", metadata: dict | None = None) -> SensitivityReport:
    """Descending sort with stable tie-break by original index."""
    values = [float(v) for v in values]
    labels = list(labels)
    if len(values) != len(labels):
        raise ValueError("values and labels must align")
    order = sorted(range(len(values)), key=lambda idx: (-values[idx], idx))
    meta = dict(metadata or {})
    if values and max(values) == 0.0:
        meta["degenerate"] = "all values are zero"
    return SensitivityReport(kind=kind, entries=[(labels[idx], values[idx]) for idx in order],
                             metadata=meta)


def sensitivity_report(model, cond: ConditioningSet, v: int,
                       schema: FeatureSchema | None = None) -> SensitivityReport:
    values = sensitivity_all(model, cond, v)
    labels = schema.column_names() if schema is not None else [f"x{j}" for j in range(len(values))]
    meta = {"u": STATE_NAMES[cond.u], "v": STATE_NAMES[v], "samples": len(cond)}
    return rank_report(values, labels, kind="sensitivity", metadata=meta)


def rank_pairs(model, cond: ConditioningSet, v: int, columns=None,
               delta: float = DEFAULT_DELTA, mode: str = "prob",
               schema: FeatureSchema | None = None) -> SensitivityReport:
    """All-pairs interaction scan; single- and double-shift evaluations are
    cached so the scan costs one probe per column plus one per pair."""
    X = cond.covariates
    fn = _probe(model, v, mode)
    cols = list(range(X.shape[1])) if columns is None else list(columns)
    names = schema.column_names() if schema is not None else [f"x{j}" for j in range(X.shape[1])]
    f0 = fn(X)
    singles = {}
    for c in cols:
        Xc = X.copy()
        Xc[:, c] += delta
        singles[c] = fn(Xc)
    labels, values = [], []
    for a, b in combinations(cols, 2):
        Xab = X.copy()
        Xab[:, a] += delta
        Xab[:, b] += delta
        values.append(float(np.abs(fn(Xab) - singles[a] - singles[b] + f0).mean()))
        labels.append(f"{names[a]} * {names[b]}")
    meta = {"u": STATE_NAMES[cond.u], "v": STATE_NAMES[v], "delta": delta,
            "mode": mode, "samples": len(cond)}
    return rank_report(values, labels, kind="pair", metadata=meta)


def rank_triples(model, cond: ConditioningSet, v: int, columns=None,
                 prefilter_m: int = 20, delta: float = DEFAULT_DELTA, mode: str = "prob",
                 scheme: str = EIGHT_POINT,
                 schema: FeatureSchema | None = None) -> SensitivityReport:
    """Triple-interaction scan over the top-m candidate columns by
    first-order sensitivity (the cubic enumeration is bounded by the
    prefilter). ``columns`` restricts the candidate set before filtering."""
    X = cond.covariates
    fn = _probe(model, v, mode)
    names = schema.column_names() if schema is not None else [f"x{j}" for j in range(X.shape[1])]
    candidates = list(range(X.shape[1])) if columns is None else [int(c) for c in columns]
    if len(candidates) > prefilter_m:
        sens = sensitivity_all(model, cond, v)
        candidates.sort(key=lambda c: (-sens[c], c))
        candidates = candidates[:prefilter_m]
    cols = candidates

    def shifted(shift_cols):
        Y = X.copy()
        for c in shift_cols:
            Y[:, c] += delta
        return fn(Y)

    f0 = shifted(())
    singles = {c: shifted((c,)) for c in cols}
    pairs = {frozenset(p): shifted(p) for p in combinations(cols, 2)}
    labels, values = [], []
    for a, b, c in combinations(cols, 3):
        f111 = shifted((a, b, c))
        if scheme == FIVE_POINT:
            d = f111 - pairs[frozenset((a, b))] - pairs[frozenset((a, c))] - pairs[frozenset((b, c))] + 2.0 * f0
        else:
            d = (f111 - pairs[frozenset((a, b))] - pairs[frozenset((a, c))] - pairs[frozenset((b, c))]
                 + singles[a] + singles[b] + singles[c] - f0)
        values.append(float(np.abs(d).mean()))
        labels.append(f"{names[a]} * {names[b]} * {names[c]}")
    meta = {"u": STATE_NAMES[cond.u], "v": STATE_NAMES[v], "delta": delta, "mode": mode,
            "scheme": scheme, "samples": len(cond), "prefilter_m": prefilter_m}
    return rank_report(values, labels, kind="triple", metadata=meta)


# ---------------------------------------------------------------------------
# Leave-one-out explanatory power
# ---------------------------------------------------------------------------


def leave_one_out_loss(model, data, columns) -> float:
    """Test loss with the given design columns overwritten by 0 (the training
    mean, in normalized space); the model itself is unchanged."""
    if isinstance(data, Panel):
        X, y = data.covariates, data.next_states
    else:
        X, y = data
    X = np.array(X, dtype=np.float64, copy=True)
    cols = [columns] if np.isscalar(columns) else list(columns)
    X[:, cols] = 0.0
    return nll_loss(model, (X, y))


def leave_one_out_report(model, data, schema: FeatureSchema,
                         fields: list[str] | None = None) -> SensitivityReport:
    """Per-variable leave-one-out losses plus the complete-model baseline.

    A "variable" is a raw field: all of its encoded columns (value, missing
    indicator, categorical levels) are zeroed together.
    """
    if isinstance(data, Panel):
        X, y = data.covariates, data.next_states
    else:
        X, y = data
    baseline = nll_loss(model, (X, y))
    groups = {}
    for idx, col in enumerate(schema.columns):
        groups.setdefault(col.group, []).append(idx)
    if fields is None:
        fields = [f.name for f in schema.raw_fields if f.kind != "state" and f.encode]
    labels, values = [], []
    for name in fields:
        labels.append(name)
        values.append(leave_one_out_loss(model, (X, y), groups[name]))
    report = rank_report(values, labels, kind="leave_one_out",
                         metadata={"baseline_loss": baseline, "samples": len(y)})
    return report


# ---------------------------------------------------------------------------
# Partial dependence
# ---------------------------------------------------------------------------


@dataclass
class PdpTable:
    """Model output over a grid of 1-3 varied features, all other covariates
    pinned at the dataset average (the "average borrower/loan")."""

    vary: list[str]
    grid_points: np.ndarray  # (n_points, len(vary)) in raw units
    probs: np.ndarray  # (n_points, K)
    out_of_range: np.ndarray  # (n_points,) bool
    source_state: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["# source_state", STATE_NAMES[self.source_state]])
        w.writerow(list(self.vary) + [f"p_{s}" for s in STATE_NAMES] + ["out_of_range"])
        for g, p, warn in zip(self.grid_points, self.probs, self.out_of_range):
            w.writerow([f"{x!r}" for x in g] + [f"{x!r}" for x in p] + [int(warn)])
        return buf.getvalue()


def partial_dependence(model, schema: FeatureSchema, stats: NormalizationStats,
                       vary: list[str], grids: list[np.ndarray],
                       state: int = CURRENT, base: np.ndarray | None = None) -> PdpTable:
    """Trace h(v, .) over a 1-3 feature grid in raw units.

    The base row defaults to the training means (all-zero normalized) withteh
    requested source state injected; grid coordinates outside the observed
    training range get a warning flag, not an error.
    """
    if not 1 <= len(vary) <= 3 or len(vary) != len(grids):
        raise ValueError("vary and grids must align and take 1 to 3 features")
    cols = [schema.column_index(name) for name in vary]
    if base is None:
        base = np.zeros(schema.num_columns)
    base = inject_state(base, schema, stats, state)[0]
    mesh = list(product(*[np.asarray(g, dtype=np.float64) for g in grids]))
    grid_points = np.array(mesh)
    X = np.tile(base, (len(mesh), 1))
    out_of_range = np.zeros(len(mesh), dtype=bool)
    for axis, c in enumerate(cols):
        raw = grid_points[:, axis]
        lo, hi = stats.col_min[c], stats.col_max[c]
        out_of_range |= (raw < lo) | (raw > hi)
        X[:, c] = (raw - stats.mean[c]) / stats.std[c] if stats.mask[c] else raw
    probs = model.predict_probs(X)
    return PdpTable(vary=list(vary), grid_points=grid_points, probs=probs,
                    out_of_range=out_of_range, source_state=state)
