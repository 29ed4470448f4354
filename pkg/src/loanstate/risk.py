"""Multi-period transition risk: one-step and frozen-covariate multi-period
matrices, pool-level Monte Carlo with an optionally simulated national rate,
closed-form Poisson/normal pool approximations, portfolio selection, loss
accounting, and ranked pool construction.

Pools are plain raw-record dicts (the same fields the input CSVs carry); the
model bundle's schema and normalization stats turn them into design rows, so
evolution happens in raw covariate units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .core import (
    CURRENT,
    DD30,
    DD60,
    DD90PLUS,
    FORECLOSURE,
    NUM_STATES,
    PAIDOFF,
    REO,
    STATE_NAMES,
    NON_ABSORBING_STATES,
    TransitionMatrix,
    absorbing_unit_rows,
    legality_mask,
    state_index,
)
from .pipeline import apply_normalization, encode_columns, inject_state
from .synth import NationalRateParams, scheduled_balance, simulate_national_rate

# Window length of the behavioral counters (months).
COUNTER_WINDOW = 12
DEFAULT_COUNTERS = {
    "times_current_12m": CURRENT,
    "times_30dd_12m": DD30,
    "times_60dd_12m": DD60,
    "times_90dd_12m": DD90PLUS,
    "times_fc_12m": FORECLOSURE,
}


@dataclass(frozen=True)
class AmortizationRule:
    balance: str = "current_balance"
    principal: str = "original_balance"
    rate: str = "original_rate"
    term: str = "original_term"
    age: str = "loan_age"


@dataclass(frozen=True)
class MacroBinding:
    """Feature bound to the simulated national rate: value = rate_field - r_t."""

    feature: str = "incentive"
    rate_field: str = "original_rate"


@dataclass(frozen=True)
class CovariateEvolver:
    """Deterministic per-month update rules in raw covariate space.

    Only age and the fixed-rate scheduled balance evolve by default; every
    other feature is frozen. The macro binding applies only when a rate model
    is supplied to the Monte Carlo simulator. Counter features are updated
    along simulated paths only (they depend on the random path, so the frozen
    multi-period projection keeps them fixed).
    """

    age_feature: str | None = "loan_age"
    amortization: AmortizationRule | None = field(default_factory=AmortizationRule)
    macro_binding: MacroBinding | None = field(default_factory=MacroBinding)
    counter_features: dict = field(default_factory=lambda: dict(DEFAULT_COUNTERS))
    burnout_feature: str | None = "burnout"

    def advance(self, cols: dict, months_ahead: int, national_rate: float | None = None) -> dict:
        """Covariates months_ahead months after the snapshot (frozen features
        pass through untouched)."""
        out = dict(cols)
        if self.age_feature is not None:
            age = np.asarray(cols[self.age_feature], dtype=np.float64) + months_ahead
            out[self.age_feature] = age
        if self.amortization is not None:
            a = self.amortization
            out[a.balance] = scheduled_balance(
                cols[a.principal], cols[a.rate], cols[a.term],
                np.asarray(cols[a.age], dtype=np.float64) + months_ahead,
            )
        if national_rate is not None and self.macro_binding is not None:
            b = self.macro_binding
            out[b.feature] = np.asarray(cols[b.rate_field], dtype=np.float64) - national_rate
        return out


FROZEN_EVOLVER = CovariateEvolver()


def pool_columns(records) -> dict:
    """Columnar view of raw-record dicts (missing values become NaN)."""
    records = list(records)
    keys = set()
    for r in records:
        keys.update(r.keys())
    cols = {}
    for k in keys:
        vals = [r.get(k) for r in records]
        if all(isinstance(v, (int, float, np.floating)) or v is None for v in vals):
            cols[k] = np.array([np.nan if v is None else float(v) for v in vals])
        else:
            cols[k] = np.array([None if v is None else str(v) for v in vals], dtype=object)
    return cols


def _design_rows(model, cols: dict, states: np.ndarray) -> np.ndarray:
    """Normalized design rows for columnar raw covariates."""
    schema, stats = model.schema, model.stats
    X, req_missing, _ = encode_columns(schema, cols, states)
    if req_missing.any():
        raise ValueError("pool records are missing required fields")
    return apply_normalization(stats, X)


def _clamp_rows(P: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Zero illegal transitions and renormalize each row."""
    legal = legality_mask()[states]
    P = np.where(legal, P, 0.0)
    return P / P.sum(axis=1, keepdims=True)


def one_step_matrices(model, cols: dict, n: int, legality_clamp: bool = False) -> np.ndarray:
    """(n, K, K) one-month transition matrices, one per loan.

    Row u of each matrix is the model forward pass with the state-feature
    group injected as u; absorbing rows are unit vectors.
    """
    placeholder = np.zeros(n, dtype=np.int64)
    X = _design_rows(model, cols, placeholder)
    out = np.zeros((n, NUM_STATES, NUM_STATES))
    for u in NON_ABSORBING_STATES:
        Xu = inject_state(X, model.schema, model.stats, u)
        P = model.predict_probs(Xu)
        if legality_clamp:
            P = _clamp_rows(P, np.full(n, u))
        out[:, u, :] = P
    for s in (REO, PAIDOFF):
        out[:, s, s] = 1.0
    return out


def one_step_matrix(model, record: dict, legality_clamp: bool = False) -> TransitionMatrix:
    """One-month conditional transition matrix for a single loan."""
    cols = pool_columns([record])
    m = one_step_matrices(model, cols, 1, legality_clamp)[0]
    return TransitionMatrix(absorbing_unit_rows(m / m.sum(axis=1, keepdims=True)))


def chain_product(matrices) -> np.ndarray:
    """Ordered product M(0) M(1) ... M(t-1) of KxK matrices."""
    out = np.eye(NUM_STATES)
    for m in matrices:
        out = out @ np.asarray(m, dtype=np.float64)
    return out


def multi_period_matrices(model, cols: dict, n: int, evolver: CovariateEvolver,
                          t: int, legality_clamp: bool = False) -> np.ndarray:
    """(n, K, K) products M(0) M(1) ... M(t-1) with frozen covariates.

    Economic covariates stay at their month-0 values; only the evolver's
    deterministic features advance. Path-dependent counters are frozen here
    (they evolve only along simulated paths).
    """
    if t < 1:
        raise ValueError("horizon must be >= 1")
    product = np.tile(np.eye(NUM_STATES), (n, 1, 1))
    for s in range(t):
        step_cols = evolver.advance(cols, s)
        M = one_step_matrices(model, step_cols, n, legality_clamp)
        product = np.einsum("nij,njk->nik", product, M)
    return product


def multi_period_frozen(model, record: dict, evolver: CovariateEvolver = FROZEN_EVOLVER,
                        t: int = 1, legality_clamp: bool = False) -> TransitionMatrix:
    """Frozen-covariate t-month transition matrix for a single loan."""
    cols = pool_columns([record])
    m = multi_period_matrices(model, cols, 1, evolver, t, legality_clamp)[0]
    return TransitionMatrix(absorbing_unit_rows(m / m.sum(axis=1, keepdims=True)))


# ---------------------------------------------------------------------------
# Pool-level distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoolDistribution:
    """Distribution of state counts for a pool at a horizon.

    kind "monte_carlo" stores the path-by-state count matrix; "poisson" and
    "normal" store closed-form mean/variance for one target state.
    """

    kind: str
    pool_size: int
    counts: np.ndarray | None = None  # (npaths, K) for monte_carlo
    target_state: int | None = None
    mean_value: float | None = None
    variance: float | None = None

    def __post_init__(self):
        if self.kind == "monte_carlo":
            counts = np.asarray(self.counts, dtype=np.int64)
            if counts.ndim != 2 or counts.shape[1] != NUM_STATES:
                raise ValueError("monte_carlo counts must be (npaths, K)")
            if not np.all(counts.sum(axis=1) == self.pool_size):
                raise ValueError("per-path counts must sum to the pool size")
            counts = counts.copy()
            counts.flags.writeable = False
            object.__setattr__(self, "counts", counts)
        elif self.kind in ("poisson", "normal"):
            if self.mean_value is None or self.variance is None or self.target_state is None:
                raise ValueError(f"{self.kind} distribution needs target_state, mean, variance")
        else:
            raise ValueError(f"unknown pool distribution kind {self.kind!r}")

    def mean(self, state: int | None = None) -> float:
        if self.kind == "monte_carlo":
            return float(self.counts[:, self._state(state)].mean())
        return float(self.mean_value)

    def std(self, state: int | None = None) -> float:
        if self.kind == "monte_carlo":
            return float(self.counts[:, self._state(state)].std())
        return float(np.sqrt(self.variance))

    def tail_prob(self, k: int, state: int | None = None) -> float:
        """P(count >= k)."""
        if self.kind == "monte_carlo":
            return float((self.counts[:, self._state(state)] >= k).mean())
        if self.kind == "poisson":
            return float(sps.poisson.sf(k - 1, self.mean_value))
        # normal approximation with continuity correction
        sd = max(np.sqrt(self.variance), 1e-300)
        return float(sps.norm.sf((k - 0.5 - self.mean_value) / sd))

    def _state(self, state: int | None) -> int:
        if state is None:
            if self.target_state is None:
                raise ValueError("state required for monte_carlo distributions")
            return self.target_state
        return state

    def counts_csv(self) -> str:
        if self.kind != "monte_carlo":
            raise ValueError("counts_csv applies to monte_carlo distributions")
        lines = ["path," + ",".join(STATE_NAMES)]
        for p, row in enumerate(self.counts):
            lines.append(f"{p}," + ",".join(str(int(c)) for c in row))
        return "\n".join(lines) + "\n"


def pool_poisson(probs, state: int = PAIDOFF, pool_size: int | None = None) -> PoolDistribution:
    """Poisson approximation: count ~ Poisson(sum of per-loan probabilities)."""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any((probs < 0) | (probs > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return PoolDistribution(
        kind="poisson", pool_size=pool_size or len(probs), target_state=state,
        mean_value=float(probs.sum()), variance=float(probs.sum()),
    )


def pool_normal(probs, state: int = PAIDOFF, pool_size: int | None = None) -> PoolDistribution:
    """CLT approximation: mean sum(p), variance sum(p(1-p))."""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any((probs < 0) | (probs > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return PoolDistribution(
        kind="normal", pool_size=pool_size or len(probs), target_state=state,
        mean_value=float(probs.sum()), variance=float((probs * (1 - probs)).sum()),
    )


def simulate_pool_mc(model, records, horizon: int, npaths: int, seed: int,
                     evolver: CovariateEvolver = FROZEN_EVOLVER,
                     rate_model: NationalRateParams | None = None,
                     legality_clamp: bool = True) -> PoolDistribution:
    """Monte Carlo distribution of pool state counts at the horizon.

    Each path draws one national-rate trajectory shared by every loan in the
    pool (this induces the correlated behavior of pool-level risk); loans then
    evolve month by month, sampling next states from the model's one-step
    rows and stopping at absorption. Deterministic per (seed, model, pool).
    """
    if npaths < 1:
        raise ValueError("npaths must be >= 1")
    records = list(records)
    n = len(records)
    counts = np.zeros((npaths, NUM_STATES), dtype=np.int64)
    shared = _PoolSimShared(model, pool_columns(records), n, evolver, rate_model, legality_clamp)
    for p in range(npaths):
        states, _ = _simulate_one_path(shared, horizon, seed, p)
        counts[p] = np.bincount(states, minlength=NUM_STATES)
    return PoolDistribution(kind="monte_carlo", pool_size=n, counts=counts)


def simulate_pool_outcomes(model, records, horizon: int, seed: int, path_index: int = 0,
                           evolver: CovariateEvolver = FROZEN_EVOLVER,
                           rate_model: NationalRateParams | None = None,
                           legality_clamp: bool = True):
    """One simulated path: (final states, months delinquent) per loan, for
    loss accounting and realized-outcome comparisons."""
    records = list(records)
    shared = _PoolSimShared(model, pool_columns(records), len(records), evolver,
                            rate_model, legality_clamp)
    return _simulate_one_path(shared, horizon, seed, path_index)


class _PoolSimShared:
    """Per-pool precomputation shared across MC paths. In frozen mode the
    month-0 transition rows are path-independent and cached."""

    def __init__(self, model, base_cols, n, evolver, rate_model, legality_clamp):
        self.model = model
        self.base_cols = base_cols
        self.n = n
        self.evolver = evolver
        self.rate_model = rate_model if evolver.macro_binding is not None else None
        self.legality_clamp = legality_clamp
        self.states0 = initial_states(base_cols, n)
        self.counter_feats = {
            f: s for f, s in evolver.counter_features.items() if f in base_cols
        }
        self.burnout0 = (
            np.asarray(base_cols[evolver.burnout_feature], dtype=np.float64)
            if evolver.burnout_feature in base_cols
            else None
        )
        self.frozen_p0 = None
        if self.rate_model is None:
            self.frozen_p0 = self._transition_rows(base_cols, self.states0)

    def _transition_rows(self, cols, states):
        P = self.model.predict_probs(_design_rows(self.model, cols, states))
        if self.legality_clamp:
            P = _clamp_rows(P, states)
        return P


def _simulate_one_path(shared: _PoolSimShared, horizon: int, seed: int, p: int):
    n = shared.n
    rng_loans = np.random.default_rng(np.random.SeedSequence([seed, p, 0]))
    rng_macro = np.random.default_rng(np.random.SeedSequence([seed, p, 1]))
    rate_path = (
        simulate_national_rate(shared.rate_model, horizon, rng_macro)
        if shared.rate_model is not None
        else None
    )
    states = shared.states0.copy()
    burnout_add = np.zeros(n)
    dd90_run = np.where(states == DD90PLUS, 3.0, 0.0)
    window: list[np.ndarray] = []  # simulated states, most recent last
    uniforms = rng_loans.random((horizon, n))
    for t in range(horizon):
        active = ~np.isin(states, (REO, PAIDOFF))
        if t == 0 and shared.frozen_p0 is not None:
            P = shared.frozen_p0
            incentive = shared.base_cols.get(
                shared.evolver.macro_binding.feature if shared.evolver.macro_binding else None
            )
        else:
            cols_t = dict(
                shared.evolver.advance(
                    shared.base_cols, t,
                    national_rate=None if rate_path is None else rate_path[t],
                )
            )
            for feat, tracked in shared.counter_feats.items():
                cols_t[feat] = _blended_counter(shared.base_cols[feat], window, tracked, t)
            if shared.burnout0 is not None:
                cols_t[shared.evolver.burnout_feature] = shared.burnout0 + burnout_add
            P = shared._transition_rows(cols_t, states)
            incentive = (
                cols_t.get(shared.evolver.macro_binding.feature)
                if shared.evolver.macro_binding is not None
                else None
            )
        nxt = (uniforms[t][:, None] > P.cumsum(axis=1)).sum(axis=1)
        nxt = np.minimum(nxt, NUM_STATES - 1)
        nxt = np.where(active, nxt, states)  # absorbed loans stay put
        if rate_path is not None and shared.burnout0 is not None and incentive is not None:
            burnout_add = burnout_add + np.where(
                active & (np.asarray(incentive, dtype=np.float64) > 0), 1.0, 0.0
            )
        dd90_run = np.where(nxt == DD90PLUS, np.where(dd90_run >= 3, dd90_run + 1, 3.0), 0.0)
        window.append(states.copy())
        if len(window) > COUNTER_WINDOW:
            window.pop(0)
        states = nxt
    return states, _months_delinquent(states, dd90_run)


def initial_states(cols: dict, n: int) -> np.ndarray:
    """Current states of a columnar pool (defaults to Current when absent)."""
    if "state" not in cols:
        return np.full(n, CURRENT, dtype=np.int64)
    vals = cols["state"]
    if vals.dtype == object:
        return np.array([state_index(v) for v in vals], dtype=np.int64)
    return vals.astype(np.int64)


def _blended_counter(initial, window: list, tracked: int, t: int) -> np.ndarray:
    """Counter over the 12-month window: exact over simulated months, with the
    unknown pre-simulation remainder decayed linearly from the snapshot value."""
    simulated = 0.0
    if window:
        recent = np.stack(window[-COUNTER_WINDOW:], axis=0)
        simulated = (recent == tracked).sum(axis=0).astype(np.float64)
    weight = max(0, COUNTER_WINDOW - min(t, COUNTER_WINDOW)) / COUNTER_WINDOW
    return np.asarray(initial, dtype=np.float64) * weight + simulated


def _months_delinquent(states: np.ndarray, dd90_run: np.ndarray) -> np.ndarray:
    base = np.zeros(len(states))
    base[states == DD30] = 1.0
    base[states == DD60] = 2.0
    base[states == DD90PLUS] = np.maximum(dd90_run[states == DD90PLUS], 3.0)
    return base


# ---------------------------------------------------------------------------
# Portfolio selection and loss accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PortfolioSelection:
    loan_ids: tuple
    indices: np.ndarray
    probabilities: np.ndarray  # P(current at horizon), aligned with loan_ids


def current_probabilities(model, records, horizon: int = 1,
                          evolver: CovariateEvolver = FROZEN_EVOLVER) -> np.ndarray:
    """Per-loan probability of being current at the horizon, from each loan's
    own current state under the frozen-covariate projection."""
    records = list(records)
    cols = pool_columns(records)
    states = initial_states(cols, len(records))
    product = multi_period_matrices(model, cols, len(records), evolver, horizon)
    return product[np.arange(len(records)), states, CURRENT]


def select_portfolio(model, records, n_select: int, horizon: int = 1,
                     evolver: CovariateEvolver = FROZEN_EVOLVER) -> PortfolioSelection:
    """The N loans most likely to remain current, ranked descending with a
    stable loan_id tie-break."""
    records = list(records)
    if not 0 <= n_select <= len(records):
        raise ValueError("n_select must lie in [0, pool size]")
    probs = current_probabilities(model, records, horizon, evolver)
    ids = [str(r.get("loan_id", i)) for i, r in enumerate(records)]
    order = sorted(range(len(records)), key=lambda i: (-probs[i], ids[i]))
    chosen = order[:n_select]
    return PortfolioSelection(
        loan_ids=tuple(ids[i] for i in chosen),
        indices=np.array(chosen, dtype=np.int64),
        probabilities=probs[chosen],
    )


LOSS_WEIGHT_PREPAY = 0.05
LOSS_WEIGHT_FORECLOSURE = 0.40
LOSS_WEIGHT_REO = 0.40
MONTHS_DELINQUENT_FLOOR = {DD30: 1.0, DD60: 2.0, DD90PLUS: 3.0}


def portfolio_loss(states, notionals, months_delinquent=None) -> float:
    """Total loss: prepay 5% of notional, foreclosure/REO 40%, m months
    delinquent m/360 of notional, current 0."""
    states = np.asarray(states, dtype=np.int64)
    notionals = np.asarray(notionals, dtype=np.float64)
    if months_delinquent is None:
        months_delinquent = np.array([MONTHS_DELINQUENT_FLOOR.get(int(s), 0.0) for s in states])
    else:
        months_delinquent = np.asarray(months_delinquent, dtype=np.float64)
    weights = np.zeros(len(states))
    weights[states == PAIDOFF] = LOSS_WEIGHT_PREPAY
    weights[states == FORECLOSURE] = LOSS_WEIGHT_FORECLOSURE
    weights[states == REO] = LOSS_WEIGHT_REO
    delinq = np.isin(states, (DD30, DD60, DD90PLUS))
    weights[delinq] = months_delinquent[delinq] / 360.0
    return float((notionals * weights).sum())


def make_ranked_pools(records, key_values, pool_size: int):
    """Sort descending by key (stable by loan_id) and chunk into consecutive
    pools; the last pool may be short."""
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    records = list(records)
    key_values = np.asarray(key_values, dtype=np.float64)
    ids = [str(r.get("loan_id", i)) for i, r in enumerate(records)]
    order = sorted(range(len(records)), key=lambda i: (-key_values[i], ids[i]))
    pools = []
    for start in range(0, len(order), pool_size):
        chunk = order[start : start + pool_size]
        pools.append([records[i] for i in chunk])
    return pools


def portfolio_comparison_curve(model_a, model_b, records, outcome_states,
                               n_grid, horizon: int = 1,
                               evolver: CovariateEvolver = FROZEN_EVOLVER):
    """Realized non-current counts of the portfolios each model selects, per
    portfolio size N. Both curves share the realized outcomes, so they meet
    at N = 0 and N = pool size by construction."""
    records = list(records)
    outcome_states = np.asarray(outcome_states, dtype=np.int64)
    if len(outcome_states) != len(records):
        raise ValueError("one realized outcome per loan is required")
    probs_a = current_probabilities(model_a, records, horizon, evolver)
    probs_b = current_probabilities(model_b, records, horizon, evolver)
    ids = [str(r.get("loan_id", i)) for i, r in enumerate(records)]
    order_a = sorted(range(len(records)), key=lambda i: (-probs_a[i], ids[i]))
    order_b = sorted(range(len(records)), key=lambda i: (-probs_b[i], ids[i]))
    not_current = (outcome_states != CURRENT).astype(np.int64)
    cum_a = np.concatenate([[0], np.cumsum(not_current[order_a])])
    cum_b = np.concatenate([[0], np.cumsum(not_current[order_b])])
    rows = []
    for n_sel in n_grid:
        rows.append({"N": int(n_sel), "model_a": int(cum_a[n_sel]), "model_b": int(cum_b[n_sel])})
    return rows
