"""Synthetic loan panels from a known nonlinear ground-truth transition
function, so every estimator in the repository has an oracle.

The generator is month-major: statics are drawn per loan, then for each month
the dynamic covariates of all active loans are built, the ground truth is
evaluated, next states are sampled, and the per-region lagged default/prepay
rates are reduced over the pool before the next month starts (no look-ahead).
Per-loan RNG streams are keyed by (seed, purpose, loan index), so output is
byte-identical for identical (config, seed) and prefix-stable in the horizon.

Nothing here tries to match real-world mortgage distributions; the defaults
are loosely shaped desk-scale generators for verification, not realism.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .core import (
    CURRENT,
    FORECLOSURE,
    NUM_STATES,
    PAIDOFF,
    REO,
    STATE_NAMES,
    FeatureSchema,
    Panel,
    RawField,
    legality_mask,
    state_index,
)
from .pipeline import encode_columns

# Stream purposes for SeedSequence keys.
_STATIC, _TRANSITION, _MISSING, _NATIONAL, _REGION = range(5)


# ---------------------------------------------------------------------------
# Macro processes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NationalRateParams:
    """AR(p) national mortgage rate, in percent.

    The default intercept/lag coefficients are the published AR(4) fit for the
    national rate, read as (intercept, lag coefficients). That reading leaves
    the noise scale and starting level unstated, so both are configurable and
    nothing about the default's long-run level is asserted anywhere.
    """

    intercept: float = 0.6687
    ar_coeffs: tuple[float, ...] = (1.3514, -0.5131, 0.2410, -0.0838)
    noise_scale: float = 0.15
    initial: float = 6.0
    enforce_stationarity: bool = False

    def __post_init__(self):
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        object.__setattr__(self, "ar_coeffs", tuple(float(c) for c in self.ar_coeffs))

    def spectral_radius(self) -> float:
        p = len(self.ar_coeffs)
        companion = np.zeros((p, p))
        companion[0] = self.ar_coeffs
        if p > 1:
            companion[1:, :-1] = np.eye(p - 1)
        return float(np.abs(np.linalg.eigvals(companion)).max())


# Stable default for panel generation (the published AR(4) numbers imply an
# implausible long-run level, so the generator does not use them by default).
STABLE_NATIONAL = NationalRateParams(
    intercept=0.30, ar_coeffs=(0.95,), noise_scale=0.12, initial=6.0
)


@dataclass(frozen=True)
class RegionParams:
    unemployment_mean: float = 6.0
    unemployment_ar1: float = 0.95
    unemployment_noise: float = 0.25
    unemployment_initial_spread: float = 2.0
    hpi_drift: float = 0.004
    hpi_vol: float = 0.015

    def __post_init__(self):
        if self.unemployment_noise < 0 or self.hpi_vol < 0:
            raise ValueError("noise scales must be >= 0")


@dataclass(frozen=True)
class MacroPath:
    """Per-month national rate plus per-region unemployment and house-price
    index (origination month = 1.0)."""

    months: int
    national_rate: np.ndarray  # (months,)
    unemployment: np.ndarray  # (regions, months)
    hpi: np.ndarray  # (regions, months)

    def __post_init__(self):
        for name in ("national_rate", "unemployment", "hpi"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if np.any(self.hpi <= 0):
            raise ValueError("hpi must stay positive")
        if self.national_rate.shape != (self.months,):
            raise ValueError("national_rate length must equal months")


def simulate_national_rate(params: NationalRateParams, horizon: int, rng) -> np.ndarray:
    """One sampled national-rate path of the configured AR process."""
    if params.enforce_stationarity and params.spectral_radius() >= 1.0:
        raise ValueError(
            f"national rate AR is explosive (spectral radius {params.spectral_radius():.4f})"
        )
    p = len(params.ar_coeffs)
    history = [params.initial] * p
    rate = np.empty(horizon)
    shocks = rng.normal(size=horizon) * params.noise_scale
    for t in range(horizon):
        r = params.intercept + sum(c * history[i] for i, c in enumerate(params.ar_coeffs)) + shocks[t]
        rate[t] = r
        history = [r] + history[:-1]
    return rate


def simulate_macro(config: "SyntheticConfig", seed: int) -> MacroPath:
    """Simulate the configured macro processes; deterministic given seed."""
    T = config.horizon
    rng_nat = np.random.default_rng(np.random.SeedSequence([seed, _NATIONAL]))
    rate = simulate_national_rate(config.national, T, rng_nat)

    reg = config.region
    R = config.num_regions
    unemp = np.empty((R, T))
    hpi = np.empty((R, T))
    for r in range(R):
        rng_u = np.random.default_rng(np.random.SeedSequence([seed, _REGION, r, 0]))
        rng_h = np.random.default_rng(np.random.SeedSequence([seed, _REGION, r, 1]))
        u = reg.unemployment_mean + reg.unemployment_initial_spread * rng_u.normal()
        u_shocks = rng_u.normal(size=T) * reg.unemployment_noise
        h_shocks = rng_h.normal(size=T) * reg.hpi_vol
        level = 1.0
        for t in range(T):
            unemp[r, t] = u
            hpi[r, t] = level
            u = reg.unemployment_mean + reg.unemployment_ar1 * (u - reg.unemployment_mean) + u_shocks[t]
            level = level * np.exp(reg.hpi_drift + h_shocks[t])
    return MacroPath(months=T, national_rate=rate, unemployment=unemp, hpi=hpi)


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TruthTerm:
    """One logit contribution: coef * prod of standardized features, or a
    hinge coef * max(0, z - knot) for a single feature."""

    features: tuple[str, ...]
    next_state: int
    coef: float
    knot: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        ns = self.next_state
        object.__setattr__(self, "next_state", state_index(ns) if isinstance(ns, str) else int(ns))
        if self.knot is not None and len(self.features) != 1:
            raise ValueError("hinge terms take exactly one feature")
        if not 1 <= len(self.features) <= 3:
            raise ValueError("terms take 1 to 3 features")


@dataclass(frozen=True)
class GroundTruthModel:
    """Known transition function: per-state base logits plus linear, pairwise,
    triple, and hinge terms over standardized covariates, masked to legal
    transitions (illegal next states get probability exactly 0)."""

    schema: FeatureSchema
    state_base_logits: np.ndarray = None  # (K, K): from-state -> next-state
    terms: tuple[TruthTerm, ...] = ()
    standardize: dict = field(default_factory=dict)  # column name -> (center, scale)

    def __post_init__(self):
        base = self.state_base_logits
        base = np.zeros((NUM_STATES, NUM_STATES)) if base is None else np.asarray(base, float)
        if base.shape != (NUM_STATES, NUM_STATES):
            raise ValueError("state_base_logits must be KxK")
        base = base.copy()
        base.flags.writeable = False
        object.__setattr__(self, "state_base_logits", base)
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "_mask", legality_mask())
        object.__setattr__(
            self,
            "_term_plan",
            tuple(
                (
                    tuple(self.schema.column_index(name) for name in t.features),
                    tuple(self.standardize.get(name, (0.0, 1.0)) for name in t.features),
                    t.next_state,
                    t.coef,
                    t.knot,
                )
                for t in self.terms
            ),
        )

    def logits_batch(self, X: np.ndarray, states: np.ndarray) -> np.ndarray:
        """Masked logits; illegal next states are -inf."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        states = np.asarray(states, dtype=np.int64)
        if X.shape[1] != self.schema.num_columns:
            raise ValueError(
                f"expected {self.schema.num_columns} columns, got {X.shape[1]}"
            )
        logits = self.state_base_logits[states].copy()
        for cols, scales, v, coef, knot in self._term_plan:
            z = np.ones(len(X))
            for c, (center, scale) in zip(cols, scales):
                z = z * (X[:, c] - center) / scale
            if knot is not None:
                z = np.maximum(z - knot, 0.0)
            logits[:, v] += coef * z
        logits[~self._mask[states]] = -np.inf
        return logits

    def probs_batch(self, X: np.ndarray, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=np.int64)
        logits = self.logits_batch(X, states)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        P = e / e.sum(axis=1, keepdims=True)
        # absorbing states keep their unit vector
        for s in (REO, PAIDOFF):
            sel = states == s
            if sel.any():
                P[sel] = 0.0
                P[sel, s] = 1.0
        return P


def ground_truth_probs(model: GroundTruthModel, covariates: np.ndarray, state: int) -> np.ndarray:
    """Probability vector over the 7 states for one encoded covariate row."""
    return model.probs_batch(np.asarray(covariates, dtype=np.float64)[None, :], np.array([state]))[0]


# Empirical monthly transition percentages for the full dataset (legal cells
# only); used as base logits so zero-covariate panels look like real books.
_BASE_PCT = {
    CURRENT: {"Current": 95.2, "DD30": 1.6, "Foreclosure": 0.002, "REO": 0.0004, "PaidOff": 3.2},
    state_index("DD30"): {"Current": 34.2, "DD30": 44.5, "DD60": 19.3, "Foreclosure": 0.02, "REO": 0.003, "PaidOff": 1.84},
    state_index("DD60"): {"Current": 12.0, "DD30": 16.7, "DD60": 34.5, "DD90plus": 33.8, "Foreclosure": 1.9, "REO": 0.009, "PaidOff": 1.1},
    state_index("DD90plus"): {"Current": 4.1, "DD30": 1.4, "DD60": 2.5, "DD90plus": 80.4, "Foreclosure": 9.9, "REO": 0.3, "PaidOff": 1.3},
    FORECLOSURE: {"Current": 1.9, "DD30": 0.3, "DD60": 0.1, "DD90plus": 6.8, "Foreclosure": 86.8, "REO": 2.6, "PaidOff": 1.3},
}


def base_logits_from_percentages(table: dict | None = None) -> np.ndarray:
    table = _BASE_PCT if table is None else table
    base = np.zeros((NUM_STATES, NUM_STATES))
    for u, row in table.items():
        for name, pct in row.items():
            base[u, state_index(name)] = np.log(pct)
    return base


# Centers/scales that standardize the default generator's raw covariates.
TRUTH_STANDARDIZE = {
    "fico": (707.0, 60.0),
    "original_ltv": (74.0, 15.0),
    "current_balance": (160_000.0, 90_000.0),
    "incentive": (0.5, 1.3),
    "hpi_change": (0.05, 0.12),
    "unemployment": (6.0, 1.5),
    "burnout": (6.0, 6.0),
    "times_30dd_12m": (0.5, 2.0),
    "times_current_12m": (6.0, 4.0),
    "region_default_rate_lag": (0.002, 0.003),
}

# The planted interaction structure the analysis estimators must recover.
PLANTED_PAIR = ("fico", "incentive")
PLANTED_TRIPLE = ("fico", "incentive", "original_ltv")
DOMINANT_VARIABLE = "unemployment"
NOISE_VARIABLE = "noise"


def default_ground_truth(schema: FeatureSchema) -> GroundTruthModel:
    """Default truth: empirical-shaped base rates, strong unemployment effect,
    a hinge on the prepayment incentive, one planted pairwise and one planted
    triple interaction on the prepayment logit."""
    terms = (
        TruthTerm(("incentive",), PAIDOFF, 0.8, knot=0.0),
        TruthTerm(PLANTED_PAIR, PAIDOFF, 1.3),
        TruthTerm(PLANTED_TRIPLE, PAIDOFF, 1.1),
        TruthTerm(("current_balance",), PAIDOFF, -0.5),
        TruthTerm(("hpi_change",), PAIDOFF, 0.3),
        TruthTerm((DOMINANT_VARIABLE,), PAIDOFF, -0.5),
        TruthTerm(("burnout",), PAIDOFF, -0.25),
        TruthTerm((DOMINANT_VARIABLE,), state_index("DD30"), 0.9),
        TruthTerm((DOMINANT_VARIABLE,), state_index("DD30"), 0.5, knot=0.5),
        TruthTerm((DOMINANT_VARIABLE, "fico"), state_index("DD30"), -0.45),
        TruthTerm(("fico",), state_index("DD30"), -0.5),
        TruthTerm(("times_30dd_12m",), state_index("DD30"), 0.4),
        TruthTerm(("times_30dd_12m",), state_index("DD30"), 0.5, knot=0.8),
        TruthTerm(("times_30dd_12m", "current_balance"), state_index("DD30"), 0.35),
        TruthTerm(("times_30dd_12m", "fico"), state_index("DD30"), -0.3),
        TruthTerm(("current_balance",), state_index("DD30"), 0.3),
        TruthTerm(("original_ltv",), state_index("DD30"), 0.35, knot=0.5),
        TruthTerm(("region_default_rate_lag",), state_index("DD30"), 0.2),
        TruthTerm((DOMINANT_VARIABLE,), state_index("DD60"), 0.5),
        TruthTerm((DOMINANT_VARIABLE,), FORECLOSURE, 0.5),
        TruthTerm(("times_current_12m",), CURRENT, 0.2),
    )
    return GroundTruthModel(
        schema=schema,
        state_base_logits=base_logits_from_percentages(),
        terms=terms,
        standardize=dict(TRUTH_STANDARDIZE),
    )


# ---------------------------------------------------------------------------
# Schema and config
# ---------------------------------------------------------------------------

DEFAULT_VINTAGES = ("2003", "2004", "2005", "2006")


def default_schema(num_regions: int = 4, vintages: tuple[str, ...] = DEFAULT_VINTAGES) -> FeatureSchema:
    regions = tuple(f"R{r}" for r in range(num_regions))
    static = [
        RawField("fico", "numeric", required=True),
        RawField("dti", "numeric"),  # optional: carries a missing indicator
        RawField("noise", "numeric", required=True),
        RawField("original_balance", "numeric", required=True),
        # kept in the tables for the amortization rules, but not a design
        # column: the incentive column already carries the rate information
        RawField("original_rate", "numeric", required=True, encode=False),
        RawField("original_ltv", "numeric", required=True),
        RawField("original_term", "numeric", required=True),
        RawField("region", "categorical", levels=regions),
        RawField("vintage", "categorical", levels=vintages),
    ]
    dynamic = [
        RawField(name, "numeric", required=True, group="dynamic")
        for name in (
            "loan_age",
            "current_balance",
            "incentive",
            "hpi_change",
            "unemployment",
            "times_current_12m",
            "times_30dd_12m",
            "times_60dd_12m",
            "times_90dd_12m",
            "times_fc_12m",
            "burnout",
            "region_default_rate_lag",
            "region_prepay_rate_lag",
        )
    ]
    return FeatureSchema(raw_fields=tuple(static + dynamic + [RawField("status", "state", group="dynamic")]))


@dataclass(frozen=True)
class SyntheticConfig:
    num_loans: int = 1000
    num_regions: int = 4
    horizon: int = 36
    seed: int = 0
    missing_rate: float = 0.05  # per optional feature, per loan
    national: NationalRateParams = field(default_factory=lambda: STABLE_NATIONAL)
    region: RegionParams = field(default_factory=RegionParams)
    vintages: tuple[str, ...] = DEFAULT_VINTAGES
    truth_overrides: tuple[TruthTerm, ...] | None = None  # None -> default truth

    def __post_init__(self):
        if self.num_loans < 0:
            raise ValueError("num_loans must be >= 0")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 <= self.missing_rate <= 1.0:
            raise ValueError("missing_rate must lie in [0, 1]")

    def schema(self) -> FeatureSchema:
        return default_schema(self.num_regions, self.vintages)

    def ground_truth(self) -> GroundTruthModel:
        schema = self.schema()
        if self.truth_overrides is None:
            return default_ground_truth(schema)
        return GroundTruthModel(
            schema=schema,
            state_base_logits=base_logits_from_percentages(),
            terms=self.truth_overrides,
            standardize=dict(TRUTH_STANDARDIZE),
        )

    @classmethod
    def from_json_dict(cls, d: dict) -> "SyntheticConfig":
        kwargs = {}
        for key in ("num_loans", "num_regions", "horizon", "seed", "missing_rate"):
            if key in d:
                kwargs[key] = d[key]
        if "vintages" in d:
            kwargs["vintages"] = tuple(str(v) for v in d["vintages"])
        if "national" in d:
            kwargs["national"] = NationalRateParams(**d["national"])
        if "region" in d:
            kwargs["region"] = RegionParams(**d["region"])
        if "truth_terms" in d:
            kwargs["truth_overrides"] = tuple(
                TruthTerm(tuple(t["features"]), t["next_state"], t["coef"], t.get("knot"))
                for t in d["truth_terms"]
            )
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Panel generation
# ---------------------------------------------------------------------------


def scheduled_balance(principal, annual_rate_pct, term_months, age_months):
    """Outstanding balance of a fixed-rate annuity after age_months payments."""
    principal = np.asarray(principal, dtype=np.float64)
    rate = np.asarray(annual_rate_pct, dtype=np.float64) / 1200.0
    term = np.asarray(term_months, dtype=np.float64)
    age = np.asarray(age_months, dtype=np.float64)
    age = np.minimum(age, term)
    growth = (1.0 + rate) ** age
    full = (1.0 + rate) ** term
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(rate > 0, (full - growth) / (full - 1.0), (term - age) / term)
    return principal * frac


@dataclass
class SyntheticPanel:
    """Generator output: the encoded panel plus the raw columns needed to emit
    the static/monthly CSVs, the truth, and the macro path."""

    schema: FeatureSchema
    panel: Panel
    static_columns: dict
    monthly_columns: dict
    truth: GroundTruthModel
    macro: MacroPath
    config: SyntheticConfig

    def write_csv(self, static_path, monthly_path):
        static_fields = [f.name for f in self.schema.raw_fields if f.group == "static"]
        with open(static_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["loan_id"] + static_fields)
            n = len(self.static_columns["loan_id"])
            for i in range(n):
                row = [self.static_columns["loan_id"][i]]
                for name in static_fields:
                    row.append(_csv_cell(self.static_columns[name][i]))
                w.writerow(row)
        dynamic_fields = [
            f.name for f in self.schema.raw_fields if f.group == "dynamic" and f.kind == "numeric"
        ]
        with open(monthly_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["loan_id", "period"] + dynamic_fields + ["state", "next_state"])
            n = len(self.monthly_columns["loan_id"])
            for i in range(n):
                row = [self.monthly_columns["loan_id"][i], self.monthly_columns["period"][i]]
                for name in dynamic_fields:
                    row.append(_csv_cell(self.monthly_columns[name][i]))
                row.append(STATE_NAMES[self.monthly_columns["state"][i]])
                row.append(STATE_NAMES[self.monthly_columns["next_state"][i]])
                w.writerow(row)


def _csv_cell(v):
    if isinstance(v, float):
        return "" if np.isnan(v) else repr(float(v))
    return v


def _draw_statics(config: SyntheticConfig, schema: FeatureSchema):
    N = config.num_loans
    cols = {
        "loan_id": np.array([f"L{i:06d}" for i in range(N)], dtype=object),
        "fico": np.empty(N),
        "dti": np.empty(N),
        "noise": np.empty(N),
        "original_balance": np.empty(N),
        "original_rate": np.empty(N),
        "original_ltv": np.empty(N),
        "original_term": np.empty(N),
        "region": np.empty(N, dtype=object),
        "vintage": np.empty(N, dtype=object),
    }
    region_idx = np.empty(N, dtype=np.int64)
    for n in range(N):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, _STATIC, n]))
        cols["fico"][n] = np.clip(rng.normal(707, 60), 300, 850)
        cols["dti"][n] = np.clip(rng.normal(35, 8), 8, 60)
        cols["noise"][n] = rng.normal()
        cols["original_balance"][n] = np.exp(rng.normal(11.98, 0.55))
        cols["original_rate"][n] = np.clip(rng.normal(6.0, 1.2), 2.0, 12.0)
        cols["original_ltv"][n] = np.clip(rng.normal(74, 15), 5, 150)
        cols["original_term"][n] = rng.choice([180.0, 240.0, 360.0], p=[0.15, 0.10, 0.75])
        region_idx[n] = rng.integers(0, config.num_regions)
        cols["region"][n] = f"R{region_idx[n]}"
        cols["vintage"][n] = str(rng.choice(config.vintages))
        miss = np.random.default_rng(np.random.SeedSequence([config.seed, _MISSING, n]))
        if miss.random() < config.missing_rate:
            cols["dti"][n] = np.nan
    return cols, region_idx


def generate_panel(config: SyntheticConfig, truth: GroundTruthModel | None = None) -> SyntheticPanel:
    """Simulate the pool month by month from the ground truth."""
    schema = config.schema()
    if truth is None:
        truth = config.ground_truth()
    elif truth.schema != schema:
        raise ValueError("truth schema does not match the config schema")
    macro = simulate_macro(config, config.seed)
    N, T, R = config.num_loans, config.horizon, config.num_regions

    static_cols, region_idx = _draw_statics(config, schema)
    uniforms = np.empty((N, T))
    for n in range(N):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, _TRANSITION, n]))
        uniforms[n] = rng.random(T)

    states_path = np.full((N, T + 1), -1, dtype=np.int64)
    states_path[:, 0] = CURRENT
    active = np.ones(N, dtype=bool)
    burnout = np.zeros(N)
    lag_default = np.zeros(R)
    lag_prepay = np.zeros(R)

    dynamic_names = [
        f.name for f in schema.raw_fields if f.group == "dynamic" and f.kind == "numeric"
    ]
    x_blocks, id_blocks, period_blocks, state_blocks, next_blocks = [], [], [], [], []
    monthly = {name: [] for name in ["loan_id", "period", "state", "next_state"] + dynamic_names}

    for t in range(T):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        reg = region_idx[idx]
        states_t = states_path[idx, t]
        window = states_path[idx, max(0, t - 12) : t] if t > 0 else np.zeros((len(idx), 0), np.int64)
        dyn = {
            "loan_age": np.full(len(idx), float(t)),
            "current_balance": scheduled_balance(
                static_cols["original_balance"][idx],
                static_cols["original_rate"][idx],
                static_cols["original_term"][idx],
                t,
            ),
            "incentive": static_cols["original_rate"][idx] - macro.national_rate[t],
            "hpi_change": macro.hpi[reg, t] - 1.0,
            "unemployment": macro.unemployment[reg, t],
            "times_current_12m": (window == CURRENT).sum(axis=1).astype(float),
            "times_30dd_12m": (window == state_index("DD30")).sum(axis=1).astype(float),
            "times_60dd_12m": (window == state_index("DD60")).sum(axis=1).astype(float),
            "times_90dd_12m": (window == state_index("DD90plus")).sum(axis=1).astype(float),
            "times_fc_12m": (window == FORECLOSURE).sum(axis=1).astype(float),
            "burnout": burnout[idx].copy(),
            "region_default_rate_lag": lag_default[reg],
            "region_prepay_rate_lag": lag_prepay[reg],
        }
        colmap = {name: static_cols[name][idx] for name in static_cols if name != "loan_id"}
        colmap.update(dyn)
        X, req_missing, _ = encode_columns(schema, colmap, states_t)
        if req_missing.any():
            raise AssertionError("generator produced a missing required value")
        P = truth.probs_batch(X, states_t)
        nxt = (uniforms[idx, t][:, None] > P.cumsum(axis=1)).sum(axis=1)
        nxt = np.minimum(nxt, NUM_STATES - 1)

        x_blocks.append(X)
        id_blocks.append(static_cols["loan_id"][idx])
        period_blocks.append(np.full(len(idx), t, dtype=np.int64))
        state_blocks.append(states_t)
        next_blocks.append(nxt)
        monthly["loan_id"].extend(static_cols["loan_id"][idx])
        monthly["period"].extend([t] * len(idx))
        monthly["state"].extend(states_t.tolist())
        monthly["next_state"].extend(nxt.tolist())
        for name in dynamic_names:
            monthly[name].extend(np.asarray(dyn[name], dtype=np.float64).tolist())

        # pool-level reduction for next month's lagged region rates
        for r in range(R):
            in_r = reg == r
            n_active = int(in_r.sum())
            if n_active:
                lag_default[r] = np.isin(nxt[in_r], (FORECLOSURE, REO)).sum() / n_active
                lag_prepay[r] = (nxt[in_r] == PAIDOFF).sum() / n_active
            else:
                lag_default[r] = 0.0
                lag_prepay[r] = 0.0

        burnout[idx] += (dyn["incentive"] > 0).astype(float)
        states_path[idx, t + 1] = nxt
        absorbed = (nxt == REO) | (nxt == PAIDOFF)
        active[idx[absorbed]] = False

    if x_blocks:
        panel = Panel(
            np.concatenate(id_blocks),
            np.concatenate(period_blocks),
            np.concatenate(x_blocks),
            np.concatenate(state_blocks),
            np.concatenate(next_blocks),
            schema,
        )
    else:
        panel = Panel(
            np.zeros(0, object), np.zeros(0, np.int64),
            np.zeros((0, schema.num_columns)), np.zeros(0, np.int64), np.zeros(0, np.int64),
            schema,
        )
    return SyntheticPanel(
        schema=schema,
        panel=panel,
        static_columns=static_cols,
        monthly_columns=monthly,
        truth=truth,
        macro=macro,
        config=config,
    )
