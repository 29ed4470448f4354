import numpy as np
import pytest

from loanstate import risk
from loanstate.core import (
    CURRENT,
    DD30,
    DD60,
    DD90PLUS,
    FORECLOSURE,
    NUM_STATES,
    PAIDOFF,
    REO,
    STATE_NAMES,
    FeatureSchema,
    RawField,
    absorbing_unit_rows,
    legality_mask,
)
from loanstate.network import Architecture, MlpParams, init_params
from loanstate.pipeline import fit_normalization
from loanstate.risk import (
    FROZEN_EVOLVER,
    CovariateEvolver,
    MacroBinding,
    chain_product,
    make_ranked_pools,
    multi_period_frozen,
    multi_period_matrices,
    one_step_matrix,
    one_step_matrices,
    pool_columns,
    pool_normal,
    pool_poisson,
    portfolio_comparison_curve,
    portfolio_loss,
    select_portfolio,
    simulate_pool_mc,
    simulate_pool_outcomes,
)
from loanstate.synth import NationalRateParams
from loanstate.trainer import EnsembleModel


def _tiny_schema():
    return FeatureSchema(
        raw_fields=(
            RawField("fico", "numeric", required=True),
            RawField("loan_age", "numeric", required=True, group="dynamic"),
            RawField("original_balance", "numeric", required=True),
            RawField("original_rate", "numeric", required=True),
            RawField("original_term", "numeric", required=True),
            RawField("current_balance", "numeric", required=True, group="dynamic"),
            RawField("incentive", "numeric", required=True, group="dynamic"),
            RawField("status", "state", group="dynamic"),
        )
    )


def _identity_stats(schema):
    # passthrough normalization: every column exempt
    X = np.zeros((2, schema.num_columns))
    return fit_normalization(X, mask=np.zeros(schema.num_columns, dtype=bool))


def _fitted_stats(schema, seed=99):
    # plausible covariate spread so random nets see z-scored inputs
    from loanstate.pipeline import encode

    rng = np.random.default_rng(seed)
    recs = [
        _record(
            loan_id=f"S{i}",
            fico=float(rng.normal(0.5, 0.2)),
            loan_age=float(rng.uniform(0, 48)),
            original_balance=float(np.exp(rng.normal(11.5, 0.5))),
            original_rate=float(rng.normal(6, 1)),
            current_balance=float(np.exp(rng.normal(11.3, 0.5))),
            incentive=float(rng.normal(0.5, 1.0)),
            state="Current",
        )
        for i in range(200)
    ]
    for r in recs:
        r["next_state"] = "Current"
        r["period"] = 0
    panel, _ = encode(schema, recs)
    return fit_normalization(panel.covariates, mask=schema.normalize_mask())


def _bundle(schema, seed=0, hidden=(6,)):
    stats = _fitted_stats(schema)
    params = init_params(Architecture(input_dim=schema.num_columns, hidden=hidden), seed)
    return EnsembleModel(members=(params,), schema=schema, stats=stats)


def _record(**kw):
    base = {
        "loan_id": "L0",
        "fico": 0.5,
        "loan_age": 0.0,
        "original_balance": 100_000.0,
        "original_rate": 6.0,
        "original_term": 360.0,
        "current_balance": 100_000.0,
        "incentive": 0.5,
        "state": "Current",
    }
    base.update(kw)
    return base


class FicoScoredModel:
    """Stub bundle: P(next = Current) is a direct function of the fico column,
    remainder on PaidOff. Used to pin rankings by hand."""

    def __init__(self, schema, transform=lambda v: v):
        self.schema = schema
        self.stats = _identity_stats(schema)
        self._fico = schema.column_index("fico")
        self._transform = transform

    def predict_probs(self, X):
        X = np.atleast_2d(X)
        p_cur = np.clip(self._transform(X[:, self._fico]), 1e-9, 1 - 1e-9)
        P = np.zeros((len(X), NUM_STATES))
        P[:, CURRENT] = p_cur
        P[:, PAIDOFF] = 1 - p_cur
        return P


class TestOneStepMatrix:
    def test_rows_sum_and_absorbing_unit(self):
        schema = _tiny_schema()
        model = _bundle(schema)
        tm = one_step_matrix(model, _record())
        np.testing.assert_allclose(tm.entries.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_array_equal(tm[REO], np.eye(NUM_STATES)[REO])
        np.testing.assert_array_equal(tm[PAIDOFF], np.eye(NUM_STATES)[PAIDOFF])

    def test_zero_state_weights_make_rows_identical(self):
        schema = _tiny_schema()
        stats = _identity_stats(schema)
        d = schema.num_columns
        rng = np.random.default_rng(1)
        W = rng.normal(size=(NUM_STATES, d))
        W[:, list(schema.state_group)] = 0.0
        params = MlpParams(Architecture(input_dim=d), (W,), (np.zeros(NUM_STATES),))
        model = EnsembleModel(members=(params,), schema=schema, stats=stats)
        tm = one_step_matrix(model, _record())
        for u in (DD30, DD90PLUS, FORECLOSURE):
            np.testing.assert_allclose(tm[u], tm[CURRENT], atol=1e-12)

    def test_legality_clamp_zeroes_illegal(self):
        schema = _tiny_schema()
        model = _bundle(schema, seed=3)
        clamped = one_step_matrix(model, _record(), legality_clamp=True)
        legal = legality_mask()
        assert np.all(clamped.entries[~legal] == 0.0)
        unclamped = one_step_matrix(model, _record())
        assert unclamped.entries[CURRENT, 2] > 0.0  # model itself is never masked


class TestMultiPeriod:
    def test_t1_equals_one_step(self):
        schema = _tiny_schema()
        model = _bundle(schema, seed=4)
        a = one_step_matrix(model, _record())
        b = multi_period_frozen(model, _record(), t=1)
        np.testing.assert_allclose(a.entries, b.entries, atol=1e-12)

    def test_two_state_hand_product(self):
        m = np.eye(NUM_STATES)
        m[CURRENT, CURRENT], m[CURRENT, PAIDOFF] = 0.9, 0.1
        sq = chain_product([m, m])
        assert sq[CURRENT, CURRENT] == pytest.approx(0.81, abs=1e-15)
        assert sq[CURRENT, PAIDOFF] == pytest.approx(0.19, abs=1e-15)

    def test_enumeration_oracle_on_random_legal_matrices(self):
        # brute force: sum path probabilities over all 7^t state sequences
        rng = np.random.default_rng(5)
        mask = legality_mask().astype(float)
        t = 3
        mats = []
        for _ in range(t):
            m = rng.uniform(0.05, 1.0, size=(NUM_STATES, NUM_STATES)) * mask
            m /= m.sum(axis=1, keepdims=True)
            mats.append(absorbing_unit_rows(m))
        got = chain_product(mats)
        brute = np.zeros((NUM_STATES, NUM_STATES))
        for u in range(NUM_STATES):
            stack = [(u, 0, 1.0)]
            while stack:
                s, depth, p = stack.pop()
                if depth == t:
                    brute[u, s] += p
                    continue
                for v in range(NUM_STATES):
                    pv = mats[depth][s, v]
                    if pv > 0:
                        stack.append((v, depth + 1, p * pv))
        np.testing.assert_allclose(got, brute, atol=1e-10)

    def test_product_of_one_steps_matches(self):
        schema = _tiny_schema()
        model = _bundle(schema, seed=6)
        rec = _record()
        cols = pool_columns([rec])
        evolver = FROZEN_EVOLVER
        steps = [
            one_step_matrices(model, evolver.advance(cols, s), 1)[0] for s in range(4)
        ]
        direct = multi_period_matrices(model, cols, 1, evolver, 4)[0]
        np.testing.assert_allclose(direct, chain_product(steps), atol=1e-12)

    def test_rows_sum_to_one_at_t60(self):
        schema = _tiny_schema()
        model = _bundle(schema, seed=7)
        tm = multi_period_frozen(model, _record(), t=60)
        np.testing.assert_allclose(tm.entries.sum(axis=1), 1.0, atol=1e-8)

    def test_absorption_monotonicity(self):
        schema = _tiny_schema()
        model = _bundle(schema, seed=8)
        cols = pool_columns([_record()])
        prev_paid = np.zeros(NUM_STATES)
        prev_reo = np.zeros(NUM_STATES)
        for t in (1, 2, 4, 8, 16):
            m = multi_period_matrices(model, cols, 1, FROZEN_EVOLVER, t)[0]
            assert np.all(m[:, PAIDOFF] >= prev_paid - 1e-12)
            assert np.all(m[:, REO] >= prev_reo - 1e-12)
            prev_paid, prev_reo = m[:, PAIDOFF], m[:, REO]

    def test_evolver_advances_age_and_balance_only(self):
        ev = FROZEN_EVOLVER
        cols = pool_columns([_record(loan_age=5.0, incentive=1.23)])
        out = ev.advance(cols, 7)
        assert out["loan_age"][0] == 12.0
        assert out["current_balance"][0] < cols["current_balance"][0]
        assert out["incentive"][0] == 1.23  # frozen without a macro path
        assert out["fico"][0] == cols["fico"][0]


class TestPoolDistributions:
    def test_poisson_all_zero(self):
        dist = pool_poisson(np.zeros(100))
        assert dist.mean() == 0.0
        assert dist.tail_prob(1) == 0.0
        assert dist.tail_prob(0) == 1.0

    def test_poisson_mean(self):
        dist = pool_poisson(np.full(1000, 0.01))
        assert dist.mean() == pytest.approx(10.0)
        assert dist.std() == pytest.approx(np.sqrt(10.0))

    def test_normal_variance(self):
        p = np.full(400, 0.1)
        dist = pool_normal(p)
        assert dist.mean() == pytest.approx(40.0)
        assert dist.variance == pytest.approx((p * (1 - p)).sum())

    def test_probability_bounds_checked(self):
        with pytest.raises(ValueError):
            pool_poisson(np.array([0.5, 1.2]))

    def test_closed_forms_match_mc_tails(self):
        # oracle: frozen-mode MC against the independent-Bernoulli aggregate
        schema = _tiny_schema()
        rng = np.random.default_rng(9)
        records = [
            _record(loan_id=f"L{i}", fico=float(p_cur))
            for i, p_cur in enumerate(1 - rng.uniform(0.005, 0.05, size=1000))
        ]
        model = FicoScoredModel(schema)
        probs = 1 - np.array([r["fico"] for r in records])
        mc = simulate_pool_mc(model, records, horizon=1, npaths=4000, seed=1)
        poisson = pool_poisson(probs)
        normal = pool_normal(probs)
        ks = np.arange(0, 60)
        for dist in (poisson, normal):
            gaps = [abs(dist.tail_prob(k) - mc.tail_prob(k, PAIDOFF)) for k in ks]
            assert max(gaps) < 0.02
        se = np.sqrt((probs * (1 - probs)).sum() / 4000)
        assert abs(mc.mean(PAIDOFF) - probs.sum()) <= 3 * se


class TestSimulatePoolMc:
    def test_no_prepay_model_zero_prepayments(self):
        schema = _tiny_schema()
        stats = _identity_stats(schema)
        d = schema.num_columns
        b = np.zeros(NUM_STATES)
        b[PAIDOFF] = -1e4  # prepay probability underflows to exactly 0
        params = MlpParams(Architecture(input_dim=d), (np.zeros((NUM_STATES, d)),), (b,))
        model = EnsembleModel(members=(params,), schema=schema, stats=stats)
        records = [_record(loan_id=f"L{i}") for i in range(50)]
        dist = simulate_pool_mc(model, records, horizon=6, npaths=20, seed=2)
        assert np.all(dist.counts[:, PAIDOFF] == 0)

    def test_reproducible(self):
        schema = _tiny_schema()
        model = _bundle(schema, seed=10)
        records = [_record(loan_id=f"L{i}", fico=float(i % 7) / 7) for i in range(30)]
        a = simulate_pool_mc(model, records, horizon=4, npaths=25, seed=3)
        b = simulate_pool_mc(model, records, horizon=4, npaths=25, seed=3)
        np.testing.assert_array_equal(a.counts, b.counts)

    def test_disabled_macro_binding_equals_frozen_exactly(self):
        schema = _tiny_schema()
        model = _bundle(schema, seed=11)
        records = [_record(loan_id=f"L{i}") for i in range(20)]
        no_macro_evolver = CovariateEvolver(macro_binding=None)
        frozen = simulate_pool_mc(model, records, 6, 15, seed=4, evolver=no_macro_evolver)
        disabled = simulate_pool_mc(
            model, records, 6, 15, seed=4, evolver=no_macro_evolver,
            rate_model=NationalRateParams(),
        )
        np.testing.assert_array_equal(frozen.counts, disabled.counts)

    def test_macro_mode_changes_outcomes(self):
        schema = _tiny_schema()
        model = _bundle(schema, seed=12)
        records = [_record(loan_id=f"L{i}") for i in range(30)]
        frozen = simulate_pool_mc(model, records, 8, 30, seed=5)
        macro = simulate_pool_mc(
            model, records, 8, 30, seed=5,
            rate_model=NationalRateParams(intercept=0.3, ar_coeffs=(0.95,), noise_scale=1.0),
        )
        assert not np.array_equal(frozen.counts, macro.counts)

    def test_counts_sum_to_pool_size(self):
        schema = _tiny_schema()
        model = _bundle(schema, seed=13)
        records = [_record(loan_id=f"L{i}") for i in range(17)]
        dist = simulate_pool_mc(model, records, 5, 9, seed=6)
        np.testing.assert_array_equal(dist.counts.sum(axis=1), 17)

    def test_outcomes_path(self):
        schema = _tiny_schema()
        model = _bundle(schema, seed=14)
        records = [_record(loan_id=f"L{i}") for i in range(12)]
        states, months = simulate_pool_outcomes(model, records, 6, seed=7)
        assert states.shape == months.shape == (12,)
        assert np.all(months[states == DD30] == 1.0)
        assert np.all(months[states == DD90PLUS] >= 3.0)


class TestPortfolio:
    def test_endpoints(self):
        schema = _tiny_schema()
        model = FicoScoredModel(schema)
        records = [_record(loan_id=f"L{i}", fico=float(i + 1) / 10) for i in range(5)]
        assert select_portfolio(model, records, 0).loan_ids == ()
        full = select_portfolio(model, records, 5)
        assert set(full.loan_ids) == {f"L{i}" for i in range(5)}

    def test_hand_ranking(self):
        schema = _tiny_schema()
        model = FicoScoredModel(schema)
        records = [
            _record(loan_id="A", fico=0.9),
            _record(loan_id="B", fico=0.5),
            _record(loan_id="C", fico=0.7),
        ]
        sel = select_portfolio(model, records, 2)
        assert sel.loan_ids == ("A", "C")

    def test_ranking_invariant_under_monotone_recalibration(self):
        schema = _tiny_schema()
        rng = np.random.default_rng(15)
        records = [_record(loan_id=f"L{i:02d}", fico=float(v)) for i, v in enumerate(rng.uniform(0.2, 0.9, 40))]
        base = FicoScoredModel(schema)
        recal = FicoScoredModel(schema, transform=lambda v: v**3)  # monotone
        a = select_portfolio(base, records, 15)
        b = select_portfolio(recal, records, 15)
        assert a.loan_ids == b.loan_ids

    def test_stable_tie_break_by_loan_id(self):
        schema = _tiny_schema()
        model = FicoScoredModel(schema)
        records = [_record(loan_id=x, fico=0.5) for x in ("Z", "A", "M")]
        sel = select_portfolio(model, records, 3)
        assert sel.loan_ids == ("A", "M", "Z")


class TestPortfolioLoss:
    def test_cited_weights(self):
        assert portfolio_loss([PAIDOFF], [100_000.0]) == pytest.approx(5_000.0)
        assert portfolio_loss([REO], [100_000.0]) == pytest.approx(40_000.0)
        assert portfolio_loss([FORECLOSURE], [100_000.0]) == pytest.approx(40_000.0)
        assert portfolio_loss([DD90PLUS], [90_000.0], months_delinquent=[3.0]) == pytest.approx(750.0)
        assert portfolio_loss([CURRENT], [100_000.0]) == 0.0

    def test_default_months_floor(self):
        assert portfolio_loss([DD30], [360_000.0]) == pytest.approx(1_000.0)
        assert portfolio_loss([DD60], [360_000.0]) == pytest.approx(2_000.0)
        assert portfolio_loss([DD90PLUS], [360_000.0]) == pytest.approx(3_000.0)

    def test_tracked_excess_months(self):
        loss = portfolio_loss([DD90PLUS], [360_000.0], months_delinquent=[7.0])
        assert loss == pytest.approx(7_000.0)


class TestRankedPools:
    def test_chunking(self):
        records = [_record(loan_id=f"L{i:04d}") for i in range(2000)]
        keys = np.arange(2000.0)
        pools = make_ranked_pools(records, keys, 1000)
        assert len(pools) == 2
        top_ids = {r["loan_id"] for r in pools[0]}
        assert top_ids == {f"L{i:04d}" for i in range(1000, 2000)}

    def test_single_short_pool(self):
        records = [_record(loan_id=f"L{i}") for i in range(3)]
        pools = make_ranked_pools(records, [1.0, 2.0, 3.0], 10)
        assert len(pools) == 1 and len(pools[0]) == 3

    def test_stable_ties(self):
        records = [_record(loan_id=x) for x in ("B", "A", "C")]
        pools = make_ranked_pools(records, [1.0, 1.0, 1.0], 2)
        assert [r["loan_id"] for r in pools[0]] == ["A", "B"]


class TestComparisonCurve:
    def test_identical_models_identical_curves(self):
        schema = _tiny_schema()
        model = FicoScoredModel(schema)
        rng = np.random.default_rng(16)
        records = [_record(loan_id=f"L{i}", fico=float(v)) for i, v in enumerate(rng.uniform(0.2, 0.9, 30))]
        outcomes = rng.choice([CURRENT, PAIDOFF, DD30], size=30)
        rows = portfolio_comparison_curve(model, model, records, outcomes, n_grid=[0, 10, 30])
        for row in rows:
            assert row["model_a"] == row["model_b"]

    def test_endpoints_equal_total_non_current(self):
        schema = _tiny_schema()
        a = FicoScoredModel(schema)
        b = FicoScoredModel(schema, transform=lambda v: 1 - v)  # reversed ranking
        rng = np.random.default_rng(17)
        records = [_record(loan_id=f"L{i}", fico=float(v)) for i, v in enumerate(rng.uniform(0.2, 0.9, 25))]
        outcomes = rng.choice([CURRENT, PAIDOFF, DD30], size=25)
        total = int((outcomes != CURRENT).sum())
        rows = portfolio_comparison_curve(a, b, records, outcomes, n_grid=[0, 25])
        assert rows[0] == {"N": 0, "model_a": 0, "model_b": 0}
        assert rows[1]["model_a"] == rows[1]["model_b"] == total
