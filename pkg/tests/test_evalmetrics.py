import numpy as np
import pytest

from loanstate.core import (
    CURRENT,
    DD30,
    NUM_STATES,
    PAIDOFF,
    REO,
    Panel,
    legality_mask,
)
from loanstate.evalmetrics import (
    LrTest,
    RocCurve,
    auc,
    auc_matrix_to_csv,
    lr_statistic,
    pool_gap_stats,
    transition_auc,
    transition_auc_matrix,
)
from loanstate.network import Architecture, MlpParams


def brute_force_auc(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos = scores[labels]
    neg = scores[~labels]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


class TestAuc:
    def test_perfect_separation(self):
        value, _ = auc([0.1, 0.2, 0.8, 0.9], [False, False, True, True])
        assert value == 1.0

    def test_all_scores_identical(self):
        value, _ = auc([0.5] * 6, [True, False, True, False, False, True])
        assert value == 0.5

    def test_single_class_error(self):
        with pytest.raises(ValueError):
            auc([0.1, 0.2], [True, True])

    def test_matches_brute_force_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(5, 200))
            scores = rng.choice(np.linspace(0, 1, 7), size=n)  # heavy ties
            labels = rng.random(n) < 0.4
            if labels.all() or not labels.any():
                continue
            value, curve = auc(scores, labels)
            expected = brute_force_auc(scores, labels)
            assert abs(value - expected) < 1e-12
            assert abs(curve.auc - expected) < 1e-12

    def test_invariance_under_monotone_transform(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=100)
        labels = rng.random(100) < 0.5
        base, _ = auc(scores, labels)
        for f in (lambda s: 3 * s + 2, np.exp, lambda s: s**3):
            transformed, _ = auc(f(scores), labels)
            assert transformed == base

    def test_complement_identity(self):
        rng = np.random.default_rng(2)
        scores = rng.choice([0.1, 0.5, 0.9], size=60)
        labels = rng.random(60) < 0.5
        a, _ = auc(scores, labels)
        b, _ = auc(scores, ~labels)
        assert a + b == pytest.approx(1.0, abs=1e-15)


class TestRocCurve:
    def test_endpoints_and_monotonicity(self):
        rng = np.random.default_rng(3)
        scores = rng.normal(size=200)
        labels = rng.random(200) < 0.3
        _, curve = auc(scores, labels)
        assert curve.fpr[0] == 0.0 and curve.tpr[0] == 0.0
        assert curve.fpr[-1] == 1.0 and curve.tpr[-1] == 1.0
        assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)

    def test_declared_auc_must_match_area(self):
        with pytest.raises(ValueError):
            RocCurve(fpr=np.array([0.0, 1.0]), tpr=np.array([0.0, 1.0]), auc=0.9)

    def test_csv_emission(self):
        _, curve = auc([0.2, 0.8], [False, True])
        text = curve.to_csv()
        assert text.splitlines()[0] == "fpr,tpr"


def _scored_panel(seed=0, n=4000):
    """Panel whose next states are drawn from a known 0-layer model."""
    rng = np.random.default_rng(seed)
    d = 4 + NUM_STATES
    W = rng.normal(scale=1.2, size=(NUM_STATES, d))
    arch = Architecture(input_dim=d)
    model = MlpParams(arch, (W,), (np.zeros(NUM_STATES),))
    states = rng.choice([CURRENT, DD30], size=n)
    X = rng.normal(size=(n, d))
    X[:, 4:] = 0.0
    X[np.arange(n), 4 + states] = 1.0
    probs = model.predict_probs(X)
    legal = legality_mask()
    probs = probs * legal[states]
    probs /= probs.sum(axis=1, keepdims=True)
    cum = probs.cumsum(axis=1)
    nxt = (rng.random(n)[:, None] > cum).sum(axis=1)
    panel = Panel([f"L{i}" for i in range(n)], np.zeros(n), X, states, nxt)
    return model, panel


class TestTransitionAuc:
    def test_true_model_beats_chance(self):
        model, panel = _scored_panel(seed=4)
        value, _ = transition_auc(model, panel, CURRENT, PAIDOFF)
        assert value > 0.55

    def test_random_scores_near_half(self):
        # label-independent scores: AUC within 3 binomial-ish SE of 0.5
        _, panel = _scored_panel(seed=5)

        class NoiseModel:
            def predict_probs(self, X):
                rng = np.random.default_rng(abs(hash(X.shape)) % 2**31)
                P = rng.random((len(X), NUM_STATES))
                return P / P.sum(axis=1, keepdims=True)

        value, _ = transition_auc(NoiseModel(), panel, CURRENT, PAIDOFF)
        sel = panel.states == CURRENT
        n_pos = int((panel.next_states[sel] == PAIDOFF).sum())
        n_neg = int(sel.sum()) - n_pos
        se = np.sqrt((n_pos + n_neg + 1) / (12 * n_pos * n_neg))
        assert abs(value - 0.5) < 3 * se

    def test_absorbing_source_rejected(self):
        model, panel = _scored_panel(seed=6)
        with pytest.raises(ValueError):
            transition_auc(model, panel, REO, CURRENT)

    def test_matrix_marks_unavailable_cells(self):
        model, panel = _scored_panel(seed=7, n=500)
        matrix = transition_auc_matrix(model, panel)
        assert all(cell is None for cell in matrix[REO])
        assert all(cell is None for cell in matrix[PAIDOFF])
        assert matrix[CURRENT][PAIDOFF] is not None
        # illegal targets never observed -> unavailable, not zero
        from loanstate.core import DD60

        assert matrix[CURRENT][DD60] is None
        text = auc_matrix_to_csv(matrix)
        assert text.count("\n") == NUM_STATES + 1


class TestLrStatistic:
    def test_equal_losses(self):
        assert lr_statistic(0.5, 0.5, 1000).statistic == 0.0

    def test_hand_value(self):
        assert lr_statistic(0.5, 0.4, 100).statistic == pytest.approx(20.0, abs=1e-12)

    def test_antisymmetric(self):
        a = lr_statistic(0.41, 0.37, 500).statistic
        b = lr_statistic(0.37, 0.41, 500).statistic
        assert a == -b and a > 0

    def test_paper_scale_consistency(self):
        # 2 * n * (.1840 - .1680) = 1.006e8  =>  n ~ 3.14e9
        n = 1.006e8 / (2 * (0.1840 - 0.1680))
        assert n == pytest.approx(3.14375e9)
        out = lr_statistic(0.1840, 0.1680, n)
        assert out.statistic == pytest.approx(1.006e8, rel=1e-12)

    def test_p_value_reported_with_df(self):
        out = lr_statistic(0.5, 0.4, 100, df=10)
        assert isinstance(out, LrTest)
        assert 0.0 < out.p_value < 0.05


class TestPoolGapStats:
    def test_exact_predictions(self):
        out = pool_gap_stats([10, 20], [1, 2], [10, 20])
        assert out.avg_absolute_gap == 0.0
        assert out.avg_standardized_gap == 0.0

    def test_hand_value(self):
        out = pool_gap_stats([12.0], [2.0], [10.0])
        assert out.avg_absolute_gap == 2.0
        assert out.avg_standardized_gap == 1.0

    def test_zero_std_flagging(self):
        out = pool_gap_stats([10, 10], [0, 0], [10, 12])
        assert out.infinite_gaps == 1
        assert out.avg_absolute_gap == 1.0
        assert out.avg_standardized_gap == 0.0  # the matching pool contributes 0
