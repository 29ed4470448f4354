"""Out-of-sample evaluation: rank-based AUC with tie handling, ROC curves,
the conditional transition AUC matrix, likelihood-ratio statistics, and
pool-level gap statistics.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .core import NON_ABSORBING_STATES, NUM_STATES, STATE_NAMES, Panel, is_absorbing


@dataclass(frozen=True)
class RocCurve:
    """Threshold-swept ROC points; ties are grouped so the trapezoidal area
    equals the rank/pairwise AUC exactly."""

    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def __post_init__(self):
        fpr = np.asarray(self.fpr, dtype=np.float64)
        tpr = np.asarray(self.tpr, dtype=np.float64)
        if fpr[0] != 0.0 or tpr[0] != 0.0 or fpr[-1] != 1.0 or tpr[-1] != 1.0:
            raise ValueError("ROC curve must run from (0,0) to (1,1)")
        if np.any(np.diff(fpr) < 0) or np.any(np.diff(tpr) < 0):
            raise ValueError("ROC points must be monotone non-decreasing")
        area = float(np.trapezoid(tpr, fpr))
        if abs(area - self.auc) > 1e-12:
            raise ValueError(f"declared auc {self.auc!r} != trapezoidal area {area!r}")
        fpr.flags.writeable = False
        tpr.flags.writeable = False
        object.__setattr__(self, "fpr", fpr)
        object.__setattr__(self, "tpr", tpr)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        for f, t in zip(self.fpr, self.tpr):
            w.writerow([f"{f!r}", f"{t!r}"])
        return buf.getvalue()


def auc(scores, labels) -> tuple[float, RocCurve]:
    """AUC with ties counted one half, plus the ROC curve.

    Rank-based: equals the probability that a random positive outscores a
    random negative. Raises on single-class input.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC requires at least one positive and one negative label")
    ranks = sps.rankdata(scores)  # average ranks on ties
    value = (ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)

    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]
    boundaries = np.nonzero(np.diff(s_sorted))[0]  # last index of each tie group
    idx = np.concatenate([boundaries, [len(s_sorted) - 1]])
    tp = np.cumsum(l_sorted)[idx]
    fp = np.cumsum(~l_sorted)[idx]
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    # snap the float auc to the trapezoid area (identical up to rounding)
    area = float(np.trapezoid(tpr, fpr))
    return float(value), RocCurve(fpr=fpr, tpr=tpr, auc=area)


def transition_auc(model, panel: Panel, u: int, v: int) -> tuple[float, RocCurve]:
    """AUC of the two-way classification next_state == v among samples whose
    current state is u, scored by the model probability of v."""
    if is_absorbing(u):
        raise ValueError(f"no transitions are observed out of {STATE_NAMES[u]}")
    sel = panel.states == u
    if not sel.any():
        raise ValueError(f"no samples with state {STATE_NAMES[u]}")
    scores = model.predict_probs(panel.covariates[sel])[:, v]
    labels = panel.next_states[sel] == v
    return auc(scores, labels)


def transition_auc_matrix(model, panel: Panel) -> list[list[float | None]]:
    """Full (u, v) AUC grid; cells without both outcomes are None, and rows
    for absorbing source states are never emitted (all None)."""
    out: list[list[float | None]] = [[None] * NUM_STATES for _ in range(NUM_STATES)]
    for u in NON_ABSORBING_STATES:
        sel = panel.states == u
        if not sel.any():
            continue
        probs = model.predict_probs(panel.covariates[sel])
        nxt = panel.next_states[sel]
        for v in range(NUM_STATES):
            labels = nxt == v
            if labels.all() or not labels.any():
                continue  # insufficient class representation -> unavailable
            value, _ = auc(probs[:, v], labels)
            out[u][v] = value
    return out


def auc_matrix_to_csv(matrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["state"] + list(STATE_NAMES))
    for u in range(NUM_STATES):
        w.writerow(
            [STATE_NAMES[u]]
            + ["" if matrix[u][v] is None else f"{matrix[u][v]:.6f}" for v in range(NUM_STATES)]
        )
    return buf.getvalue()


@dataclass(frozen=True)
class LrTest:
    statistic: float
    df: int | None = None
    p_value: float | None = None


def lr_statistic(loss_null: float, loss_alt: float, n_samples: float,
                 df: int | None = None) -> LrTest:
    """Likelihood-ratio score 2 n (loss_null - loss_alt) from negative average
    log-likelihoods on the same n samples.

    A negative statistic is allowed (the alternative fit worse) and reported
    as-is. When df (the free-parameter difference) is given, the p-value is a
    Wilks chi-square approximation; the nested-model caveat applies.
    """
    stat = 2.0 * n_samples * (loss_null - loss_alt)
    p = None
    if df is not None and df > 0:
        p = float(sps.chi2.sf(max(stat, 0.0), df))
    return LrTest(statistic=float(stat), df=df, p_value=p)


@dataclass(frozen=True)
class PoolGapStats:
    avg_absolute_gap: float
    avg_standardized_gap: float
    infinite_gaps: int = 0


def pool_gap_stats(means, stds, actuals) -> PoolGapStats:
    """Average |forecast mean - actual| and the same gap in multiples of the
    forecast standard deviation, over pools.

    A zero-std forecast contributes 0 when it matches the actual exactly and
    is otherwise flagged infinite (excluded from the standardized average).
    """
    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    actuals = np.asarray(actuals, dtype=np.float64)
    gaps = np.abs(means - actuals)
    std_gaps = np.zeros_like(gaps)
    infinite = 0
    for i in range(len(gaps)):
        if stds[i] > 0:
            std_gaps[i] = gaps[i] / stds[i]
        elif gaps[i] == 0:
            std_gaps[i] = 0.0
        else:
            std_gaps[i] = np.inf
            infinite += 1
    finite = np.isfinite(std_gaps)
    return PoolGapStats(
        avg_absolute_gap=float(gaps.mean()),
        avg_standardized_gap=float(std_gaps[finite].mean()) if finite.any() else float("inf"),
        infinite_gaps=infinite,
    )
