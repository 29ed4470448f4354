"""Loan-state transition risk engine.

A deep multinomial transition model over the 7 mortgage states (current, 30/
60/90+ days delinquent, foreclosure, REO, paid off): maximum-likelihood
training, finite-difference sensitivity and interaction analysis, and
multi-period pool-level risk simulation, validated against synthetic loan
panels generated from a known ground-truth transition function.
"""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    NUM_STATES,
    STATE_NAMES,
    FeatureSchema,
    LoanMonthSample,
    Panel,
    RawField,
    TransitionMatrix,
    empirical_transition_matrix,
    is_absorbing,
    is_legal_transition,
)
