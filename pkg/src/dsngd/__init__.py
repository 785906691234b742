"""Dual stochastic natural gradient descent on discrete exponential XY families.

Modules: :mod:`~dsngd.geometry` (dually flat primitives), :mod:`~dsngd.lexyf`
(the model family), :mod:`~dsngd.gradients`, :mod:`~dsngd.optimizers`,
:mod:`~dsngd.harness` and :mod:`~dsngd.checks` (experiments and invariants).
"""
from .estimator import DSNGDClassifier
from .exceptions import (
    ConvexityError,
    DivergenceError,
    DomainError,
    DSNGDError,
    InteriorityError,
    InversionError,
    NotPositiveDefiniteError,
    SpecError,
)
from .gradients import (
    DualGradientBlocks,
    dsngd_direction,
    fisher_exact,
    grad_h_dual,
    grad_h_dual_onehot,
    natural_gradient_oracle,
    q_vector,
    sgd_gradient,
)
from .lexyf import (
    ClassicalParams,
    ExpectationParams,
    GroundTruth,
    ModelSpec,
    NaturalParams,
    expectation_to_natural,
    expected_kl,
    expected_nll,
    natural_to_expectation,
)
from .optimizers import (
    DualEstimatorState,
    OptimizerState,
    RunTrace,
    Schedule,
    dsngd_step,
    run,
    sgd_step,
    sngd_oracle_step,
)

__version__ = "0.1.0"
