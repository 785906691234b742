"""Step-size schedules, the running dual estimate, and the update loops.

Single-step functions (:func:`sgd_step`, :func:`sngd_oracle_step`,
:func:`dsngd_step`) are pure: they return a new :class:`OptimizerState`.
:func:`run` drives whole experiments through the compiled kernels in
``_kernels`` and evaluates the exact objectives every ``eval_every`` steps.
"""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from . import _kernels
from .exceptions import DivergenceError, SpecError
from .gradients import (
    dsngd_direction,
    dual_gradient_blocks,
    natural_gradient_oracle,
    q_vector,
    sgd_gradient,
)
from .lexyf import (
    EPS_P,
    ExpectationParams,
    GroundTruth,
    ModelSpec,
    NaturalParams,
    conditional_y_given_x,
    decode_dual,
    expected_kl,
    expected_nll,
    natural_to_expectation,
    sample_stream,
    stacked_statistic,
)

logger = logging.getLogger(__name__)

ALGORITHMS = ("sgd", "sngd", "dsngd")
SCHEDULES = ("constant", "inverse-t", "inverse-sqrt-t")
DIVERGENCE_GUARD = 1e6
STREAM_KEY = 1


@dataclass(frozen=True)
class Schedule:
    """``constant``: ``c``; ``inverse-t``: ``c / (t0 + t)``; ``inverse-sqrt-t``: ``c / sqrt(t0 + t)``."""

    kind: str = "inverse-t"
    c: float = 1.0
    t0: float = 10.0

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise SpecError(f"schedule kind must be one of {SCHEDULES}, got {self.kind!r}")
        if not self.c > 0:
            raise SpecError(f"schedule scale c must be positive, got {self.c}")
        if self.kind != "constant" and not self.t0 > 0:
            raise SpecError(f"decaying schedules need t0 > 0, got {self.t0}")

    def value(self, t: int) -> float:
        if self.kind == "constant":
            return float(self.c)
        if self.kind == "inverse-t":
            return self.c / (self.t0 + t)
        return self.c / np.sqrt(self.t0 + t)

    def values(self, start: int, n: int) -> np.ndarray:
        t = np.arange(start, start + n, dtype=float)
        if self.kind == "constant":
            return np.full(n, float(self.c))
        if self.kind == "inverse-t":
            return self.c / (self.t0 + t)
        return self.c / np.sqrt(self.t0 + t)


def schedule_value(schedule: Schedule, t: int) -> float:
    return schedule.value(t)


@dataclass(frozen=True, eq=False)
class DualEstimatorState:
    """Smoothed running mean of stacked statistics ``R(x, y)``.

    The decoded point is ``(kappa * prior + total) / (kappa + count)``, where
    ``prior`` is the dual point of the uniform model.  ``kappa > 0`` keeps it
    inside the dual domain.
    """

    total: np.ndarray
    count: int
    kappa: float
    prior: np.ndarray
    clamp_events: int = 0

    @classmethod
    def initial(cls, spec: ModelSpec, kappa: float = 1.0) -> "DualEstimatorState":
        if not kappa > 0:
            raise SpecError(f"kappa must be positive, got {kappa}")
        prior = natural_to_expectation(spec, NaturalParams.zeros(spec)).stacked()
        return cls(np.zeros(spec.dim), 0, float(kappa), prior)

    @property
    def mean(self) -> np.ndarray:
        return (self.kappa * self.prior + self.total) / (self.kappa + self.count)

    def decode(self, spec: ModelSpec, strict=False):
        """Expectation parameters with interiority enforced, and the clamp count."""
        es = ExpectationParams.from_stacked(spec, self.mean)
        n_clamped = decode_dual(spec, es, strict)[3] if spec.standard_features else 0
        return es, n_clamped


def dual_estimator_update(spec: ModelSpec, state: DualEstimatorState, x: int, y: int, strict=False):
    """Fold one observation in; returns ``(new_state, expectation_params)``."""
    new = replace(state, total=state.total + stacked_statistic(spec, x, y), count=state.count + 1)
    es, n = new.decode(spec, strict)
    if n:
        new = replace(new, clamp_events=new.clamp_events + n)
    return new, es


@dataclass(frozen=True, eq=False)
class OptimizerState:
    spec: ModelSpec
    eta: NaturalParams
    schedule: Schedule
    algorithm: str
    t: int = 0
    estimator: DualEstimatorState | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise SpecError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.algorithm == "dsngd" and self.estimator is None:
            raise SpecError("dsngd needs a dual estimator state")
        if self.algorithm == "sngd" and not self.spec.minimal:
            raise SpecError("the SNGD oracle needs a minimal class statistic")

    @classmethod
    def initial(cls, spec, algorithm, schedule=None, kappa=1.0, seed=None, eta=None):
        est = DualEstimatorState.initial(spec, kappa) if algorithm == "dsngd" else None
        return cls(spec, eta if eta is not None else NaturalParams.zeros(spec),
                   schedule or Schedule(), algorithm, 0, est, seed)


def _guarded(spec, vec, step):
    if not np.all(np.isfinite(vec)) or np.max(np.abs(vec)) > DIVERGENCE_GUARD:
        raise DivergenceError(f"iterate diverged at step {step} (max |eta| = {np.max(np.abs(vec)):.3e})",
                              step=step)
    return NaturalParams.from_stacked(spec, vec)


def _advance(st: OptimizerState, direction, **changes) -> OptimizerState:
    gamma = st.schedule.value(st.t)
    eta = _guarded(st.spec, st.eta.stacked() + gamma * direction, st.t + 1)
    return replace(st, eta=eta, t=st.t + 1, **changes)


def sgd_step(st: OptimizerState, x: int, y: int) -> OptimizerState:
    """Ascent on ``log P(y | x)``, i.e. descent on the expected negative log-likelihood."""
    return _advance(st, sgd_gradient(st.spec, st.eta, x, y))


def sngd_oracle_step(st: OptimizerState, x: int, y: int) -> OptimizerState:
    return _advance(st, natural_gradient_oracle(st.spec, st.eta, x, y))


def dsngd_step(st: OptimizerState, x: int, y: int, dual_point: ExpectationParams | None = None) -> OptimizerState:
    """One DSNGD update.

    The dual estimate absorbs ``(x, y)`` first; the gradient blocks are then
    taken at that estimate and ``q`` at the current natural iterate.  Passing
    ``dual_point`` bypasses the estimator (used to compare against the oracle).
    """
    spec = st.spec
    est = st.estimator
    if dual_point is None:
        est, dual_point = dual_estimator_update(spec, est, x, y)
    blocks = dual_gradient_blocks(spec, dual_point, x)
    q = q_vector(conditional_y_given_x(spec, st.eta, x), y)
    return _advance(st, dsngd_direction(blocks, q), estimator=est)


# -- full runs ----------------------------------------------------------------

@dataclass
class RunTrace:
    """Evaluation rows of one run plus the metadata needed to reproduce it."""

    metadata: dict
    t: list = field(default_factory=list)
    expected_nll: list = field(default_factory=list)
    expected_kl: list = field(default_factory=list)
    step_time_ns: list = field(default_factory=list)

    COLUMNS = ("t", "expected_nll", "expected_kl", "step_time_ns")

    def append(self, t, nll, kl, step_ns):
        if self.t and t <= self.t[-1]:
            raise ValueError(f"trace rows must increase in t ({t} after {self.t[-1]})")
        self.t.append(int(t))
        self.expected_nll.append(float(nll))
        self.expected_kl.append(float(kl))
        self.step_time_ns.append(int(step_ns))

    def rows(self):
        return list(zip(self.t, self.expected_nll, self.expected_kl, self.step_time_ns))

    @property
    def diverged(self) -> bool:
        return bool(self.metadata.get("diverged", False))


def stream_hash(xs, ys) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(xs, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(ys, dtype=np.int64).tobytes())
    return h.hexdigest()


def draw_stream(truth: GroundTruth, n: int, seed: int):
    """The sample stream a run with this seed consumes; shared across algorithms.

    Seeded as ``[seed, 1]`` so it is independent of a ground truth generated
    from the same seed (which uses ``[seed, 0]``).
    """
    return sample_stream(truth, n, np.random.default_rng([seed, STREAM_KEY]))


class _Runner:
    """Mutable working arrays for one run; not shared across threads."""

    def __init__(self, spec, algorithm, kappa):
        self.spec = spec
        self.algorithm = algorithm
        self.alpha = np.zeros(spec.a)
        self.beta = np.zeros((spec.s, spec.t))
        self.S = np.ascontiguousarray(spec.S)
        self.T = np.ascontiguousarray(spec.T)
        self.clamps = 0
        if algorithm == "dsngd":
            if not spec.standard_features:
                raise SpecError("dsngd needs the standard categorical feature statistic")
            prior = DualEstimatorState.initial(spec, kappa).prior
            self.kappa = float(kappa)
            self.prior_a = prior[: spec.a].copy()
            self.prior_b = prior[spec.a:].reshape(spec.s, spec.t).copy()
            self.sum_a = np.zeros(spec.a)
            self.sum_b = np.zeros((spec.s, spec.t))
            self.count = np.zeros(1)
            self.MinvT = np.ascontiguousarray(spec.M_inv.T) if spec.minimal else np.zeros((spec.a, 0))
        elif algorithm == "sngd":
            if not spec.minimal:
                raise SpecError("the SNGD oracle needs a minimal class statistic")
            self.R = np.ascontiguousarray(spec.stat_matrix)

    @property
    def eta(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta.ravel()])

    def chunk(self, xs, ys, gammas):
        """Apply the updates; returns ``(steps_applied, diverged)``."""
        if self.algorithm == "sgd":
            done, bad, c = _kernels.sgd_chunk(self.alpha, self.beta, self.S, self.T, xs, ys, gammas,
                                              DIVERGENCE_GUARD)
        elif self.algorithm == "dsngd":
            done, bad, c = _kernels.dsngd_chunk(
                self.alpha, self.beta, self.S, self.T, self.sum_a, self.sum_b, self.count,
                self.kappa, self.prior_a, self.prior_b, self.MinvT, not self.spec.minimal,
                xs, ys, gammas, DIVERGENCE_GUARD, EPS_P)
        else:
            done, bad, c = self._sngd(xs, ys, gammas)
        self.clamps += c
        return done, bad

    def sngd_one(self, x, y, gamma):
        """Exact-Fisher step on the raw stacked vector."""
        spec, R = self.spec, self.R
        eta = self.eta
        logits = R @ eta
        p = np.exp(logits - logits.max())
        p /= p.sum()
        mu = p @ R
        G = (R * p[:, None]).T @ R - np.outer(mu, mu)
        cell = logits.reshape(spec.m, spec.s)[x]
        q = -np.exp(cell - cell.max())
        q /= -q.sum()
        q[y] += 1.0
        g = np.concatenate([spec.S.T @ q, np.outer(q, spec.T[x]).ravel()])
        v = scipy.linalg.cho_solve(scipy.linalg.cho_factor(G, lower=True, check_finite=False), g,
                                   check_finite=False)
        self.alpha += gamma * v[: spec.a]
        self.beta += gamma * v[spec.a:].reshape(spec.s, spec.t)

    def reset(self):
        """Zero the natural parameters (used by timing loops after a divergence)."""
        self.alpha[:] = 0.0
        self.beta[:] = 0.0

    def _sngd(self, xs, ys, gammas):
        for n in range(len(xs)):
            try:
                self.sngd_one(int(xs[n]), int(ys[n]), float(gammas[n]))
            except np.linalg.LinAlgError:
                return n + 1, True, 0
            eta = self.eta
            if not np.all(np.isfinite(eta)) or np.max(np.abs(eta)) > DIVERGENCE_GUARD:
                return n + 1, True, 0
        return len(xs), False, 0


def run(spec: ModelSpec, algorithm: str, schedule: Schedule, truth: GroundTruth, n_steps: int,
        eval_every: int, seed: int, kappa: float = 1.0, stream=None, metadata=None,
        on_row=None) -> RunTrace:
    """Stream ``n_steps`` samples through one optimizer from ``eta = 0``.

    Rows are written at ``t = 0``, every ``eval_every`` steps, and at the final
    step.  ``step_time_ns`` is the mean wall time per step since the previous
    row.  ``stream`` overrides the seeded sample stream (so algorithms can
    share one).  On divergence a :class:`DivergenceError` carrying the partial
    trace is raised.  ``on_row`` is called with each row as it is recorded.
    """
    if algorithm not in ALGORITHMS:
        raise SpecError(f"algorithm must be one of {ALGORITHMS}, got {algorithm!r}")
    if n_steps < 0 or eval_every < 1:
        raise SpecError("n_steps must be >= 0 and eval_every >= 1")
    if truth.table.shape != (spec.m, spec.s):
        raise SpecError(f"ground truth shape {truth.table.shape} does not match (m, s) = {(spec.m, spec.s)}")
    xs, ys = draw_stream(truth, n_steps, seed) if stream is None else stream
    xs = np.ascontiguousarray(xs[:n_steps], dtype=np.int64)
    ys = np.ascontiguousarray(ys[:n_steps], dtype=np.int64)
    if len(xs) < n_steps:
        raise SpecError(f"stream has {len(xs)} samples, need {n_steps}")

    meta = {
        "algorithm": algorithm, "seed": seed, "n_steps": n_steps, "eval_every": eval_every,
        "schedule": {"kind": schedule.kind, "c": schedule.c, "t0": schedule.t0},
        "kappa": kappa, "spec": spec.to_dict(), "stream_hash": stream_hash(xs, ys),
        "diverged": False,
    }
    meta.update(metadata or {})
    trace = RunTrace(meta)
    runner = _Runner(spec, algorithm, kappa)
    gammas = schedule.values(0, n_steps)

    def evaluate(t, step_ns):
        eta = NaturalParams.from_stacked(spec, runner.eta)
        trace.append(t, expected_nll(spec, eta, truth), expected_kl(spec, eta, truth), step_ns)
        if on_row is not None:
            on_row((trace.t[-1], trace.expected_nll[-1], trace.expected_kl[-1], trace.step_time_ns[-1]))

    evaluate(0, 0)
    t = 0
    while t < n_steps:
        stop = min(t + eval_every, n_steps)
        start_ns = time.perf_counter_ns()
        done, bad = runner.chunk(xs[t:stop], ys[t:stop], gammas[t:stop])
        elapsed = time.perf_counter_ns() - start_ns
        if bad:
            meta.update(diverged=True, diverged_at=t + done, clamp_events=runner.clamps)
            logger.warning("%s diverged at step %d", algorithm, t + done)
            raise DivergenceError(f"{algorithm} diverged at step {t + done}", step=t + done, trace=trace)
        t = stop
        evaluate(t, elapsed // max(done, 1))
    meta["clamp_events"] = runner.clamps
    if runner.clamps:
        logger.info("%s: %d interiority clamp events", algorithm, runner.clamps)
    meta["final_eta"] = runner.eta.tolist()
    return trace
