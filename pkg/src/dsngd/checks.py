"""Invariant suite behind ``dsngd check``.

Each check draws random models, compares an implementation against an
independent oracle (enumeration, finite differences, or a linear solve) and
reports the largest error seen.  The quick scale runs a strict subset of the
full-scale checks on fewer points.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .gradients import (
    dsngd_direction,
    dual_gradient_blocks,
    fisher_exact,
    natural_gradient_oracle,
    q_vector,
    sgd_gradient,
)
from .lexyf import (
    ExpectationParams,
    GroundTruth,
    LexyfPotential,
    ModelSpec,
    NaturalParams,
    conditional_y_given_x,
    expectation_to_natural,
    expected_kl,
    expected_nll,
    h_vector,
    h_vector_dual,
    joint_log_prob,
    joint_log_table,
    kl_joint,
    log_partition,
    natural_to_expectation,
    random_natural,
    stacked_statistic,
)

SCALES = ("quick", "full")


def relative_sup_error(value, reference) -> float:
    """``max|value - reference| / max(1, max|reference|)``."""
    value, reference = np.asarray(value, dtype=float), np.asarray(reference, dtype=float)
    return float(np.max(np.abs(value - reference)) / max(1.0, np.max(np.abs(reference))))


def random_class_matrix(s, rng, max_cond=100.0):
    """Random full-rank custom class statistic, shape ``(s, s-1)``.

    Redrawn until both ``S_M`` and the difference matrix are well conditioned,
    so finite-difference oracles stay meaningful.
    """
    while True:
        S = rng.uniform(-1, 1, (s, s - 1))
        if np.linalg.cond(S[: s - 1]) < max_cond and np.linalg.cond(S[: s - 1] - S[s - 1]) < max_cond:
            return S


def random_spec(rng, sizes=(2, 3, 4), class_stat="minimal") -> ModelSpec:
    s, m = int(rng.choice(sizes)), int(rng.choice(sizes))
    S = random_class_matrix(s, rng) if class_stat == "custom" else None
    return ModelSpec(s, m, class_stat, class_matrix=S)


def default_blocks(spec, eta_star, x):
    return dual_gradient_blocks(spec, eta_star, x, strict=True)


def jacobian_step(spec, eta) -> float:
    """FD step for derivatives in dual coordinates.

    Dual coordinates are probability masses, so the step must be small next
    to the smallest cell mass or the stencil leaves the domain.
    """
    min_mass = float(np.exp(joint_log_table(spec, eta)).min())
    scale = max(1.0, float(np.abs(spec.M_inv).sum(axis=1).max())) if spec.minimal else 1.0
    return 1e-3 * min_mass / scale


# -- individual oracle comparisons (also used directly by the tests) --------

def central_identity_error(spec, eta, blocks_fn=default_blocks) -> float:
    """DSNGD direction at the exact dual vs the Fisher solve, worst cell."""
    es = natural_to_expectation(spec, eta)
    G = fisher_exact(spec, eta)
    worst = 0.0
    for x in range(spec.m):
        blocks = blocks_fn(spec, es, x)
        cond = conditional_y_given_x(spec, eta, x)
        for y in range(spec.s):
            ref = natural_gradient_oracle(spec, eta, x, y, G)
            worst = max(worst, relative_sup_error(dsngd_direction(blocks, q_vector(cond, y)), ref))
    return worst


def dual_jacobian_error(spec, eta, blocks_fn=default_blocks) -> float:
    """Assembled dual-coordinate blocks vs an FD Jacobian of ``h`` in ``eta*``."""
    es = natural_to_expectation(spec, eta)
    step = jacobian_step(spec, eta)
    worst = 0.0
    for x in range(spec.m):
        J_fd = geo.finite_difference_jacobian(lambda v: h_vector_dual(spec, v, x), es.stacked(), step, order=4)
        J = blocks_fn(spec, es, x).assemble().T
        worst = max(worst, relative_sup_error(J, J_fd))
    return worst


def sgd_fd_error(spec, eta, step=1e-5) -> float:
    worst = 0.0
    vec = eta.stacked()
    for x in range(spec.m):
        for y in range(spec.s):
            def f(v):
                return np.log(conditional_y_given_x(spec, NaturalParams.from_stacked(spec, v), x)[y])
            fd = geo.finite_difference_gradient(f, vec, step)
            worst = max(worst, relative_sup_error(sgd_gradient(spec, eta, x, y), fd))
    return worst


def score_mean_error(spec, eta) -> float:
    worst = 0.0
    for x in range(spec.m):
        cond = conditional_y_given_x(spec, eta, x)
        mean = sum(cond[y] * sgd_gradient(spec, eta, x, y) for y in range(spec.s))
        worst = max(worst, float(np.max(np.abs(mean))))
    return worst


def nll_kl_offset_variance(spec, truth, etas) -> float:
    gaps = [expected_nll(spec, e, truth) - expected_kl(spec, e, truth) for e in etas]
    return float(np.var(gaps))


# -- registry -----------------------------------------------------------------

def _points(rng, n, class_stat="minimal", sizes=(2, 3, 4, 5)):
    for _ in range(n):
        spec = random_spec(rng, sizes, class_stat)
        yield spec, random_natural(spec, rng)


def _roundtrip(rng, n):
    worst = 0.0
    for spec, eta in _points(rng, n):
        F = LexyfPotential(spec)
        back = geo.from_dual(F, geo.to_dual(F, eta.stacked()))
        worst = max(worst, float(np.max(np.abs(back - eta.stacked()))))
    return worst


def _onehot_roundtrip(rng, n):
    # natural parameters of a one-hot family are defined up to a shift of alpha,
    # so compare in dual coordinates
    worst = 0.0
    for spec, eta in _points(rng, n, "onehot"):
        es = natural_to_expectation(spec, eta).stacked()
        back = natural_to_expectation(spec, expectation_to_natural(spec, ExpectationParams.from_stacked(spec, es)))
        worst = max(worst, float(np.max(np.abs(back.stacked() - es))))
    return worst


def _crouzeix(rng, n):
    worst = 0.0
    for spec, eta in _points(rng, n):
        worst = max(worst, geo.check_crouzeix(LexyfPotential(spec), eta.stacked()))
    return worst


def _bregman_canonical(rng, n):
    worst = 0.0
    for spec, eta in _points(rng, n):
        F, other = LexyfPotential(spec), random_natural(spec, rng)
        b = geo.bregman_divergence(F, eta.stacked(), other.stacked())
        c = geo.canonical_divergence(F, eta.stacked(), other.stacked())
        worst = max(worst, abs(b - c))
    return worst


def _bregman_kl(rng, n):
    worst = 0.0
    for spec, eta in _points(rng, n):
        other = random_natural(spec, rng)
        b = geo.bregman_divergence(LexyfPotential(spec), eta.stacked(), other.stacked())
        worst = max(worst, abs(b - kl_joint(spec, other, eta)))
    return worst


def _potential_derivatives(rng, n):
    worst = 0.0
    for spec, eta in _points(rng, n, sizes=(2, 3, 4)):
        F, vec = LexyfPotential(spec), eta.stacked()
        worst = max(worst, relative_sup_error(F.gradient(vec), geo.finite_difference_gradient(F.value, vec)))
        worst = max(worst, relative_sup_error(F.hessian(vec), geo.finite_difference_jacobian(F.gradient, vec)))
    return worst


def _dual_coordinate_natural_gradient(rng, n):
    # the natural gradient of eta*_i is G^{-1} times row i of G, i.e. e_i
    worst = 0.0
    for spec, eta in _points(rng, n):
        G = fisher_exact(spec, eta)
        V = np.column_stack([geo.natural_gradient_via_metric(G, G[i]) for i in range(spec.dim)])
        worst = max(worst, float(np.max(np.abs(V - np.eye(spec.dim)))))
    return worst


def _normalization(rng, n):
    worst = 0.0
    for spec, eta in _points(rng, n, "custom"):
        total = sum(np.exp(h_vector(spec, eta, x)).sum() for x in range(spec.m))
        worst = max(worst, abs(total - 1.0))
    return worst


def _factorization(rng, n):
    worst = 0.0
    for spec, eta in _points(rng, n, "custom"):
        P = np.exp(joint_log_table(spec, eta))
        py = P.sum(axis=0)
        worst = max(worst, float(np.max(np.abs(P - py * (P / py)))))
        # stacked form: log P = R . eta - log lambda
        lam = log_partition(spec, eta)
        for x in range(spec.m):
            for y in range(spec.s):
                lin = stacked_statistic(spec, x, y) @ eta.stacked() - lam
                worst = max(worst, abs(joint_log_prob(spec, eta, x, y) - lin))
    return worst


def _class_probs_from_alpha_star(rng, n):
    worst = 0.0
    for spec, eta in _points(rng, n, "custom"):
        es = natural_to_expectation(spec, eta)
        head = spec.M_inv @ (es.alpha_star - spec.S[spec.s - 1])
        py = np.exp(joint_log_table(spec, eta)).sum(axis=0)
        worst = max(worst, float(np.max(np.abs(head - py[:-1]))))
    return worst


def _nll_kl_offset(rng, n):
    worst = 0.0
    for _ in range(max(1, n // 10)):
        spec = random_spec(rng, (2, 3, 4, 5))
        truth = GroundTruth.random_table(spec.s, spec.m, rng)
        worst = max(worst, nll_kl_offset_variance(spec, truth, [random_natural(spec, rng) for _ in range(10)]))
    return worst


def _sgd_fd(rng, n):
    return max(sgd_fd_error(spec, eta) for spec, eta in _points(rng, n, sizes=(2, 3, 4)))


def _score_mean(rng, n):
    return max(score_mean_error(spec, eta) for spec, eta in _points(rng, n))


def _central_identity(rng, n, blocks_fn):
    worst = 0.0
    for i, (spec, eta) in enumerate(_points(rng, n, sizes=(2, 3, 4))):
        if i % 2:
            spec = ModelSpec(spec.s, spec.m, "custom", class_matrix=random_class_matrix(spec.s, rng))
        worst = max(worst, central_identity_error(spec, eta, blocks_fn))
    return worst


def _dual_jacobian(rng, n, blocks_fn):
    worst = 0.0
    for i, (spec, eta) in enumerate(_points(rng, n, sizes=(2, 3, 4))):
        stat = ("minimal", "onehot", "custom")[i % 3]
        S = random_class_matrix(spec.s, rng) if stat == "custom" else None
        spec = ModelSpec(spec.s, spec.m, stat, class_matrix=S)
        eta = random_natural(spec, rng)
        worst = max(worst, dual_jacobian_error(spec, eta, blocks_fn))
    return worst


def _decomposition(rng, n):
    # natural gradient of log P(y|x) = nat. grad of h_y - sum_k P(k|x) nat. grad of h_k,
    # with grad h taken by finite differences in natural coordinates
    worst = 0.0
    for spec, eta in _points(rng, n, sizes=(2, 3, 4)):
        G = fisher_exact(spec, eta)
        for x in range(spec.m):
            J = geo.finite_difference_jacobian(
                lambda v: h_vector(spec, NaturalParams.from_stacked(spec, v), x), eta.stacked())
            Hn = np.column_stack([geo.natural_gradient_via_metric(G, J[k]) for k in range(spec.s)])
            cond = conditional_y_given_x(spec, eta, x)
            for y in range(spec.s):
                ref = natural_gradient_oracle(spec, eta, x, y, G)
                worst = max(worst, relative_sup_error(Hn[:, y] - Hn @ cond, ref))
    return worst


def _kernels_match_reference(rng, n):
    from .optimizers import OptimizerState, Schedule, _Runner, dsngd_step, sgd_step, sngd_oracle_step

    steps = {"sgd": sgd_step, "sngd": sngd_oracle_step, "dsngd": dsngd_step}
    worst = 0.0
    for stat in ("minimal", "onehot", "custom"):
        spec = random_spec(rng, (2, 3, 4), stat)
        truth = GroundTruth.random_table(spec.s, spec.m, rng)
        xs, ys = (np.asarray(v) for v in zip(*[divmod(int(c), spec.s) for c in
                                                 rng.choice(spec.m * spec.s, n, p=truth.table.ravel())]))
        gammas = Schedule().values(0, n)
        for algo, step in steps.items():
            if algo == "sngd" and not spec.minimal:
                continue
            runner = _Runner(spec, algo, 1.0)
            runner.chunk(xs.astype(np.int64), ys.astype(np.int64), gammas)
            st = OptimizerState.initial(spec, algo)
            for x, y in zip(xs, ys):
                st = step(st, int(x), int(y))
            worst = max(worst, relative_sup_error(runner.eta, st.eta.stacked()))
    return worst


@dataclass(frozen=True)
class Check:
    name: str
    fn: object
    tol: float
    quick: bool
    uses_blocks: bool = False


CHECKS = (
    Check("geometry.dual_roundtrip", _roundtrip, 1e-8, True),
    Check("geometry.crouzeix", _crouzeix, 1e-6, True),
    Check("geometry.bregman_vs_canonical", _bregman_canonical, 1e-10, True),
    Check("geometry.bregman_vs_enumerated_kl", _bregman_kl, 1e-10, True),
    Check("geometry.potential_derivatives_fd", _potential_derivatives, 1e-5, False),
    Check("geometry.natural_gradient_of_dual_coordinate", _dual_coordinate_natural_gradient, 1e-8, False),
    Check("lexyf.normalization", _normalization, 1e-12, True),
    Check("lexyf.factorization_and_stacked_form", _factorization, 1e-12, False),
    Check("lexyf.class_probs_from_alpha_star", _class_probs_from_alpha_star, 1e-10, False),
    Check("lexyf.onehot_dual_roundtrip", _onehot_roundtrip, 1e-8, False),
    Check("lexyf.nll_minus_kl_variance", _nll_kl_offset, 1e-10, True),
    Check("gradients.sgd_vs_fd", _sgd_fd, 1e-5, True),
    Check("gradients.score_mean_zero", _score_mean, 1e-12, True),
    Check("gradients.central_identity", _central_identity, 1e-6, True, uses_blocks=True),
    Check("gradients.dual_jacobian_fd", _dual_jacobian, 1e-5, True, uses_blocks=True),
    Check("gradients.natural_gradient_decomposition", _decomposition, 1e-5, False),
    Check("optimizers.kernels_match_reference", _kernels_match_reference, 1e-10, False),
)

POINTS = {"quick": 8, "full": 100}
# heavier checks get fewer points at full scale
FULL_POINTS = {
    "gradients.sgd_vs_fd": 30,
    "gradients.central_identity": 40,
    "gradients.dual_jacobian_fd": 40,
    "gradients.natural_gradient_decomposition": 20,
    "geometry.potential_derivatives_fd": 30,
    "optimizers.kernels_match_reference": 200,
}


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    tol: float
    n_points: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error <= self.tol)


def check_names(scale: str) -> list:
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}, got {scale!r}")
    return [c.name for c in CHECKS if c.quick or scale == "full"]


def run_checks(scale="quick", seed=0, blocks_fn=None, names=None) -> list:
    """Run the suite; ``blocks_fn`` replaces the dual-gradient block builder (mutation testing)."""
    wanted = set(check_names(scale) if names is None else names)
    results = []
    for i, check in enumerate(CHECKS):
        if check.name not in wanted:
            continue
        n = POINTS[scale] if scale == "quick" else FULL_POINTS.get(check.name, POINTS["full"])
        rng = np.random.default_rng([seed, i])
        start = time.perf_counter()
        if check.uses_blocks:
            err = check.fn(rng, n, blocks_fn or default_blocks)
        else:
            err = check.fn(rng, n)
        results.append(CheckResult(check.name, float(err), check.tol, n, time.perf_counter() - start))
    return results


def format_report(results) -> str:
    lines = [f"{'check':48s} {'max_error':>11s} {'tol':>8s}  status"]
    for r in results:
        lines.append(f"{r.name:48s} {r.max_error:11.3e} {r.tol:8.0e}  {'ok' if r.passed else 'FAIL'}")
    n_bad = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_bad}/{len(results)} checks passed")
    return "\n".join(lines)
