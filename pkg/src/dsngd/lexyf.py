"""Discrete exponential XY family.

Joint model over a feature ``x in {0..m-1}`` and a class ``y in {0..s-1}``::

    P(x, y) = exp(S(y) . alpha + beta[y] . T(x)) / lambda(eta)

``S`` is the class statistic (rows ``S(y)``) and ``T`` the feature statistic
(rows ``T(x)``).  With the standard statistics the last class and the last
feature value are the references: ``S(s-1) = 0`` and ``T(m-1) = 0``.

Indices are 0-based throughout.  Tables over the sample space have shape
``(m, s)`` and flatten row-major, so cell ``(x, y)`` sits at ``x * s + y``.
Stacked parameter vectors are laid out as ``(alpha, beta[0], ..., beta[s-1])``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .exceptions import InteriorityError, SpecError
from .geometry import ConvexPotential

logger = logging.getLogger(__name__)

EPS_P = 1e-8
CLASS_STATS = ("minimal", "onehot", "custom")
_COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Dimensions and statistics defining one family.

    ``class_matrix`` (shape ``(s, s-1)``) is required for ``class_stat="custom"``
    and ignored otherwise.  ``feature_matrix`` (shape ``(m, m-1)``) replaces
    the standard categorical statistic; the dual-coordinate machinery only
    supports the standard one.
    """

    s: int
    m: int
    class_stat: str = "minimal"
    class_matrix: np.ndarray | None = None
    feature_matrix: np.ndarray | None = None
    S: np.ndarray = field(init=False, repr=False)
    T: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if int(self.s) != self.s or self.s < 2:
            raise SpecError(f"s must be an integer >= 2, got {self.s}")
        if int(self.m) != self.m or self.m < 2:
            raise SpecError(f"m must be an integer >= 2, got {self.m}")
        if self.class_stat not in CLASS_STATS:
            raise SpecError(f"class_stat must be one of {CLASS_STATS}, got {self.class_stat!r}")
        s, m = int(self.s), int(self.m)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "m", m)

        if self.class_stat == "onehot":
            S = np.eye(s)
        elif self.class_stat == "minimal":
            S = np.vstack([np.eye(s - 1), np.zeros((1, s - 1))])
        else:
            if self.class_matrix is None:
                raise SpecError("class_stat='custom' requires class_matrix")
            S = np.array(self.class_matrix, dtype=float)
            if S.shape != (s, s - 1):
                raise SpecError(f"class_matrix must have shape {(s, s - 1)}, got {S.shape}")
            if np.linalg.cond(S[: s - 1]) > _COND_LIMIT:
                raise SpecError("class statistics S(0..s-2) are not linearly independent")
            if np.linalg.cond(S[: s - 1] - S[s - 1]) > _COND_LIMIT:
                raise SpecError("class statistics are affinely dependent; alpha is not identifiable")

        if self.feature_matrix is None:
            T = np.vstack([np.eye(m - 1), np.zeros((1, m - 1))])
        else:
            T = np.array(self.feature_matrix, dtype=float)
            if T.shape != (m, m - 1):
                raise SpecError(f"feature_matrix must have shape {(m, m - 1)}, got {T.shape}")
            if np.linalg.cond(np.hstack([T, np.ones((m, 1))])) > _COND_LIMIT:
                raise SpecError("feature statistic is not minimal (rows affinely dependent)")
        S.setflags(write=False)
        T.setflags(write=False)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "T", T)

    @property
    def a(self) -> int:
        """Length of alpha."""
        return self.S.shape[1]

    @property
    def t(self) -> int:
        return self.T.shape[1]

    @property
    def dim(self) -> int:
        return self.a + self.s * self.t

    @property
    def minimal(self) -> bool:
        return self.class_stat != "onehot"

    @cached_property
    def standard_features(self) -> bool:
        std = np.vstack([np.eye(self.m - 1), np.zeros((1, self.m - 1))])
        return bool(np.array_equal(self.T, std))

    @cached_property
    def S_M(self) -> np.ndarray:
        """Columns ``S(0), ..., S(s-2)``."""
        return self.S[: self.s - 1].T.copy()

    @cached_property
    def M_inv(self) -> np.ndarray:
        """Inverse of the matrix with columns ``S(i) - S(s-1)``, ``i < s-1``.

        Maps ``alpha_star - S(s-1)`` to the first ``s-1`` class
        probabilities.  Equals ``S_M^{-1}`` whenever ``S(s-1) = 0``.
        """
        self._require_minimal()
        return np.linalg.inv(self.S_M - self.S[self.s - 1][:, None])

    @cached_property
    def stat_matrix(self) -> np.ndarray:
        """Stacked statistic ``R(x, y)`` for every cell, shape ``(m*s, dim)``."""
        R = np.zeros((self.m * self.s, self.dim))
        for x in range(self.m):
            for y in range(self.s):
                R[x * self.s + y] = self._stacked(x, y)
        R.setflags(write=False)
        return R

    def _stacked(self, x, y):
        r = np.zeros(self.dim)
        r[: self.a] = self.S[y]
        off = self.a + y * self.t
        r[off: off + self.t] = self.T[x]
        return r

    def _require_minimal(self):
        if not self.minimal:
            raise SpecError("operation requires a minimal class statistic")

    def _require_standard_features(self):
        if not self.standard_features:
            raise SpecError("dual-coordinate operations require the standard categorical feature statistic")

    def check_index(self, x, y=None):
        if not 0 <= x < self.m:
            raise IndexError(f"feature index {x} out of range [0, {self.m})")
        if y is not None and not 0 <= y < self.s:
            raise IndexError(f"class index {y} out of range [0, {self.s})")

    def to_dict(self) -> dict:
        d = {"s": self.s, "m": self.m, "class_stat": self.class_stat}
        if self.class_stat == "custom":
            d["class_matrix"] = self.S.tolist()
        if not self.standard_features:
            d["feature_matrix"] = self.T.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["s"], d["m"], d.get("class_stat", "minimal"),
                   d.get("class_matrix"), d.get("feature_matrix"))


def _frozen(arr, shape=None):
    arr = np.array(arr, dtype=float)
    if shape is not None and arr.shape != shape:
        raise SpecError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class NaturalParams:
    """Primal coordinates: ``alpha`` (length ``spec.a``) and ``beta`` (``s x t``)."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", _frozen(self.alpha))
        object.__setattr__(self, "beta", _frozen(np.atleast_2d(self.beta)))
        if not (np.all(np.isfinite(self.alpha)) and np.all(np.isfinite(self.beta))):
            raise SpecError("natural parameters must be finite")

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "NaturalParams":
        return cls(np.zeros(spec.a), np.zeros((spec.s, spec.t)))

    @classmethod
    def from_stacked(cls, spec: ModelSpec, vec) -> "NaturalParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (spec.dim,):
            raise SpecError(f"stacked vector must have length {spec.dim}, got {vec.shape}")
        return cls(vec[: spec.a], vec[spec.a:].reshape(spec.s, spec.t))

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta.ravel()])

    def check(self, spec: ModelSpec) -> "NaturalParams":
        if self.alpha.shape != (spec.a,) or self.beta.shape != (spec.s, spec.t):
            raise SpecError(
                f"parameter shapes {self.alpha.shape}, {self.beta.shape} do not match "
                f"spec (a={spec.a}, s={spec.s}, t={spec.t})")
        return self

    def to_dict(self) -> dict:
        return {"kind": "natural", "alpha_shape": list(self.alpha.shape),
                "beta_shape": list(self.beta.shape),
                "alpha": self.alpha.tolist(), "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NaturalParams":
        alpha = np.asarray(d["alpha"], dtype=float).reshape(d["alpha_shape"])
        beta = np.asarray(d["beta"], dtype=float).reshape(d["beta_shape"])
        return cls(alpha, beta)


@dataclass(frozen=True, eq=False)
class ExpectationParams:
    """Dual coordinates ``alpha_star = E[S(y)]`` and ``beta_star[i] = P(y=i) E[T(x) | y=i]``."""

    alpha_star: np.ndarray
    beta_star: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha_star", _frozen(self.alpha_star))
        object.__setattr__(self, "beta_star", _frozen(np.atleast_2d(self.beta_star)))

    @classmethod
    def from_stacked(cls, spec: ModelSpec, vec) -> "ExpectationParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (spec.dim,):
            raise SpecError(f"stacked vector must have length {spec.dim}, got {vec.shape}")
        return cls(vec[: spec.a], vec[spec.a:].reshape(spec.s, spec.t))

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.alpha_star, self.beta_star.ravel()])

    def class_probs(self, spec: ModelSpec, strict=False) -> np.ndarray:
        return decode_dual(spec, self, strict)[0]

    def theta(self, spec: ModelSpec, strict=False) -> np.ndarray:
        """Per-class conditional expectations ``theta[i] = beta_star[i] / P(y=i)``."""
        return decode_dual(spec, self, strict)[1]

    def to_dict(self) -> dict:
        return {"kind": "expectation", "alpha_shape": list(self.alpha_star.shape),
                "beta_shape": list(self.beta_star.shape),
                "alpha_star": self.alpha_star.tolist(), "beta_star": self.beta_star.tolist()}


@dataclass(frozen=True, eq=False)
class ClassicalParams:
    """Separate natural parameters of the class marginal and of each class conditional."""

    alpha_bar: np.ndarray
    theta_bar: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha_bar", _frozen(self.alpha_bar))
        object.__setattr__(self, "theta_bar", _frozen(np.atleast_2d(self.theta_bar)))


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Strictly positive joint probability table of shape ``(m, s)``."""

    table: np.ndarray

    def __post_init__(self):
        table = _frozen(self.table)
        if table.ndim != 2 or table.shape[0] < 2 or table.shape[1] < 2:
            raise SpecError(f"table must be (m, s) with m, s >= 2, got {table.shape}")
        if not np.all(np.isfinite(table)) or np.any(table <= 0):
            raise SpecError("ground-truth table must be strictly positive")
        if abs(table.sum() - 1.0) > 1e-12:
            raise SpecError(f"ground-truth table sums to {table.sum():.15f}, not 1")
        object.__setattr__(self, "table", table)

    @property
    def m(self) -> int:
        return self.table.shape[0]

    @property
    def s(self) -> int:
        return self.table.shape[1]

    @classmethod
    def from_model(cls, spec: ModelSpec, eta: NaturalParams) -> "GroundTruth":
        table = np.exp(joint_log_table(spec, eta))
        return cls(table / table.sum())

    @classmethod
    def random_table(cls, s: int, m: int, rng: np.random.Generator) -> "GroundTruth":
        table = rng.dirichlet(np.ones(m * s)).reshape(m, s)
        return cls(table / table.sum())

    def to_json(self) -> str:
        return json.dumps({"s": self.s, "m": self.m, "table": self.table.ravel().tolist()})

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        d = json.loads(text)
        s, m = int(d["s"]), int(d["m"])
        table = np.asarray(d["table"], dtype=float)
        if table.size != m * s:
            raise SpecError(f"table has {table.size} entries, expected m*s = {m * s}")
        return cls(table.reshape(m, s))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_json(Path(path).read_text())


# -- primal quantities --------------------------------------------------------

def cell_logits(spec: ModelSpec, eta: NaturalParams) -> np.ndarray:
    """Unnormalised log-probabilities ``S(y).alpha + beta[y].T(x)``, shape ``(m, s)``."""
    eta.check(spec)
    return spec.T @ eta.beta.T + (spec.S @ eta.alpha)[None, :]


def log_partition(spec: ModelSpec, eta: NaturalParams) -> float:
    return float(logsumexp(cell_logits(spec, eta)))


def joint_log_table(spec: ModelSpec, eta: NaturalParams) -> np.ndarray:
    logits = cell_logits(spec, eta)
    return logits - logsumexp(logits)


def joint_log_prob(spec: ModelSpec, eta: NaturalParams, x: int, y: int) -> float:
    spec.check_index(x, y)
    return float(joint_log_table(spec, eta)[x, y])


def h_vector(spec: ModelSpec, eta: NaturalParams, x: int) -> np.ndarray:
    """``(log P(x, y=0), ..., log P(x, y=s-1))``."""
    spec.check_index(x)
    return joint_log_table(spec, eta)[x].copy()


def conditional_table(spec: ModelSpec, eta: NaturalParams) -> np.ndarray:
    """``P(y | x)`` for every ``x``, shape ``(m, s)``."""
    logits = cell_logits(spec, eta)
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


def conditional_y_given_x(spec: ModelSpec, eta: NaturalParams, x: int) -> np.ndarray:
    spec.check_index(x)
    logits = eta.alpha @ spec.S.T + eta.beta @ spec.T[x]
    p = np.exp(logits - logits.max())
    return p / p.sum()


def stacked_statistic(spec: ModelSpec, x: int, y: int) -> np.ndarray:
    """``R(x, y) = (S(y), T(x) [y=0], ..., T(x) [y=s-1])``."""
    spec.check_index(x, y)
    return spec._stacked(x, y)


def natural_to_expectation(spec: ModelSpec, eta: NaturalParams) -> ExpectationParams:
    P = np.exp(joint_log_table(spec, eta))
    return ExpectationParams(spec.S.T @ P.sum(axis=0), P.T @ spec.T)


def statistic_covariance(spec: ModelSpec, eta: NaturalParams) -> np.ndarray:
    """Covariance of ``R(x, y)`` under ``P_eta`` by enumeration."""
    R = spec.stat_matrix
    p = np.exp(joint_log_table(spec, eta)).ravel()
    mu = p @ R
    return (R * p[:, None]).T @ R - np.outer(mu, mu)


# -- dual side ----------------------------------------------------------------

def _clamp_simplex(pi, strict, what, renormalize):
    bad = (pi < EPS_P) | (pi > 1 - EPS_P) | ~np.isfinite(pi)
    n = int(bad.sum())
    if n:
        if strict:
            raise InteriorityError(f"{what} outside ({EPS_P}, 1-{EPS_P}): {pi}")
        logger.debug("clamped %d entries of %s", n, what)
        pi = np.clip(np.nan_to_num(pi, nan=EPS_P), EPS_P, 1 - EPS_P)
        if renormalize:
            pi = pi / pi.sum()
    return pi, n


def decode_dual(spec: ModelSpec, eta_star: ExpectationParams, strict=False):
    """Class probabilities, per-class expectations and the reference mass.

    Returns ``(pi, theta, rest, n_clamped)`` where ``rest[i] = 1 - sum(theta[i])``
    is the conditional probability of the reference feature value.  Values
    outside the interior are clamped to ``EPS_P`` (counted in ``n_clamped``),
    or raise :class:`InteriorityError` when ``strict``.
    """
    spec._require_standard_features()
    alpha_star = np.asarray(eta_star.alpha_star, dtype=float)
    beta_star = np.asarray(eta_star.beta_star, dtype=float)
    if spec.minimal:
        head = spec.M_inv @ (alpha_star - spec.S[spec.s - 1])
        pi = np.append(head, 1.0 - head.sum())
    else:
        pi = alpha_star.copy()
    pi, n1 = _clamp_simplex(pi, strict, "class probabilities", renormalize=spec.minimal)

    theta = beta_star / pi[:, None]
    theta, n2 = _clamp_simplex(theta, strict, "conditional expectations", renormalize=False)
    rest = 1.0 - theta.sum(axis=1)
    low = rest < EPS_P
    n3 = int(low.sum())
    if n3:
        if strict:
            raise InteriorityError("conditional expectations leave no mass on the reference value")
        logger.debug("clamped %d reference masses", n3)
        theta[low] *= ((1 - EPS_P) / theta[low].sum(axis=1))[:, None]
        rest = 1.0 - theta.sum(axis=1)
    return pi, theta, rest, n1 + n2 + n3


def class_probabilities(spec: ModelSpec, eta_star: ExpectationParams, strict=False) -> np.ndarray:
    return decode_dual(spec, eta_star, strict)[0]


def classical_to_natural(spec: ModelSpec, c: ClassicalParams) -> NaturalParams:
    """Change of variables from (class marginal, class conditionals) parameters.

    ``P(y) ~ exp(S(y).alpha_bar)`` and ``P(x | y) ~ exp(theta_bar[y].T(x))``.
    For one-hot statistics ``alpha_bar`` has length ``s``.
    """
    theta_bar = np.asarray(c.theta_bar, dtype=float)
    log_A = logsumexp(theta_bar @ spec.T.T, axis=1)
    alpha_bar = np.asarray(c.alpha_bar, dtype=float)
    if not spec.minimal:
        return NaturalParams(alpha_bar - log_A, theta_bar)
    s = spec.s
    S_M = spec.S_M
    w = np.linalg.solve(S_M, spec.S[s - 1])
    denom = w.sum() - 1.0
    if abs(denom) < 1e-12:
        raise SpecError("class statistic is affinely dependent; change of variables undefined")
    mu = (w @ log_A[: s - 1] - log_A[s - 1]) / denom
    alpha = alpha_bar - np.linalg.solve(S_M.T, log_A[: s - 1] - mu)
    return NaturalParams(alpha, theta_bar)


def expectation_to_natural(spec: ModelSpec, eta_star: ExpectationParams, strict=False) -> NaturalParams:
    pi, theta, rest, _ = decode_dual(spec, eta_star, strict)
    theta_bar = np.log(theta) - np.log(rest)[:, None]
    log_pi = np.log(pi)
    if spec.minimal:
        alpha_bar = spec.M_inv.T @ (log_pi[:-1] - log_pi[-1])
    else:
        alpha_bar = log_pi
    return classical_to_natural(spec, ClassicalParams(alpha_bar, theta_bar))


def h_vector_dual(spec: ModelSpec, eta_star_vec, x: int) -> np.ndarray:
    """``h`` evaluated straight from dual coordinates, without clamping.

    ``log pi_i + log P(x | theta_i)``.  For minimal statistics this agrees with
    :func:`h_vector` at ``expectation_to_natural(eta_star)``.  For one-hot
    statistics ``pi = alpha_star`` is not renormalised, which extends ``h`` off
    the simplex; that extension is the one whose Jacobian has a diagonal
    alpha block.
    """
    spec._require_standard_features()
    spec.check_index(x)
    es = ExpectationParams.from_stacked(spec, eta_star_vec)
    if spec.minimal:
        head = spec.M_inv @ (es.alpha_star - spec.S[spec.s - 1])
        pi = np.append(head, 1.0 - head.sum())
    else:
        pi = es.alpha_star
    theta = es.beta_star / pi[:, None]
    px = theta[:, x] if x < spec.t else 1.0 - theta.sum(axis=1)
    return np.log(pi) + np.log(px)


# -- objectives ---------------------------------------------------------------

def expected_nll(spec: ModelSpec, eta: NaturalParams, truth: GroundTruth) -> float:
    """``E_P[-log P_eta(y | x)]`` by enumeration."""
    _check_truth(spec, truth)
    logits = cell_logits(spec, eta)
    log_cond = logits - logsumexp(logits, axis=1, keepdims=True)
    return float(-(truth.table * log_cond).sum())


def conditional_entropy(truth: GroundTruth) -> float:
    """``E_{P(x)}[H(P(y | x))]``."""
    P = truth.table
    log_cond = np.log(P) - np.log(P.sum(axis=1, keepdims=True))
    return float(-(P * log_cond).sum())


def expected_kl(spec: ModelSpec, eta: NaturalParams, truth: GroundTruth) -> float:
    """``E_{P(x)}[KL(P(y | x) || P_eta(y | x))]`` by enumeration."""
    _check_truth(spec, truth)
    P = truth.table
    log_true = np.log(P) - np.log(P.sum(axis=1, keepdims=True))
    logits = cell_logits(spec, eta)
    log_model = logits - logsumexp(logits, axis=1, keepdims=True)
    return max(float((P * (log_true - log_model)).sum()), 0.0)


def _check_truth(spec, truth):
    if truth.table.shape != (spec.m, spec.s):
        raise SpecError(f"ground truth shape {truth.table.shape} does not match (m, s) = {(spec.m, spec.s)}")


# -- sampling -----------------------------------------------------------------

def _table_of(source) -> np.ndarray:
    if isinstance(source, GroundTruth):
        return source.table
    spec, eta = source
    return np.exp(joint_log_table(spec, eta))


def sample_stream(source, n: int, rng: np.random.Generator):
    """Draw ``n`` pairs by inverse CDF on the flattened joint table.

    ``source`` is a :class:`GroundTruth` or a ``(spec, eta)`` pair.  Returns
    ``(xs, ys)`` as int64 arrays.
    """
    table = _table_of(source)
    s = table.shape[1]
    cdf = np.cumsum(table.ravel())
    cells = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    np.minimum(cells, cdf.size - 1, out=cells)
    return (cells // s).astype(np.int64), (cells % s).astype(np.int64)


def sample(source, rng: np.random.Generator):
    xs, ys = sample_stream(source, 1, rng)
    return int(xs[0]), int(ys[0])


# -- potential ----------------------------------------------------------------

class LexyfPotential(ConvexPotential):
    """Log-partition of a minimal family as a potential on stacked vectors.

    Gradient and Hessian are exact (enumerated moments); the dual inverse is
    the closed-form :func:`expectation_to_natural` in strict mode.
    """

    def __init__(self, spec: ModelSpec):
        spec._require_minimal()
        self.spec = spec
        self.dim = spec.dim

    def _eta(self, vec):
        return NaturalParams.from_stacked(self.spec, vec)

    def value(self, eta):
        return log_partition(self.spec, self._eta(eta))

    def gradient(self, eta):
        return natural_to_expectation(self.spec, self._eta(eta)).stacked()

    def hessian(self, eta):
        return statistic_covariance(self.spec, self._eta(eta))

    def dual_inverse(self, eta_star):
        es = ExpectationParams.from_stacked(self.spec, eta_star)
        return expectation_to_natural(self.spec, es, strict=True).stacked()


def kl_joint(spec: ModelSpec, p: NaturalParams, q: NaturalParams) -> float:
    """``KL(P_p || P_q)`` between two joint members, by enumeration."""
    lp, lq = joint_log_table(spec, p), joint_log_table(spec, q)
    return float((np.exp(lp) * (lp - lq)).sum())


def random_natural(spec: ModelSpec, rng: np.random.Generator, scale=2.0) -> NaturalParams:
    """Entries uniform on ``[-scale, scale]``."""
    return NaturalParams.from_stacked(spec, rng.uniform(-scale, scale, spec.dim))
