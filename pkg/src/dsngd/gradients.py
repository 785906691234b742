"""Gradients of the conditional log-likelihood ``log P_eta(y | x)``.

All directions returned here are ascent directions of the log-likelihood,
laid out as stacked vectors ``(alpha, beta[0], ..., beta[s-1])``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import SpecError
from .geometry import natural_gradient_via_metric
from .lexyf import (
    ExpectationParams,
    ModelSpec,
    NaturalParams,
    conditional_y_given_x,
    decode_dual,
    statistic_covariance,
)


def q_vector(conditional: np.ndarray, i: int) -> np.ndarray:
    """One-hot of class ``i`` minus the conditional class probabilities."""
    q = -np.asarray(conditional, dtype=float)
    q[i] += 1.0
    return q


def sgd_gradient(spec: ModelSpec, eta: NaturalParams, x: int, y: int) -> np.ndarray:
    spec.check_index(x, y)
    q = q_vector(conditional_y_given_x(spec, eta, x), y)
    return np.concatenate([spec.S.T @ q, np.outer(q, spec.T[x]).ravel()])


@dataclass(frozen=True, eq=False)
class DualGradientBlocks:
    """Jacobian of ``h(x, .)`` in dual coordinates, kept in factored form.

    ``alpha_block`` is ``(a, s)``.  The Jacobian with respect to ``beta_star[k]``
    has a single non-zero column ``k``, stored as ``beta_diag[k]``; it is never
    densified on the update path.
    """

    alpha_block: np.ndarray
    beta_diag: np.ndarray
    d: np.ndarray

    def assemble(self) -> np.ndarray:
        """Dense ``(dim, s)`` Jacobian; for checks only."""
        a = self.alpha_block.shape[0]
        s, t = self.beta_diag.shape
        J = np.zeros((a + s * t, s))
        J[:a] = self.alpha_block
        for k in range(s):
            J[a + k * t: a + (k + 1) * t, k] = self.beta_diag[k]
        return J


def categorical_score(theta: np.ndarray, rest: np.ndarray, x: int) -> np.ndarray:
    """``grad_theta log P(x | theta)`` for every class at once, shape ``(s, t)``.

    ``theta`` holds the non-reference cell probabilities of each class
    conditional and ``rest`` the reference mass.
    """
    s, t = theta.shape
    if x < t:
        g = np.zeros((s, t))
        g[:, x] = 1.0 / theta[:, x]
        return g
    return np.repeat((-1.0 / rest)[:, None], t, axis=1)


def _blocks_common(spec, eta_star, x, strict):
    spec.check_index(x)
    pi, theta, rest, _ = decode_dual(spec, eta_star, strict)
    g = categorical_score(theta, rest, x)
    d = (1.0 - np.einsum("kj,kj->k", theta, g)) / pi
    return pi, g / pi[:, None], d


def grad_h_dual(spec: ModelSpec, eta_star: ExpectationParams, x: int, strict=False) -> DualGradientBlocks:
    """Blocks of ``grad_{eta*} h(x, eta*)`` for a minimal class statistic."""
    if not spec.minimal:
        raise SpecError("grad_h_dual needs a minimal class statistic; use grad_h_dual_onehot")
    _, beta_diag, d = _blocks_common(spec, eta_star, x, strict)
    # M^{-T} [Id | -1] diag(d)
    MinvT = spec.M_inv.T
    alpha_block = np.empty((spec.a, spec.s))
    alpha_block[:, :-1] = MinvT * d[:-1]
    alpha_block[:, -1] = -MinvT.sum(axis=1) * d[-1]
    return DualGradientBlocks(alpha_block, beta_diag, d)


def grad_h_dual_onehot(spec: ModelSpec, eta_star: ExpectationParams, x: int, strict=False) -> DualGradientBlocks:
    """Blocks for the one-hot class statistic: the alpha block is ``diag(d)``."""
    if spec.minimal:
        raise SpecError("grad_h_dual_onehot needs the one-hot class statistic")
    _, beta_diag, d = _blocks_common(spec, eta_star, x, strict)
    return DualGradientBlocks(np.diag(d), beta_diag, d)


def dual_gradient_blocks(spec, eta_star, x, strict=False) -> DualGradientBlocks:
    if spec.minimal:
        return grad_h_dual(spec, eta_star, x, strict)
    return grad_h_dual_onehot(spec, eta_star, x, strict)


def dsngd_direction(blocks: DualGradientBlocks, q: np.ndarray) -> np.ndarray:
    """``grad h(x, eta*) . q`` without materialising the beta blocks."""
    q = np.asarray(q, dtype=float)
    return np.concatenate([blocks.alpha_block @ q, (blocks.beta_diag * q[:, None]).ravel()])


def fisher_exact(spec: ModelSpec, eta: NaturalParams) -> np.ndarray:
    """Fisher information of the joint model in natural coordinates.

    Singular for one-hot statistics, so those are refused.
    """
    if not spec.minimal:
        raise SpecError("Fisher matrix is singular for the one-hot class statistic")
    return statistic_covariance(spec, eta)


def natural_gradient_oracle(spec: ModelSpec, eta: NaturalParams, x: int, y: int, G=None) -> np.ndarray:
    """``G^{-1}`` times the SGD gradient, with the exact Fisher matrix unless ``G`` is given."""
    if G is None:
        G = fisher_exact(spec, eta)
    return natural_gradient_via_metric(G, sgd_gradient(spec, eta, x, y))
