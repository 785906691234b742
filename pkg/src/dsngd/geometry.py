"""Dually flat geometry generated by a smooth strictly convex potential.

A potential ``F`` on an open convex set gives two coordinate systems: the
primal point ``eta`` and the dual point ``eta_star = grad F(eta)``.  The metric
in primal coordinates is ``hess F(eta)``; in dual coordinates it is the
inverse matrix.  Everything here works on flat 1-d numpy vectors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .exceptions import (
    ConvexityError,
    DomainError,
    InversionError,
    NotPositiveDefiniteError,
)

BREGMAN_SLACK = 1e-12
NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 100
FD_STEP = 1e-5


class ConvexPotential:
    """Base class for a smooth strictly convex function ``F`` on R^n.

    Subclasses must implement :meth:`value`.  :meth:`gradient` and
    :meth:`hessian` default to central finite differences, which is adequate
    for test potentials but not for anything precision-sensitive.  Override
    :meth:`dual_inverse` when ``(grad F)^{-1}`` has a closed form.
    """

    dim: int

    def value(self, eta: np.ndarray) -> float:
        raise NotImplementedError

    def gradient(self, eta: np.ndarray) -> np.ndarray:
        return finite_difference_gradient(self.value, eta)

    def hessian(self, eta: np.ndarray) -> np.ndarray:
        jac = finite_difference_jacobian(self.gradient, eta)
        return 0.5 * (jac + jac.T)

    def dual_inverse(self, eta_star: np.ndarray) -> np.ndarray | None:
        return None


class QuadraticPotential(ConvexPotential):
    """``F(eta) = 0.5 * eta^T A eta`` with ``A`` SPD (identity by default)."""

    def __init__(self, dim: int, A: np.ndarray | None = None):
        self.dim = dim
        self.A = np.eye(dim) if A is None else np.asarray(A, dtype=float)

    def value(self, eta):
        eta = np.asarray(eta, dtype=float)
        return 0.5 * float(eta @ self.A @ eta)

    def gradient(self, eta):
        return self.A @ np.asarray(eta, dtype=float)

    def hessian(self, eta):
        return self.A.copy()

    def dual_inverse(self, eta_star):
        return np.linalg.solve(self.A, np.asarray(eta_star, dtype=float))


class FunctionPotential(ConvexPotential):
    """Wrap plain callables; missing derivatives fall back to finite differences."""

    def __init__(self, dim, value, gradient=None, hessian=None):
        self.dim = dim
        self._value = value
        self._gradient = gradient
        self._hessian = hessian

    def value(self, eta):
        return float(self._value(np.asarray(eta, dtype=float)))

    def gradient(self, eta):
        if self._gradient is None:
            return super().gradient(eta)
        return np.asarray(self._gradient(np.asarray(eta, dtype=float)), dtype=float)

    def hessian(self, eta):
        if self._hessian is None:
            return super().hessian(eta)
        return np.asarray(self._hessian(np.asarray(eta, dtype=float)), dtype=float)


@dataclass(frozen=True)
class DualPoint:
    """Coordinates of a point in the image of ``grad F``."""

    coords: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=float)
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    def __array__(self, dtype=None, copy=None):
        return self.coords if dtype is None else self.coords.astype(dtype)

    def __len__(self):
        return len(self.coords)


def _coords(point) -> np.ndarray:
    if isinstance(point, DualPoint):
        return point.coords
    return np.asarray(point, dtype=float)


def _stencil(order):
    if order == 2:
        return ((1, 0.5), (-1, -0.5))
    if order == 4:
        return ((2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12))
    raise ValueError(f"unsupported finite-difference order {order}")


def finite_difference_gradient(f, x, step=FD_STEP, order=2):
    """Central-difference gradient of a scalar function."""
    return finite_difference_jacobian(lambda v: np.asarray(f(v), dtype=float), x, step, order)


def finite_difference_jacobian(f, x, step=FD_STEP, order=2):
    """Central-difference Jacobian ``J[..., j] = d f / d x_j`` (order 2 or 4)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        acc = 0.0
        for k, w in _stencil(order):
            e = np.zeros_like(x)
            e[j] = k * step
            acc = acc + w * np.asarray(f(x + e), dtype=float)
        cols.append(acc / step)
    return np.stack(cols, axis=-1)


def cholesky(G: np.ndarray):
    """Lower Cholesky factor of ``G``; raises :class:`NotPositiveDefiniteError`."""
    G = np.asarray(G, dtype=float)
    if not np.all(np.isfinite(G)):
        raise NotPositiveDefiniteError("matrix has non-finite entries")
    try:
        return scipy.linalg.cho_factor(G, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"Cholesky factorisation failed: {exc}") from exc


def potential_value(F: ConvexPotential, eta) -> float:
    val = F.value(_coords(eta))
    if not np.isfinite(val):
        raise DomainError(f"potential is not finite at the given point ({val})")
    return float(val)


def bregman_divergence(F: ConvexPotential, eta, eta_prime) -> float:
    """``F(eta) - F(eta') - (eta - eta')^T grad F(eta')``."""
    eta, eta_prime = _coords(eta), _coords(eta_prime)
    f, fp = potential_value(F, eta), potential_value(F, eta_prime)
    div = f - fp - float((eta - eta_prime) @ F.gradient(eta_prime))
    slack = BREGMAN_SLACK * max(1.0, abs(f), abs(fp))
    if div < -slack:
        raise ConvexityError(f"Bregman divergence is negative ({div:.3e}); potential is not convex")
    return max(div, 0.0)


def to_dual(F: ConvexPotential, eta) -> DualPoint:
    return DualPoint(F.gradient(_coords(eta)))


def from_dual(F: ConvexPotential, eta_star, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER) -> np.ndarray:
    """Invert ``eta_star = grad F(eta)``.

    Uses the potential's closed form when it has one, otherwise damped Newton
    from the origin with step halving whenever the residual fails to drop.
    """
    target = _coords(eta_star)
    closed = F.dual_inverse(target)
    if closed is not None:
        return np.asarray(closed, dtype=float)

    eta = np.zeros_like(target)
    resid = F.gradient(eta) - target
    norm = np.max(np.abs(resid))
    for _ in range(max_iter):
        if norm <= tol:
            return eta
        step = scipy.linalg.cho_solve(cholesky(F.hessian(eta)), resid)
        scale = 1.0
        while True:
            cand = eta - scale * step
            cand_resid = F.gradient(cand) - target
            cand_norm = np.max(np.abs(cand_resid))
            if np.isfinite(cand_norm) and cand_norm < norm:
                break
            scale *= 0.5
            if scale < 1e-12:
                raise InversionError("Newton line search stalled", norm)
        eta, resid, norm = cand, cand_resid, cand_norm
    if norm <= tol:
        return eta
    raise InversionError(f"Newton did not converge in {max_iter} iterations", norm)


def metric_primal(F: ConvexPotential, eta) -> np.ndarray:
    G = np.asarray(F.hessian(_coords(eta)), dtype=float)
    cholesky(G)
    return G


def metric_dual(F: ConvexPotential, eta_star) -> np.ndarray:
    """Metric in dual coordinates: the inverse of the primal metric at ``from_dual(eta_star)``."""
    G = metric_primal(F, from_dual(F, eta_star))
    return scipy.linalg.cho_solve(cholesky(G), np.eye(G.shape[0]))


def check_crouzeix(F: ConvexPotential, eta, eta_star=None) -> float:
    """Max-abs deviation of ``G_eta @ G_eta_star`` from the identity.

    ``eta_star`` defaults to the exact dual of ``eta``; passing anything else
    is a negative control.
    """
    eta = _coords(eta)
    if eta_star is None:
        eta_star = to_dual(F, eta)
    prod = metric_primal(F, eta) @ metric_dual(F, eta_star)
    return float(np.max(np.abs(prod - np.eye(prod.shape[0]))))


def legendre_dual_value(F: ConvexPotential, eta_star) -> float:
    """``F*(eta_star)``; the supremum is attained at ``eta = from_dual(eta_star)``."""
    target = _coords(eta_star)
    eta = from_dual(F, target)
    return float(target @ eta) - potential_value(F, eta)


def canonical_divergence(F: ConvexPotential, eta, eta_prime) -> float:
    """``F(eta) + F*(eta'*) - eta . eta'*`` with ``F*`` evaluated at ``eta'`` directly."""
    eta, eta_prime = _coords(eta), _coords(eta_prime)
    dual_prime = F.gradient(eta_prime)
    conj = float(dual_prime @ eta_prime) - potential_value(F, eta_prime)
    return potential_value(F, eta) + conj - float(eta @ dual_prime)


def natural_gradient_via_metric(G: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Solve ``G v = g`` by Cholesky."""
    return scipy.linalg.cho_solve(cholesky(G), np.asarray(g, dtype=float), check_finite=False)
