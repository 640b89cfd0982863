"""Generalized primal-dual iteration for the L2+L1 regularized control problem.

Minimizes ``1/2 ||L u0 - uT||^2 + tau/2 ||u0||^2 + beta ||u0||_1`` through its
saddle-point form with dual variable ``p``.  Each iteration costs one
adjoint solve (the u-step) and one forward solve (the p-step); both
proximal subproblems have closed forms.  With ``theta = rho = sigma = 1``
the scheme is plain Chambolle-Pock.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NonFiniteIterate, RelaxationViolation, StepSizeViolation, UnsupportedConfig
from .grid import Field
from .pde import TimeStepOperator, estimate_opnorm

logger = logging.getLogger(__name__)

S_SAFETY = 0.999


@dataclass(frozen=True)
class PdhgParams:
    """Step sizes, relaxation factors, regularization weights and stopping rule.

    ``s=None`` is filled in by :func:`validate_params` as
    ``0.999 / (r * ||L L*||)``; ``beta=None`` means ``dx**4`` of the grid the
    solver runs on.  For ``theta < 1`` a missing ``sigma`` becomes
    ``theta / rho``.
    """

    theta: float = 1.0
    r: float = 6.0
    s: Optional[float] = None
    rho: float = 1.9
    sigma: Optional[float] = 1.9
    tau: float = 1e-2
    beta: Optional[float] = None
    tol: float = 1e-5
    kmax: int = 1000

    @classmethod
    def chambolle_pock(cls, **kw) -> "PdhgParams":
        return cls(theta=1.0, rho=1.0, sigma=1.0, **kw)


@dataclass
class OptimizerResult:
    u0_star: Field
    p_star: Field
    iterations: int
    converged: bool
    residual_history: list[float]
    diag_knorm_history: Optional[list[float]] = None
    ergodic_u0: Optional[Field] = None
    params: object = None
    opnorm: Optional[float] = None


def relaxation_bound(theta: float) -> float:
    """Upper limit ``1 + theta - sqrt(1 - theta)`` on ``rho`` when ``theta < 1``."""
    return 1.0 + theta - math.sqrt(1.0 - theta)


def check_relaxation(p: PdhgParams) -> Optional[float]:
    """Relaxation rules that do not involve the operator; returns the effective ``sigma``."""
    if not 0 < p.theta <= 1:
        raise RelaxationViolation(f"theta must lie in (0, 1], got {p.theta!r}")
    sigma = p.sigma
    if p.theta == 1.0:
        if sigma is None:
            sigma = p.rho
        if p.rho != sigma:
            raise RelaxationViolation(f"theta = 1 requires rho = sigma, got rho={p.rho!r}, sigma={sigma!r}")
        if not 0 < p.rho < 2:
            raise RelaxationViolation(f"theta = 1 requires rho = sigma in (0, 2), got {p.rho!r}")
    else:
        bound = relaxation_bound(p.theta)
        if not 0 < p.rho <= bound:
            raise RelaxationViolation(
                f"rho in (0, 1 + theta - sqrt(1 - theta)] violated: rho = {p.rho!r} > {bound:.6g}"
            )
        expected = p.theta / p.rho
        if sigma is None:
            sigma = expected
        if not math.isclose(sigma, expected, rel_tol=1e-12):
            raise RelaxationViolation(f"theta < 1 requires sigma = theta/rho = {expected:.6g}, got {sigma!r}")
    return sigma


def validate_params(p: PdhgParams, opnorm: float) -> PdhgParams:
    """Check step-size and relaxation rules; fill ``s`` (and ``sigma``) if absent.

    Raises
    ------
    StepSizeViolation
        ``r * s >= 1 / opnorm`` or a non-positive step.
    RelaxationViolation
        ``theta = 1`` with ``rho != sigma`` or ``rho`` outside ``(0, 2)``;
        ``theta < 1`` with ``rho`` outside ``(0, 1 + theta - sqrt(1 - theta)]``
        or ``sigma != theta / rho``.
    """
    if not opnorm > 0:
        raise ValueError(f"opnorm must be positive, got {opnorm!r}")
    sigma = check_relaxation(p)
    if not p.r > 0:
        raise StepSizeViolation(f"r must be positive, got {p.r!r}")
    s = p.s if p.s is not None else S_SAFETY / (p.r * opnorm)
    if not s > 0:
        raise StepSizeViolation(f"s must be positive, got {s!r}")
    if not p.r * s < 1.0 / opnorm:
        raise StepSizeViolation(
            f"r*s < 1/||LL*|| violated: r*s = {p.r * s:.6g} >= 1/{opnorm:.6g} = {1 / opnorm:.6g}"
        )
    if not p.tau > 0:
        raise ValueError(f"tau must be positive, got {p.tau!r}")
    if p.beta is not None and p.beta < 0:
        raise ValueError(f"beta must be non-negative, got {p.beta!r}")
    if not p.tol > 0 or p.kmax < 1:
        raise ValueError("tol must be positive and kmax at least 1")
    return dataclasses.replace(p, s=s, sigma=sigma)


def shrinkage(a, gamma: float):
    """Soft thresholding ``sign(a) * max(|a| - gamma, 0)``, elementwise on arrays and fields."""
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma!r}")
    if isinstance(a, Field):
        return Field(a.grid, shrinkage(a.values, gamma), a.name)
    out = np.sign(a) * np.maximum(np.abs(a) - gamma, 0.0)
    return out if np.ndim(out) else float(out)


# flat-array kernels shared by the Field API and the iteration loop
def _u_step(u: np.ndarray, zeta: np.ndarray, r: float, tau: float, beta: float) -> np.ndarray:
    denom = tau * r + 1.0
    return shrinkage((u - r * zeta) / denom, beta * r / denom)


def _p_step(p: np.ndarray, Lubar: np.ndarray, s: float, uT: np.ndarray) -> np.ndarray:
    return p / (s + 1.0) + (s / (s + 1.0)) * (Lubar - uT)


def u_step(u0k: Field, pk: Field, op: TimeStepOperator, r: float, tau: float, beta: float) -> Field:
    zeta = op.adjoint(pk.flat)
    return Field.from_flat(op.grid, _u_step(u0k.flat, zeta, r, tau, beta), "u0_tilde")


def p_step(pk: Field, ubar: Field, op: TimeStepOperator, s: float, uT: Field) -> Field:
    Lubar = op.forward(ubar.flat)
    return Field.from_flat(op.grid, _p_step(pk.flat, Lubar, s, uT.flat), "p_tilde")


def _gram_form(du: np.ndarray, dp: np.ndarray, op: TimeStepOperator, r: float, s: float) -> float:
    """``(1/r)||du||^2 - 2<L du, dp> + (1/s)||dp||^2`` in the weighted pairing."""
    w = op.grid.cell_area
    Ldu = op.forward(du)
    return w * (np.dot(du, du) / r - 2.0 * np.dot(Ldu, dp) + np.dot(dp, dp) / s)


def diag_knorm(
    w_diff_u: Field,
    w_diff_p: Field,
    op: TimeStepOperator,
    r: float,
    s: float,
    rho: float,
    sigma: Optional[float] = None,
    theta: float = 1.0,
) -> float:
    """Non-ergodic progress measure for the ``theta = 1``, ``rho = sigma`` scheme.

    Returns ``rho * [(1/r)||du||^2 - 2<L du, dp> + (1/s)||dp||^2]`` with
    ``du = rho * w_diff_u`` and ``dp = sigma * w_diff_p``.  Along the
    iteration, with ``w_diff = w^k - w~^k``, this sequence is non-increasing.
    """
    sigma = rho if sigma is None else sigma
    if theta != 1.0 or rho != sigma:
        raise UnsupportedConfig("K-norm diagnostics need theta = 1 and rho = sigma")
    return _diag_knorm(w_diff_u.flat, w_diff_p.flat, op, r, s, rho)


def _diag_knorm(du, dp, op, r, s, rho):
    return rho * _gram_form(rho * du, rho * dp, op, r, s)


def knorm_sq(u: np.ndarray, p: np.ndarray, op: TimeStepOperator, r: float, s: float, rho: float) -> float:
    """Squared K-norm of ``(u, p)`` for ``theta = 1``, where ``K = G~ / rho``."""
    return _gram_form(np.ravel(u), np.ravel(p), op, r, s) / rho


def _rel_change(new: np.ndarray, old: np.ndarray) -> float:
    num = np.linalg.norm(new - old)
    den = np.linalg.norm(new)
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return float(num / den)


def beta_threshold(op: TimeStepOperator, uT: Field) -> float:
    """``||L* uT||_inf``: at or above this ``beta`` the optimal control is zero."""
    return float(np.max(np.abs(op.adjoint(uT.flat))))


def run_pdhg(
    op: TimeStepOperator,
    uT: Field,
    params: PdhgParams,
    u0_init: Optional[Field] = None,
    p_init: Optional[Field] = None,
    *,
    opnorm: Optional[float] = None,
    diagnostics: bool = False,
    callback: Optional[Callable[[int, np.ndarray, np.ndarray], None]] = None,
) -> OptimizerResult:
    """Run the generalized primal-dual iteration.

    Parameters
    ----------
    op : TimeStepOperator
        Forward map ``L`` and its adjoint.
    uT : Field
        Target final state.
    params : PdhgParams
        Validated here against ``opnorm`` (estimated if not given).
    u0_init, p_init : Field, optional
        Starting iterates, zero by default.
    diagnostics : bool
        Record :func:`diag_knorm` of ``w^k - w~^k`` each iteration (one extra
        forward solve per iteration).  Requires ``theta = 1``.
    callback : callable, optional
        Called as ``callback(k, u0, p)`` with flat arrays, first for the
        starting point (``k = 0``) and then after every update.

    Returns
    -------
    OptimizerResult
    """
    if opnorm is None:
        opnorm = estimate_opnorm(op)
    prm = validate_params(params, opnorm)
    if prm.beta is None:
        prm = dataclasses.replace(prm, beta=op.grid.dx**4)
    if diagnostics and (prm.theta != 1.0 or prm.rho != prm.sigma):
        raise UnsupportedConfig("diagnostics need theta = 1 and rho = sigma")

    theta, r, s, rho, sigma = prm.theta, prm.r, prm.s, prm.rho, prm.sigma
    grid = op.grid
    target = uT.flat
    u = np.zeros(grid.size) if u0_init is None else u0_init.flat.copy()
    p = np.zeros(grid.size) if p_init is None else p_init.flat.copy()
    ergodic = np.zeros(grid.size)
    history: list[float] = []
    knorms: Optional[list[float]] = [] if diagnostics else None
    converged = False

    if callback is not None:
        callback(0, u, p)
    k = 0
    # overflow is caught by the finiteness check below
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, prm.kmax + 1):
            ut = _u_step(u, op.adjoint(p), r, prm.tau, prm.beta)
            ubar = ut + theta * (ut - u)
            pt = _p_step(p, op.forward(ubar), s, target)
            if knorms is not None:
                knorms.append(_diag_knorm(u - ut, p - pt, op, r, s, rho))

            u_new = u - rho * (u - ut)
            p_new = p - sigma * (p - pt)
            if not (np.all(np.isfinite(u_new)) and np.all(np.isfinite(p_new))):
                raise NonFiniteIterate(f"non-finite iterate at k={k}")
            e = max(_rel_change(u_new, u), _rel_change(p_new, p))
            history.append(e)
            ergodic += (ut - ergodic) / k
            u, p = u_new, p_new
            if callback is not None:
                callback(k, u, p)
            if e <= prm.tol:
                converged = True
                break

    logger.info("pdhg: %d iterations, converged=%s, e=%.3g", k, converged, history[-1] if history else 0.0)
    return OptimizerResult(
        u0_star=Field.from_flat(grid, u, "u0_star"),
        p_star=Field.from_flat(grid, p, "p_star"),
        iterations=k,
        converged=converged,
        residual_history=history,
        diag_knorm_history=knorms,
        ergodic_u0=Field.from_flat(grid, ergodic, "u0_ergodic"),
        params=prm,
        opnorm=opnorm,
    )
