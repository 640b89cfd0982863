"""Constant-step subgradient descent on the same regularized objective.

Used only as a baseline for iteration-count comparisons.  Each step costs
one forward and one adjoint solve, like one primal-dual iteration.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import NonFiniteIterate, SolveFailure
from .grid import Field
from .pde import TimeStepOperator, estimate_opnorm
from .pdhg import OptimizerResult, _rel_change

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GdParams:
    """``eta=None`` means ``1 / (||L L*|| + tau)``; ``beta=None`` means ``dx**4``."""

    eta: Optional[float] = None
    tau: float = 1e-2
    beta: Optional[float] = None
    tol: float = 1e-5
    kmax: int = 1000


def subgradient_l1(u0, beta: float):
    """``beta * sign(u0)`` with ``sign(0) = 0``."""
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta!r}")
    if isinstance(u0, Field):
        return Field(u0.grid, subgradient_l1(u0.values, beta), "lambda")
    return beta * np.sign(u0)


def run_gd(
    op: TimeStepOperator,
    uT: Field,
    params: GdParams,
    u0_init: Optional[Field] = None,
    *,
    opnorm: Optional[float] = None,
    callback: Optional[Callable[[int, np.ndarray], None]] = None,
) -> OptimizerResult:
    """Iterate ``u <- u - eta * (L*(L u - uT) + tau*u + beta*sign(u))``.

    Stops on relative change ``||u^{k+1} - u^k|| / ||u^{k+1}|| <= tol`` or at
    ``kmax``.  Raises :class:`NonFiniteIterate` when the step size is too
    large and the iteration blows up.
    """
    prm = params
    if prm.eta is None:
        if opnorm is None:
            opnorm = estimate_opnorm(op)
        prm = dataclasses.replace(prm, eta=1.0 / (opnorm + prm.tau))
    if prm.beta is None:
        prm = dataclasses.replace(prm, beta=op.grid.dx**4)
    if not prm.eta > 0:
        raise ValueError(f"eta must be positive, got {prm.eta!r}")
    if prm.tau < 0 or prm.beta < 0:
        raise ValueError("tau and beta must be non-negative")

    grid = op.grid
    target = uT.flat
    u = np.zeros(grid.size) if u0_init is None else u0_init.flat.copy()
    history: list[float] = []
    converged = False
    residual = op.forward(u) - target
    if callback is not None:
        callback(0, u)
    k = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, prm.kmax + 1):
            try:
                psi0 = op.adjoint(residual)
                u_new = u - prm.eta * (psi0 + prm.tau * u + subgradient_l1(u, prm.beta))
                if not np.all(np.isfinite(u_new)):
                    raise SolveFailure("non-finite update")
                residual = op.forward(u_new) - target
            except SolveFailure as exc:
                raise NonFiniteIterate(f"gradient descent diverged at k={k} (eta={prm.eta:g})") from exc
            e = _rel_change(u_new, u)
            history.append(e)
            u = u_new
            if callback is not None:
                callback(k, u)
            if e <= prm.tol:
                converged = True
                break

    logger.info("gd: %d iterations, converged=%s", k, converged)
    return OptimizerResult(
        u0_star=Field.from_flat(grid, u, "u0_star"),
        p_star=Field.from_flat(grid, residual, "residual"),
        iterations=k,
        converged=converged,
        residual_history=history,
        params=prm,
        opnorm=opnorm,
    )
