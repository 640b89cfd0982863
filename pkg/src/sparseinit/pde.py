"""Backward-Euler discretization of ``u_t - d*lap(u) + v.grad(u) = 0``.

The spatial operator uses the 5-point stencil for diffusion and central
differences for advection, with homogeneous Dirichlet values eliminated.
One step solves ``(I + dt*A) u^{n+1} = u^n``.  The forward map ``L`` applies
``nsteps`` such solves; its discrete adjoint ``L*`` applies the transposed
solves in reverse, which makes it the exact transpose of ``L`` under the
(uniformly weighted) grid inner product.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import CoverageGap, NoConvergence, OutsideDomain, SingularSystem, SolveFailure
from .grid import Field, Grid2D, GridMismatch

logger = logging.getLogger(__name__)

# above this many unknowns the factorization is replaced by preconditioned GMRES
DIRECT_SOLVE_LIMIT = 400_000
ITERATIVE_RTOL = 1e-10
_EDGE_TOL = 1e-12


@dataclass(frozen=True)
class Region:
    """Closed axis-aligned rectangle carrying constant ``d`` and ``v``."""

    x0: float
    x1: float
    y0: float
    y1: float
    d: float
    vx: float = 0.0
    vy: float = 0.0

    def __post_init__(self):
        if not self.d > 0:
            raise ValueError(f"diffusivity must be positive, got {self.d!r}")
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise ValueError(f"degenerate region {self}")

    def contains(self, x: float, y: float) -> bool:
        return (
            self.x0 - _EDGE_TOL <= x <= self.x1 + _EDGE_TOL
            and self.y0 - _EDGE_TOL <= y <= self.y1 + _EDGE_TOL
        )


@dataclass(frozen=True)
class Coefficients:
    """Piecewise-constant ``(d, v)``; a node takes the first region containing it."""

    regions: tuple[Region, ...]

    def __init__(self, regions: Sequence[Region]):
        object.__setattr__(self, "regions", tuple(regions))
        if not self.regions:
            raise ValueError("at least one coefficient region is required")

    @classmethod
    def uniform(cls, grid: Grid2D, d: float, v=(0.0, 0.0)) -> "Coefficients":
        return cls([Region(0.0, grid.lx, 0.0, grid.ly, d, float(v[0]), float(v[1]))])

    def lookup(self, x: float, y: float) -> Region | None:
        for reg in self.regions:
            if reg.contains(x, y):
                return reg
        return None

    def sample(self, grid: Grid2D) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nodal ``(d, vx, vy)`` arrays of shape ``(nx, ny)``."""
        d = np.empty(grid.shape)
        vx = np.empty(grid.shape)
        vy = np.empty(grid.shape)
        for i in range(grid.nx):
            for j in range(grid.ny):
                x, y = grid.node_xy(i + 1, j + 1)
                reg = self.lookup(x, y)
                if reg is None:
                    raise CoverageGap(f"node ({i + 1},{j + 1}) at ({x:g},{y:g}) has no region")
                d[i, j], vx[i, j], vy[i, j] = reg.d, reg.vx, reg.vy
        return d, vx, vy


def spatial_operator(grid: Grid2D, coeffs: Coefficients) -> sp.csr_matrix:
    """Assemble ``A = -d*lap_h + v.grad_h`` on interior nodes (flat index ``i*ny + j``)."""
    d, vx, vy = coeffs.sample(grid)
    nx, ny = grid.shape
    dx2, dy2 = grid.dx**2, grid.dy**2
    idx = np.arange(grid.size).reshape(nx, ny)

    rows = [idx.ravel()]
    cols = [idx.ravel()]
    data = [(2 * d / dx2 + 2 * d / dy2).ravel()]

    # (shift in i, shift in j, coefficient array)
    neighbours = (
        (1, 0, -d / dx2 + vx / (2 * grid.dx)),
        (-1, 0, -d / dx2 - vx / (2 * grid.dx)),
        (0, 1, -d / dy2 + vy / (2 * grid.dy)),
        (0, -1, -d / dy2 - vy / (2 * grid.dy)),
    )
    for di, dj, coef in neighbours:
        src = (slice(max(0, -di), nx - max(0, di)), slice(max(0, -dj), ny - max(0, dj)))
        dst = (slice(max(0, di), nx - max(0, -di)), slice(max(0, dj), ny - max(0, -dj)))
        rows.append(idx[src].ravel())
        cols.append(idx[dst].ravel())
        data.append(coef[src].ravel())

    return sp.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.size, grid.size),
    )


class _IterativeSolver:
    """GMRES with an incomplete-LU preconditioner, for grids too large to factor."""

    def __init__(self, M: sp.csc_matrix):
        self.M = M.tocsr()
        self.MT = M.T.tocsr()
        ilu = spla.spilu(M.tocsc(), drop_tol=1e-5, fill_factor=10)
        iluT = spla.spilu(M.T.tocsc(), drop_tol=1e-5, fill_factor=10)
        n = M.shape[0]
        self._pre = spla.LinearOperator((n, n), ilu.solve)
        self._preT = spla.LinearOperator((n, n), iluT.solve)

    def solve(self, b: np.ndarray, trans: str = "N") -> np.ndarray:
        A, P = (self.M, self._pre) if trans == "N" else (self.MT, self._preT)
        x, info = spla.gmres(A, b, M=P, rtol=ITERATIVE_RTOL, atol=0.0, restart=50, maxiter=200)
        if info != 0:
            raise SolveFailure(f"GMRES did not reach rtol={ITERATIVE_RTOL} (info={info})")
        return x


@dataclass(frozen=True, eq=False)
class TimeStepOperator:
    """Assembled step ``M = I + dt*A`` with its factorization.

    Immutable after :func:`assemble_operator`; solves allocate their own
    output so one instance can serve several threads.
    """

    grid: Grid2D
    coeffs: Coefficients
    dt: float
    nsteps: int
    A: sp.csr_matrix = field(repr=False)
    M: sp.csc_matrix = field(repr=False)
    _solver: object = field(repr=False)

    @property
    def T(self) -> float:
        return self.dt * self.nsteps

    def forward(self, u0: np.ndarray) -> np.ndarray:
        """Flat-array forward map ``u0 -> u(T)``."""
        u = np.asarray(u0, dtype=float)
        for _ in range(self.nsteps):
            u = self._solver.solve(u)
        return _checked(u)

    def adjoint(self, pT: np.ndarray) -> np.ndarray:
        """Flat-array adjoint map ``p -> zeta(0)`` (transposed steps)."""
        z = np.asarray(pT, dtype=float)
        for _ in range(self.nsteps):
            z = self._solver.solve(z, trans="T")
        return _checked(z)


def _checked(u: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(u)):
        raise SolveFailure("time step produced non-finite values")
    return u


def assemble_operator(
    grid: Grid2D,
    coeffs: Coefficients,
    dt: float,
    nsteps: int,
    method: str = "auto",
) -> TimeStepOperator:
    """Assemble and factor the backward-Euler step for ``(grid, coeffs, dt)``.

    ``method`` is ``"direct"`` (sparse LU), ``"iterative"`` (ILU-GMRES) or
    ``"auto"``, which picks direct up to :data:`DIRECT_SOLVE_LIMIT` unknowns.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    if int(nsteps) != nsteps or nsteps < 1:
        raise ValueError(f"nsteps must be a positive integer, got {nsteps!r}")
    A = spatial_operator(grid, coeffs)
    M = (sp.identity(grid.size, format="csr") + dt * A).tocsc()
    if method == "auto":
        method = "direct" if grid.size <= DIRECT_SOLVE_LIMIT else "iterative"
    try:
        if method == "direct":
            solver = spla.splu(M)
        elif method == "iterative":
            solver = _IterativeSolver(M)
        else:
            raise ValueError(f"unknown solve method {method!r}")
    except RuntimeError as exc:
        raise SingularSystem(f"cannot factor I + dt*A: {exc}") from exc
    return TimeStepOperator(grid, coeffs, float(dt), int(nsteps), A, M, solver)


def _on_grid(op: TimeStepOperator, f: Field) -> None:
    if f.grid != op.grid:
        raise GridMismatch("field and operator live on different grids")


def forward_solve(op: TimeStepOperator, u0: Field) -> Field:
    """``L u0``: the state at the final time starting from ``u0``."""
    _on_grid(op, u0)
    return Field.from_flat(op.grid, op.forward(u0.flat), "u_T")


def adjoint_solve(op: TimeStepOperator, pT: Field) -> Field:
    """``L* pT``: the backward adjoint equation solved from ``t=T`` down to ``t=0``."""
    _on_grid(op, pT)
    return Field.from_flat(op.grid, op.adjoint(pT.flat), "zeta0")


def nearest_node(grid: Grid2D, x: float, y: float) -> tuple[int, int]:
    """1-based interior node nearest to ``(x, y)``; exact ties go to the smaller index."""
    if not (0.0 < x < grid.lx and 0.0 < y < grid.ly):
        raise OutsideDomain(f"location ({x!r}, {y!r}) is not strictly inside the domain")

    def snap(t: float, h: float, n: int) -> int:
        # rounding the ratio first keeps representation noise from breaking ties
        k = math.ceil(round(t / h, 9) - 0.5)
        return min(max(k, 1), n)

    return snap(x, grid.dx, grid.nx), snap(y, grid.dy, grid.ny)


def discrete_delta(grid: Grid2D, location, intensity: float = 1.0) -> Field:
    """Point mass of total ``intensity`` at the node nearest ``location``."""
    i, j = nearest_node(grid, float(location[0]), float(location[1]))
    vals = np.zeros(grid.shape)
    vals[i - 1, j - 1] = intensity / grid.cell_area
    return Field(grid, vals, "delta")


def estimate_opnorm(
    op: TimeStepOperator,
    tol: float = 1e-6,
    maxit: int = 500,
    seed=None,
) -> float:
    """Estimate ``||L L*||`` by power iteration on ``q -> L(L* q)``.

    Parameters
    ----------
    op : TimeStepOperator
    tol : float
        Relative change of the eigenvalue estimate that stops the iteration.
    maxit : int
    seed : None, int or array
        Starting vector.  ``None`` uses the normalized all-ones vector, an
        integer draws a standard normal vector from that seed.

    Returns
    -------
    float
        The Rayleigh-quotient estimate of the dominant eigenvalue.  If
        ``maxit`` is reached with relative change above ``100*tol`` a
        :class:`NoConvergence` warning is issued and the last estimate is
        still returned.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    n = op.grid.size
    if seed is None:
        q = np.ones(n)
    elif np.ndim(seed) == 0:
        q = np.random.default_rng(int(seed)).standard_normal(n)
    else:
        q = np.array(seed, dtype=float).ravel()
    q /= np.linalg.norm(q)

    lam, change = 0.0, math.inf
    for it in range(1, maxit + 1):
        z = op.forward(op.adjoint(q))
        lam_new = float(np.dot(q, z))
        change = abs(lam_new - lam) / abs(lam_new) if lam_new != 0 else math.inf
        lam = lam_new
        nz = np.linalg.norm(z)
        if nz == 0:
            return 0.0
        q = z / nz
        if change < tol:
            logger.debug("opnorm %.12g after %d power iterations", lam, it)
            return lam
    if change > 100 * tol:
        warnings.warn(
            NoConvergence(f"power iteration stopped at maxit={maxit} with relative change {change:.3g}"),
            stacklevel=2,
        )
    return lam
