"""Turn a smooth optimal control into a finite sum of point sources.

Locations are the local maxima of ``|u0*|``; intensities solve the small
least-squares problem ``min ||R alpha - uT||`` through its normal equation,
where column ``i`` of ``R`` is the final state produced by a unit point
source at location ``i``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg as sla
from scipy import ndimage

from .errors import EmptyField, FormatViolation, IoFailure, NoMaxima, SingularGram, SolveFailure
from .grid import Field, Grid2D
from .pde import TimeStepOperator, discrete_delta, nearest_node

DEFAULT_REL_THRESHOLD = 0.1
GRAM_COND_LIMIT = 1e12

Node = tuple[int, int]


@dataclass(frozen=True)
class Atom:
    x: float
    y: float
    intensity: float


class SparseSource:
    """Weighted sum of point masses, kept sorted by ``(x, y)``."""

    def __init__(self, atoms: Iterable[Atom | tuple] = ()):
        items = [a if isinstance(a, Atom) else Atom(*map(float, a)) for a in atoms]
        items.sort(key=lambda a: (a.x, a.y))
        for a, b in zip(items, items[1:]):
            if (a.x, a.y) == (b.x, b.y):
                raise ValueError(f"duplicate atom location ({a.x}, {a.y})")
        self.atoms: tuple[Atom, ...] = tuple(items)

    def __len__(self):
        return len(self.atoms)

    def __iter__(self):
        return iter(self.atoms)

    def __eq__(self, other):
        return isinstance(other, SparseSource) and self.atoms == other.atoms

    def __repr__(self):
        inner = ", ".join(f"{a.intensity:g}@({a.x:g},{a.y:g})" for a in self.atoms)
        return f"SparseSource([{inner}])"

    @property
    def locations(self) -> list[tuple[float, float]]:
        return [(a.x, a.y) for a in self.atoms]

    @property
    def intensities(self) -> np.ndarray:
        return np.array([a.intensity for a in self.atoms])

    def to_field(self, grid: Grid2D) -> Field:
        """Discretize on ``grid``; atoms snapping to the same node add up."""
        vals = np.zeros(grid.shape)
        for a in self.atoms:
            vals += discrete_delta(grid, (a.x, a.y), a.intensity).values
        return Field(grid, vals, "u0_hat")

    def snapped(self, grid: Grid2D) -> list[Node]:
        return [nearest_node(grid, a.x, a.y) for a in self.atoms]


def dump_source(src: SparseSource, path) -> None:
    lines = [f"# atoms {len(src)}"]
    lines += [f"{a.x:.17g},{a.y:.17g},{a.intensity:.17g}" for a in src]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write source to {path}: {exc}") from exc


def load_source(path) -> SparseSource:
    try:
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    except OSError as exc:
        raise IoFailure(f"cannot read source from {path}: {exc}") from exc
    if not lines or not lines[0].startswith("# atoms "):
        raise FormatViolation(f"{path}: missing '# atoms <l>' header")
    try:
        count = int(lines[0].split()[2])
    except (IndexError, ValueError) as exc:
        raise FormatViolation(f"{path}: bad atom count in {lines[0]!r}") from exc
    if len(lines) - 1 != count:
        raise FormatViolation(f"{path}: header declares {count} atoms, found {len(lines) - 1}")
    atoms = []
    for k, ln in enumerate(lines[1:], start=2):
        try:
            x, y, a = (float(t) for t in ln.split(","))
        except ValueError as exc:
            raise FormatViolation(f"line {k}: expected 'x,y,intensity', got {ln!r}") from exc
        if not all(map(math.isfinite, (x, y, a))):
            raise FormatViolation(f"line {k}: non-finite entry")
        atoms.append(Atom(x, y, a))
    return SparseSource(atoms)


def find_local_maxima(u0: Field, rel_threshold: float = DEFAULT_REL_THRESHOLD) -> list[Node]:
    """Nodes where ``|u0|`` is a local maximum over the 8-neighbourhood.

    A node qualifies when ``|u0|`` exceeds ``rel_threshold * max|u0|`` and is
    at least as large as every neighbour.  Equal-valued connected nodes form a
    plateau; a plateau counts once (its lexicographically smallest node) and
    only if every node bordering it is strictly smaller.

    Returns
    -------
    list of (i, j)
        1-based node indices in lexicographic order.
    """
    if not 0 < rel_threshold < 1:
        raise ValueError(f"rel_threshold must lie in (0, 1), got {rel_threshold!r}")
    a = np.abs(u0.values)
    peak = a.max() if a.size else 0.0
    if peak == 0.0:
        raise EmptyField("u0 is identically zero; reduce beta")

    # 'nearest' padding repeats in-grid values, so this equals a truncated neighbourhood
    nbr_max = ndimage.maximum_filter(a, size=3, mode="nearest")
    cand = (a >= nbr_max) & (a > rel_threshold * peak)

    nx, ny = a.shape
    seen = np.zeros_like(cand)
    found: list[Node] = []
    for i, j in zip(*np.nonzero(cand)):
        if seen[i, j]:
            continue
        level = a[i, j]
        plateau, stack = [], [(i, j)]
        seen[i, j] = True
        is_max, strict = True, False
        while stack:
            ci, cj = stack.pop()
            plateau.append((ci, cj))
            for ni in range(max(ci - 1, 0), min(ci + 2, nx)):
                for nj in range(max(cj - 1, 0), min(cj + 2, ny)):
                    if (ni, nj) == (ci, cj):
                        continue
                    val = a[ni, nj]
                    if val == level:
                        if not seen[ni, nj]:
                            seen[ni, nj] = True
                            stack.append((ni, nj))
                    elif val > level:
                        is_max = False
                    else:
                        strict = True
        if is_max and strict:
            bi, bj = min(plateau)
            found.append((int(bi) + 1, int(bj) + 1))

    if not found:
        raise NoMaxima(f"no local maximum above {rel_threshold:g} * max|u0|")
    return sorted(found)


class ResponseMatrix:
    """Final states of unit point sources, one column per location."""

    def __init__(self, grid: Grid2D, locations: Sequence[Node], columns: np.ndarray):
        self.grid = grid
        self.locations = list(locations)
        self.columns = columns

    @property
    def gram(self) -> np.ndarray:
        return self.grid.cell_area * (self.columns.T @ self.columns)


def build_response_matrix(op: TimeStepOperator, locations: Sequence[Node]) -> ResponseMatrix:
    """One forward solve per location ``(i, j)`` (1-based node indices)."""
    locs = [(int(i), int(j)) for i, j in locations]
    if not locs:
        raise ValueError("at least one location is required")
    if len(set(locs)) != len(locs):
        raise ValueError(f"duplicate locations in {locs}")
    grid = op.grid
    cols = np.empty((grid.size, len(locs)))
    for k, (i, j) in enumerate(locs):
        if not (1 <= i <= grid.nx and 1 <= j <= grid.ny):
            raise ValueError(f"node ({i},{j}) is not an interior node")
        e = np.zeros(grid.shape)
        e[i - 1, j - 1] = 1.0 / grid.cell_area
        cols[:, k] = op.forward(e.ravel())
    if not np.all(np.isfinite(cols)):
        raise SolveFailure("non-finite response column")
    return ResponseMatrix(grid, locs, cols)


def solve_intensities(R: ResponseMatrix, uT: Field) -> np.ndarray:
    """Solve ``(R^T R) alpha = R^T uT`` (weighted pairing) by Cholesky."""
    gram = R.gram
    rhs = R.grid.cell_area * (R.columns.T @ uT.flat)
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > GRAM_COND_LIMIT:
        raise SingularGram(f"Gram matrix condition number {cond:.3g} exceeds {GRAM_COND_LIMIT:g}")
    try:
        factor = sla.cho_factor(gram)
    except sla.LinAlgError as exc:
        raise SingularGram(f"Gram matrix is not positive definite: {exc}") from exc
    return sla.cho_solve(factor, rhs)


def enhance(
    u0_star: Field,
    op: TimeStepOperator,
    uT: Field,
    rel_threshold: float = DEFAULT_REL_THRESHOLD,
) -> SparseSource:
    """Locate maxima of ``|u0_star|`` and fit their intensities to ``uT``."""
    nodes = find_local_maxima(u0_star, rel_threshold)
    R = build_response_matrix(op, nodes)
    alpha = solve_intensities(R, uT)
    grid = op.grid
    return SparseSource(Atom(*grid.node_xy(i, j), float(a)) for (i, j), a in zip(nodes, alpha))
