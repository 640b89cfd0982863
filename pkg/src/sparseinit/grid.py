"""Uniform rectangular grids, grid functions and their text serialization.

Only interior nodes are stored; the homogeneous Dirichlet condition pins
boundary values to zero.  Node ``(i, j)`` (1-based) sits at ``(i*dx, j*dy)``
and maps to ``values[i - 1, j - 1]``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatViolation, GridMismatch, IoFailure, NonTilingMesh

_TILE_TOL = 1e-9


@dataclass(frozen=True)
class Grid2D:
    """Uniform grid on ``(0, lx) x (0, ly)`` with ``nx * ny`` interior nodes."""

    lx: float
    ly: float
    dx: float
    dy: float
    nx: int
    ny: int

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinates as two ``(nx, ny)`` arrays."""
        x = self.dx * np.arange(1, self.nx + 1)
        y = self.dy * np.arange(1, self.ny + 1)
        return np.meshgrid(x, y, indexing="ij")

    def node_xy(self, i: int, j: int) -> tuple[float, float]:
        return (i * self.dx, j * self.dy)


def _count_cells(length: float, h: float, axis: str) -> int:
    ratio = length / h
    n = round(ratio)
    if abs(ratio - n) > _TILE_TOL * max(1.0, abs(ratio)):
        raise NonTilingMesh(
            f"d{axis}={h!r} does not tile l{axis}={length!r} "
            f"(l{axis}/d{axis} = {ratio!r} is not integral)"
        )
    if n < 2:
        raise NonTilingMesh(f"d{axis}={h!r} leaves no interior node in l{axis}={length!r}")
    return n


def make_grid(lx: float, ly: float, dx: float, dy: float) -> Grid2D:
    """Build a :class:`Grid2D`, checking that ``dx`` and ``dy`` tile the box.

    Raises
    ------
    NonTilingMesh
        If ``lx/dx`` or ``ly/dy`` is not an integer (within ``1e-9``), or
        fewer than one interior node would remain.
    """
    for name, val in (("lx", lx), ("ly", ly), ("dx", dx), ("dy", dy)):
        if not (math.isfinite(val) and val > 0):
            raise ValueError(f"{name} must be positive and finite, got {val!r}")
    cx = _count_cells(lx, dx, "x")
    cy = _count_cells(ly, dy, "y")
    return Grid2D(float(lx), float(ly), float(dx), float(dy), cx - 1, cy - 1)


@dataclass(frozen=True, eq=False)
class Field:
    """Scalar grid function on the interior nodes of ``grid``.

    ``values`` is stored as a read-only ``(nx, ny)`` float array.
    """

    grid: Grid2D
    values: np.ndarray
    name: str = field(default="u", compare=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.size != self.grid.size:
            raise GridMismatch(
                f"field has {vals.size} values, grid expects {self.grid.size}"
            )
        vals = vals.reshape(self.grid.shape)
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, grid: Grid2D, name: str = "u") -> "Field":
        return cls(grid, np.zeros(grid.shape), name)

    @classmethod
    def from_flat(cls, grid: Grid2D, flat: np.ndarray, name: str = "u") -> "Field":
        return cls(grid, np.asarray(flat).reshape(grid.shape), name)

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def renamed(self, name: str) -> "Field":
        return Field(self.grid, self.values, name)

    def __eq__(self, other):
        if not isinstance(other, Field):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    __hash__ = None


def _check_same_grid(f: Field, g: Field) -> None:
    if f.grid != g.grid:
        raise GridMismatch(f"fields live on different grids: {f.grid} vs {g.grid}")


def inner_product(f: Field, g: Field) -> float:
    """Cell-area weighted discrete L2 pairing ``dx*dy*sum(f*g)``."""
    _check_same_grid(f, g)
    return f.grid.cell_area * float(np.dot(f.flat, g.flat))


def norm(f: Field, kind: str = "L2") -> float:
    if kind == "L2":
        return math.sqrt(max(inner_product(f, f), 0.0))
    if kind == "Linf":
        return float(np.max(np.abs(f.values))) if f.values.size else 0.0
    raise ValueError(f"unknown norm kind {kind!r}; expected 'L2' or 'Linf'")


# -- serialization ---------------------------------------------------------

_GRID_HEADER = re.compile(
    r"^# grid lx=(\S+) ly=(\S+) dx=(\S+) dy=(\S+) nx=(\d+) ny=(\d+)\s*$"
)
_FIELD_HEADER = re.compile(r"^# field (\S.*?)\s*$")


def grid_header(grid: Grid2D) -> str:
    return (
        f"# grid lx={grid.lx:.17g} ly={grid.ly:.17g} dx={grid.dx:.17g} "
        f"dy={grid.dy:.17g} nx={grid.nx} ny={grid.ny}"
    )


def dump_field(f: Field, path) -> None:
    """Write ``f`` as CSV text: two header lines, then ``i,j,value`` rows.

    Rows run with ``i`` fastest; values carry 17 significant digits so the
    round trip through :func:`load_field` is bit-exact.
    """
    lines = [grid_header(f.grid), f"# field {f.name}"]
    vals = f.values
    for j in range(f.grid.ny):
        for i in range(f.grid.nx):
            lines.append(f"{i + 1},{j + 1},{vals[i, j]:.17g}")
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write field to {path}: {exc}") from exc


def parse_grid_header(line: str, where: str = "line 1") -> Grid2D:
    m = _GRID_HEADER.match(line)
    if not m:
        raise FormatViolation(f"{where}: malformed grid header {line!r}")
    try:
        lx, ly, dx, dy = (float(m.group(k)) for k in range(1, 5))
    except ValueError as exc:
        raise FormatViolation(f"{where}: non-numeric grid header entry") from exc
    nx, ny = int(m.group(5)), int(m.group(6))
    try:
        grid = make_grid(lx, ly, dx, dy)
    except (NonTilingMesh, ValueError) as exc:
        raise FormatViolation(f"{where}: {exc}") from exc
    if (grid.nx, grid.ny) != (nx, ny):
        raise FormatViolation(
            f"{where}: declared nx={nx}, ny={ny} but the geometry implies "
            f"nx={grid.nx}, ny={grid.ny}"
        )
    return grid


def load_field(path) -> Field:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read field from {path}: {exc}") from exc
    lines = text.splitlines()
    if len(lines) < 2:
        raise FormatViolation(f"{path}: missing header lines")
    grid = parse_grid_header(lines[0])
    m = _FIELD_HEADER.match(lines[1])
    if not m:
        raise FormatViolation(f"line 2: malformed field header {lines[1]!r}")
    name = m.group(1)

    body = [ln for ln in lines[2:] if ln.strip()]
    if len(body) != grid.size:
        raise FormatViolation(
            f"{path}: expected {grid.size} value rows, found {len(body)}"
        )
    vals = np.empty(grid.shape)
    for k, ln in enumerate(body):
        parts = ln.split(",")
        if len(parts) != 3:
            raise FormatViolation(f"line {k + 3}: expected 'i,j,value', got {ln!r}")
        try:
            i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError as exc:
            raise FormatViolation(f"line {k + 3}: {exc}") from exc
        ei, ej = k % grid.nx + 1, k // grid.nx + 1
        if (i, j) != (ei, ej):
            raise FormatViolation(
                f"line {k + 3}: node ({i},{j}) out of order, expected ({ei},{ej})"
            )
        if not math.isfinite(v):
            raise FormatViolation(f"line {k + 3}: non-finite value {parts[2]!r}")
        vals[i - 1, j - 1] = v
    return Field(grid, vals, name)
