"""INI-style experiment configuration with dotted ``section.key`` overrides.

Example::

    [grid]
    dx = 0.05

    [pde]
    case = I
    dt = 0.05
    T = 0.1

    [pdhg]
    rho = 1.9

Every key has a default; the source of each effective value (``default``,
``file`` or ``override``) is logged and kept in :attr:`RunSettings.provenance`.
"""
from __future__ import annotations

import configparser
import dataclasses
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from .enhance import DEFAULT_REL_THRESHOLD, SparseSource, load_source
from .errors import (
    FormatViolation,
    IoFailure,
    ParseError,
    RelaxationViolation,
    SemanticError,
    UnknownCase,
)
from .experiments import METHODS, REFERENCE_SOURCE, ProblemConfig, case_regions
from .gd import GdParams
from .pde import Region
from .pdhg import PdhgParams, check_relaxation

logger = logging.getLogger(__name__)

_NONE = {"", "none", "auto", "default"}


def _opt_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in _NONE else float(text)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str, width: int) -> list[tuple[float, ...]]:
    """``"a,b,c; d,e,f"`` into tuples of ``width`` floats."""
    out = []
    for chunk in text.replace("\n", ";").split(";"):
        if not chunk.strip():
            continue
        vals = tuple(float(t) for t in chunk.split(","))
        if len(vals) != width:
            raise ValueError(f"expected {width} comma-separated numbers, got {chunk.strip()!r}")
        out.append(vals)
    return out


def _names(text: str) -> list[str]:
    return [t.strip() for t in re.split(r"[,\s]+", text) if t.strip()]


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable, object]]] = {
    "grid": {"lx": (float, 2.0), "ly": (float, 1.0), "dx": (float, 0.05), "dy": (_opt_float, None)},
    "pde": {
        "case": (str, "I"),
        "regions": (lambda t: _floats(t, 7), None),
        "dt": (float, 0.05),
        "T": (_opt_float, 0.1),
        "nsteps": (lambda t: None if t.strip().lower() in _NONE else int(t), None),
        "solver": (str, "auto"),
    },
    "source": {"atoms": (lambda t: _floats(t, 3), None), "file": (str, None)},
    "scenario": {
        "kind": (str, "reachable"),
        "level": (float, 0.0),
        "seed": (int, 0),
        "rng": (str, "pcg64"),
    },
    "optimizer": {"method": (str, "pdhg"), "diagnostics": (_bool, False), "workers": (int, 1)},
    "pdhg": {
        "theta": (float, 1.0),
        "r": (float, 6.0),
        "s": (_opt_float, None),
        "rho": (float, 1.9),
        "sigma": (_opt_float, None),
        "tau": (float, 1e-2),
        "beta": (_opt_float, None),
        "beta_rel": (_opt_float, None),
        "tol": (float, 1e-5),
        "kmax": (int, 1000),
    },
    "gd": {
        "eta": (_opt_float, None),
        "tau": (_opt_float, None),
        "beta": (_opt_float, None),
        "tol": (_opt_float, None),
        "kmax": (lambda t: None if t.strip().lower() in _NONE else int(t), None),
    },
    "enhance": {"rel_threshold": (float, DEFAULT_REL_THRESHOLD)},
    "bench": {"variants": (_names, ["cp", "pdhg", "gd"])},
    "meshstudy": {"meshes": (lambda t: _floats(t, 2), [(0.1, 0.05), (0.05, 0.025)]), "method": (str, None)},
}


@dataclass
class RunSettings:
    """A resolved problem plus the study-level settings that sit beside it."""

    problem: ProblemConfig
    variants: list[str] = field(default_factory=lambda: ["cp", "pdhg", "gd"])
    meshes: list[tuple[float, float]] = field(default_factory=list)
    mesh_method: str = "pdhg"
    workers: int = 1
    provenance: dict[str, str] = field(default_factory=dict)
    values: dict[str, object] = field(default_factory=dict)


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Line number of every ``key = value`` line, for diagnostics."""
    where: dict[tuple[str, str], int] = {}
    section = None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            continue
        m = re.match(r"([^=:]+)[=:]", s)
        if section and m:
            where[(section, m.group(1).strip())] = n
    return where


def _split_override(item: str) -> tuple[str, str, str]:
    if "=" not in item:
        raise ParseError(f"override {item!r}: expected section.key=value")
    lhs, value = item.split("=", 1)
    if "." not in lhs:
        raise ParseError(f"override {item!r}: key must be dotted as section.key")
    section, key = lhs.strip().split(".", 1)
    return section.strip(), key.strip(), value.strip()


def _read_raw(path, overrides: Sequence[str]):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from exc
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case sensitive (T vs t)
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ParseError(f"{path}: {exc}") from exc

    lines = _key_lines(text)
    raw: dict[tuple[str, str], tuple[str, str]] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ParseError(f"{path}: unknown section [{section}]")
        for key, value in cp.items(section):
            if key not in SCHEMA[section]:
                raise ParseError(f"{path}:{lines.get((section, key), '?')}: unknown key {section}.{key}")
            raw[(section, key)] = (value, f"{path}:{lines.get((section, key), '?')}")
    for item in overrides:
        section, key, value = _split_override(item)
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ParseError(f"override {item!r}: unknown key {section}.{key}")
        raw[(section, key)] = (value, "override")
    return raw


def _resolve(raw) -> tuple[dict[str, object], dict[str, str]]:
    values: dict[str, object] = {}
    provenance: dict[str, str] = {}
    for section, keys in SCHEMA.items():
        for key, (conv, default) in keys.items():
            name = f"{section}.{key}"
            if (section, key) in raw:
                text, origin = raw[(section, key)]
                try:
                    values[name] = conv(text)
                except ValueError as exc:
                    raise ParseError(f"{origin}: bad value for {name}: {text!r} ({exc})") from exc
                provenance[name] = "override" if origin == "override" else "file"
            else:
                values[name] = default
                provenance[name] = "default"
    # gd falls back to the shared pdhg regularization and stopping rule
    for key in ("tau", "beta", "tol", "kmax"):
        if values[f"gd.{key}"] is None:
            values[f"gd.{key}"] = values[f"pdhg.{key}"]
            if provenance[f"gd.{key}"] == "default":
                provenance[f"gd.{key}"] = f"default (from pdhg.{key})"
    return values, provenance


def _build(values: dict[str, object]) -> ProblemConfig:
    v = values
    case = str(v["pde.case"])
    lx, ly = v["grid.lx"], v["grid.ly"]
    if v["pde.regions"]:
        # explicit regions win over the named case
        regions = tuple(Region(*r) for r in v["pde.regions"])
        case_id = None
    elif case.lower() == "custom":
        raise SemanticError("pde.case = custom needs pde.regions")
    else:
        regions = case_regions(case, lx, ly)
        case_id = case

    dt = v["pde.dt"]
    T = v["pde.T"]
    if v["pde.nsteps"] is not None:
        n = v["pde.nsteps"]
        if n < 1:
            raise SemanticError(f"pde.nsteps must be positive, got {n}")
        if T is None or values.get("_T_default"):
            T = n * dt
        elif abs(T - n * dt) > 1e-9 * max(1.0, T):
            raise SemanticError(f"pde.T = {T} disagrees with pde.nsteps * pde.dt = {n * dt}")
    if T is None:
        raise SemanticError("either pde.T or pde.nsteps is required")

    if v["source.atoms"] and v["source.file"]:
        raise SemanticError("give either source.atoms or source.file, not both")
    if v["source.atoms"]:
        reference = SparseSource(v["source.atoms"])
    elif v["source.file"]:
        try:
            reference = load_source(v["source.file"])
        except (IoFailure, FormatViolation) as exc:
            raise SemanticError(f"source.file: {exc}") from exc
    else:
        reference = REFERENCE_SOURCE

    pdhg = PdhgParams(
        theta=v["pdhg.theta"],
        r=v["pdhg.r"],
        s=v["pdhg.s"],
        rho=v["pdhg.rho"],
        sigma=v["pdhg.sigma"],
        tau=v["pdhg.tau"],
        beta=v["pdhg.beta"],
        tol=v["pdhg.tol"],
        kmax=v["pdhg.kmax"],
    )
    # CP is selected by rho = sigma = 1; when only rho is given sigma follows it
    if pdhg.sigma is None and pdhg.theta == 1.0:
        pdhg = dataclasses.replace(pdhg, sigma=pdhg.rho)
    try:
        check_relaxation(pdhg)
    except RelaxationViolation as exc:
        raise SemanticError(str(exc)) from exc
    if not pdhg.tau > 0 or not pdhg.tol > 0 or pdhg.kmax < 1 or not pdhg.r > 0:
        raise SemanticError("pdhg.tau, pdhg.tol and pdhg.r must be positive and pdhg.kmax at least 1")
    if pdhg.s is not None and not pdhg.s > 0:
        raise SemanticError("pdhg.s must be positive")
    if pdhg.beta is not None and pdhg.beta < 0:
        raise SemanticError("pdhg.beta must be non-negative")

    gd = GdParams(
        eta=v["gd.eta"], tau=v["gd.tau"], beta=v["gd.beta"], tol=v["gd.tol"], kmax=v["gd.kmax"]
    )
    if gd.eta is not None and not gd.eta > 0:
        raise SemanticError("gd.eta must be positive")

    return ProblemConfig(
        lx=lx,
        ly=ly,
        dx=v["grid.dx"],
        dy=v["grid.dy"] if v["grid.dy"] is not None else v["grid.dx"],
        dt=dt,
        T=T,
        regions=regions,
        case_id=case_id,
        reference=reference,
        scenario=v["scenario.kind"],
        noise_level=v["scenario.level"],
        seed=v["scenario.seed"],
        rng=v["scenario.rng"],
        method=v["optimizer.method"],
        pdhg=pdhg,
        gd=gd,
        beta_rel=v["pdhg.beta_rel"],
        rel_threshold=v["enhance.rel_threshold"],
        diagnostics=v["optimizer.diagnostics"],
        solver=v["pde.solver"],
    )


def load_settings(path, overrides: Sequence[str] = ()) -> RunSettings:
    """Parse ``path`` plus ``section.key=value`` overrides into :class:`RunSettings`.

    Raises
    ------
    ParseError
        Unreadable file, malformed syntax, unknown keys or unparsable values.
    SemanticError
        Values that parse but do not describe a valid experiment.
    """
    raw = _read_raw(path, overrides)
    values, provenance = _resolve(raw)
    if ("pde", "T") not in raw and values["pde.nsteps"] is not None:
        values["_T_default"] = True
    try:
        problem = _build(values)
    except UnknownCase as exc:
        raise SemanticError(str(exc)) from exc
    except SemanticError:
        raise
    except ValueError as exc:  # grid, region or source constructors
        raise SemanticError(str(exc)) from exc
    values.pop("_T_default", None)

    for name in sorted(provenance):
        logger.info("%s = %r (%s)", name, values[name], provenance[name])

    variants = list(values["bench.variants"])
    for var in variants:
        if var not in METHODS:
            raise SemanticError(f"bench.variants: unknown variant {var!r}; expected one of {METHODS}")
    mesh_method = values["meshstudy.method"] or problem.method
    if mesh_method not in METHODS:
        raise SemanticError(f"meshstudy.method: unknown method {mesh_method!r}")
    if values["optimizer.workers"] < 1:
        raise SemanticError("optimizer.workers must be at least 1")
    return RunSettings(
        problem=problem,
        variants=variants,
        meshes=[tuple(m) for m in values["meshstudy.meshes"]],
        mesh_method=mesh_method,
        workers=values["optimizer.workers"],
        provenance=provenance,
        values=values,
    )


def parse_config(path, overrides: Sequence[str] = ()) -> ProblemConfig:
    """Just the :class:`ProblemConfig` part of :func:`load_settings`."""
    return load_settings(path, overrides).problem
