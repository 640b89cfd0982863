"""Command-line front end.

    sparseinit identify|forward|bench|meshstudy --config FILE [--out DIR] [--set section.key=value ...]

Exit codes: 0 success, 1 usage or configuration error, 2 optimizer hit
``kmax`` without converging, 3 empty recovery, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import errors
from .config import RunSettings, load_settings
from .enhance import dump_source
from .experiments import (
    BenchRow,
    MeshRow,
    make_target,
    report_to_dict,
    run_bench,
    run_experiment,
    run_meshstudy,
)
from .grid import Field, dump_field, norm

logger = logging.getLogger("sparseinit")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NO_CONVERGENCE = 2
EXIT_EMPTY = 3
EXIT_NUMERIC = 4

_CONFIG_ERRORS = (
    errors.ParseError,
    errors.SemanticError,
    errors.UnknownCase,
    errors.NonTilingMesh,
    errors.GridMismatch,
    errors.CoverageGap,
    errors.OutsideDomain,
    errors.StepSizeViolation,
    errors.RelaxationViolation,
    errors.UnsupportedConfig,
    errors.IoFailure,
    errors.FormatViolation,
)
_EMPTY_ERRORS = (errors.EmptyField, errors.NoMaxima)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, _CONFIG_ERRORS):
        return EXIT_CONFIG
    if isinstance(exc, _EMPTY_ERRORS):
        return EXIT_EMPTY
    return EXIT_NUMERIC


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise errors.IoFailure(f"cannot create output directory {out}: {exc}") from exc
    return out


def write_plot_data(f: Field, path) -> None:
    """``x y value`` rows, one blank line between x-columns (gnuplot ``splot`` layout)."""
    X, Y = f.grid.coords()
    with open(path, "w") as fh:
        for i in range(f.grid.nx):
            for j in range(f.grid.ny):
                fh.write(f"{X[i, j]:.10g} {Y[i, j]:.10g} {f.values[i, j]:.10g}\n")
            fh.write("\n")


def write_plot_script(path, names: Sequence[str]) -> None:
    lines = ["# gnuplot -p plot.gp", "set view map", "set size ratio -1", "set palette rgb 33,13,10"]
    for name in names:
        lines += [f"set title '{name}'", f"splot '{name}.dat' with pm3d notitle", "pause -1"]
    Path(path).write_text("\n".join(lines) + "\n")


def _write_table(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x, spec="g") -> str:
    return "-" if x is None else format(x, spec)


def cmd_identify(settings: RunSettings, out: Path) -> int:
    report = run_experiment(settings.problem)
    files = {}
    fields = {"u0_star": report.u0_star, "final_state": report.final_state, "target": report.target}
    for name, f in fields.items():
        if f is not None:
            dump_field(f, out / f"{name}.csv")
            write_plot_data(f, out / f"{name}.dat")
            files[name] = f"{name}.csv"
    if report.recovered is not None:
        dump_source(report.recovered, out / "source.txt")
        files["source"] = "source.txt"
    if report.residual_history:
        _write_table(out / "residuals.csv", ["k", "e"], list(enumerate(report.residual_history, start=1)))
        files["residuals"] = "residuals.csv"
    plotted = [n for n in ("u0_star", "final_state", "target") if n in files]
    if plotted:
        write_plot_script(out / "plot.gp", plotted)
    (out / "report.json").write_text(json.dumps(report_to_dict(report, files), indent=2) + "\n")

    if report.exception is not None:
        print(f"error: {report.error}", file=sys.stderr)
        return exit_code_for(report.exception)
    print(f"{report.method}: {report.iterations} iterations, converged={report.converged}")
    if report.empty_recovery:
        print(f"empty recovery: beta >= ||L* uT||_inf = {report.beta0:.6g}", file=sys.stderr)
        return EXIT_EMPTY
    for a in report.recovered:
        print(f"  {a.intensity:12.6g} at ({a.x:g}, {a.y:g})")
    m = report.metrics
    print(
        f"location error {m.location_error:g} cells, max intensity error {m.max_intensity_error:.3g}, "
        f"misfit {m.final_misfit:.3g}"
    )
    if not report.converged:
        print("not converged within kmax iterations", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def cmd_forward(settings: RunSettings, out: Path) -> int:
    cfg = settings.problem
    op = cfg.operator()
    u0 = cfg.reference.to_field(op.grid)
    clean = Field.from_flat(op.grid, op.forward(u0.flat), "u_T")
    target = make_target(cfg, op)
    for name, f in (("initial", u0), ("final_state", clean), ("target", target)):
        dump_field(f, out / f"{name}.csv")
        write_plot_data(f, out / f"{name}.dat")
    write_plot_script(out / "plot.gp", ["initial", "final_state", "target"])
    print(f"forward: {op.nsteps} steps of dt={op.dt:g}, ||u_T||_L2 = {norm(clean):.6g}")
    return EXIT_OK


def cmd_bench(settings: RunSettings, out: Path) -> int:
    rows: list[BenchRow] = run_bench(settings.problem, settings.variants, settings.workers)
    _write_table(
        out / "bench.csv",
        ["variant", "iter", "err", "cpu", "converged", "error"],
        [[r.variant, r.iterations, r.err, f"{r.cpu:.4f}", r.converged, r.error or ""] for r in rows],
    )
    print(f"{'variant':<8} {'Iter':>6} {'Err':>11} {'CPU':>8}  status")
    for r in rows:
        status = r.error or ("converged" if r.converged else "kmax reached")
        print(f"{r.variant:<8} {_fmt(r.iterations, 'd'):>6} {_fmt(r.err, '.3e'):>11} {r.cpu:8.3f}  {status}")
    return EXIT_OK


def cmd_meshstudy(settings: RunSettings, out: Path) -> int:
    if len(settings.meshes) < 1:
        raise errors.SemanticError("meshstudy.meshes lists no (dt, dx) pairs")
    rows: list[MeshRow] = run_meshstudy(settings.problem, settings.meshes, settings.mesh_method, settings.workers)
    _write_table(
        out / "meshstudy.csv",
        ["dt", "dx", "iter", "converged", "error"],
        [[r.dt, r.dx, r.iterations, r.converged, r.error or ""] for r in rows],
    )
    print(f"method {settings.mesh_method}")
    print(f"{'dt':>8} {'dx':>8} {'Iter':>6}  status")
    for r in rows:
        status = r.error or ("converged" if r.converged else "kmax reached")
        print(f"{r.dt:8g} {r.dx:8g} {_fmt(r.iterations, 'd'):>6}  {status}")
    return EXIT_OK


COMMANDS = {
    "identify": cmd_identify,
    "forward": cmd_forward,
    "bench": cmd_bench,
    "meshstudy": cmd_meshstudy,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sparseinit", description="Sparse initial source identification.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="INI experiment file")
    ap.add_argument("--out", default="out", help="output directory (created if needed)")
    ap.add_argument(
        "--set",
        dest="overrides",
        action="extend",
        nargs="+",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config value; may be repeated",
    )
    ap.add_argument("-v", "--verbose", action="count", default=0)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        settings = load_settings(args.config, args.overrides)
        out = _out_dir(args.out)
        return COMMANDS[args.command](settings, out)
    except errors.SparseInitError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
