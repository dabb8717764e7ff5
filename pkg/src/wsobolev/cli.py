"""Command-line entry point: fibers, mwug, energy, heat, divergence, tensor, verify."""
from __future__ import annotations

import argparse
import csv
import sys
import warnings
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .discretization import assemble_stiffness, node_gradients, node_values, project_function
from .errors import (EvalError, ResourceError, SolverError, SpecSyntaxError, UnsupportedStratumError,
                     ValidationError)
from .expressions import ClosedForm
from .fibers import SweepSchedule, am_distribution, sweep, tangent_from_sweep
from .harness import (Suite, SuiteCase, default_suite, exit_code, load_suite, parse_scales,
                      prepare_case, records_text, run_suite, verify_tensorization, write_meta, write_report)
from .measure import MeasureSpec, load_measure_spec, product_spec
from .presets import PRESETS
from .sobolev import check_divergence, heat_flow, laplacian, minimal_relaxed_gradient, mwug_via_projection

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_SOLVER = 0, 1, 2, 3

GRAMMAR = """\
measure config (TOML):
  [domain]
  ambient_dim = 1..3
  bbox = [[lo...], [hi...]]
  [[stratum]]
  kind = "ac_density" | "simplex" | "point_mass" | "cantor"
  dim = k                           # ac_density: n; simplex: number of vertices - 1
  density = "1 + x1*x2"             # polynomial, degree <= 2, nonnegative on the support
  box = [[lo...], [hi...]]          # ac_density, defaults to bbox
  vertices = [[...], ...]           # simplex
  point = [...], mass = m           # point_mass
  variant = "ternary" | "svc" | "ratio", ratio = r
  generations = 1..60, axis = 1..n (1-based), interval = [a, b], base = [...]
suite config (TOML):
  [suite] seed, svd_tol, eps_factor, stability_window, tol, f_family
  [[case]] name, preset | config | product = [a, b], scales = "1/16,1/32"
functions: polynomials in x1..x3, cos/sin/exp/sqrt/abs, pi, cone(p1, ..., pn) = |x - p|
scales: comma list of positive numbers or fractions, strictly decreasing
presets: """ + ", ".join(sorted(PRESETS))


class UsageError(Exception):
    pass


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _load_spec(ref: str | None) -> MeasureSpec:
    if ref is None:
        raise UsageError("--config is required")
    if ref in PRESETS:
        return PRESETS[ref]()
    path = Path(ref)
    if not path.is_file():
        raise UsageError(f"config file not found: {ref}")
    return load_measure_spec(path)


def _scales(args) -> tuple:
    if args.scales and args.h:
        raise UsageError("give either --scales or --h, not both")
    if args.h:
        return parse_scales(args.h)
    if not args.scales:
        raise UsageError("--scales (or --h) is required")
    scales = parse_scales(args.scales)
    if any(b >= a for a, b in zip(scales, scales[1:])):
        raise UsageError("scales must be strictly decreasing")
    return scales


def _schedule(args) -> SweepSchedule:
    return SweepSchedule(_scales(args), args.eps_factor, args.svd_tol, args.window)


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


def _base_meta(args, spec: MeasureSpec | None = None) -> dict:
    meta = {"version": __version__, "command": args.command, "config": args.config,
            "seed": args.seed, "svd_tol": args.svd_tol, "eps_rule": f"{args.eps_factor:g}*h^2",
            "stability_window": args.window, "tol": args.tol}
    if spec is not None:
        meta["measure"] = spec.describe()
        meta["ambient_dim"] = spec.ambient_dim
        meta["total_mass"] = _fmt(spec.total_mass())
        meta["cantor_truncation_bound"] = _fmt(sum(s.truncation_error() for s in spec.strata))
    return meta


def _sweep_meta(meta: dict, levels, T) -> dict:
    meta["scales"] = ",".join(_fmt(lv.space.h) for lv in levels)
    meta["eps"] = ",".join(_fmt(lv.W.meta["eps"]) for lv in levels)
    meta["jitter"] = "; ".join(" ".join(_fmt(j) for j in lv.space.jitter) for lv in levels)
    meta["active_cells"] = ",".join(str(lv.space.n_cells) for lv in levels)
    meta["unstable_mass_fraction"] = _fmt(T.unstable_fraction)
    return meta


def _tangent(spec: MeasureSpec, args):
    sched = _schedule(args)
    levels = sweep(spec, sched)
    T = tangent_from_sweep(levels, window=sched.stability_window)
    return levels, T


def _function(text: str | None, n: int) -> ClosedForm:
    if text is None:
        raise UsageError("--f is required")
    return ClosedForm(text, n)


# ----------------------------------------------------------------------------
# commands

def cmd_fibers(args) -> int:
    spec = _load_spec(args.config)
    levels, T = _tangent(spec, args)
    space = T.space
    n = space.ndim
    out = _out_dir(args)
    header = (["cell_id"] + [f"center_{i + 1}" for i in range(n)] + ["mass", "stable", "dim"]
              + [f"basis_{r + 1}{c + 1}" for c in range(n) for r in range(n)]
              + [f"sigma_{i + 1}" for i in range(n)])
    centers = space.cell_centers
    sv = T.singular_values
    rows = []
    for c in range(space.n_cells):
        basis = T.frames[c].T.ravel()
        rows.append([c, *centers[c], space.cell_mass[c], bool(T.stable[c]), int(T.dims[c]), *basis, *sv[c]])
    _write_csv(out / "fibers.csv", header, rows)
    meta = _sweep_meta(_base_meta(args, spec), levels, T)
    for k in range(n + 1):
        meta[f"mass_fraction_dim{k}"] = _fmt(T.mass_fraction(T.dims == k))
    write_meta(out / "meta.txt", meta)
    print(f"fibers: {space.n_cells} cells, unstable mass {T.unstable_fraction:.4f}, "
          + ", ".join(f"dim{k}={float(meta[f'mass_fraction_dim{k}']):.4f}" for k in range(n + 1)))
    return EXIT_OK


def cmd_mwug(args) -> int:
    spec = _load_spec(args.config)
    levels, T = _tangent(spec, args)
    space = T.space
    f = _function(args.f, space.ndim)
    relax = minimal_relaxed_gradient(space, project_function(space, f), levels[-1].W)
    lip = space.cell_average(np.linalg.norm(f.gradient(space.node_user), axis=1))
    meta = _sweep_meta(_base_meta(args, spec), levels, T)
    try:
        proj = mwug_via_projection(T, am_distribution(space), f)
        mproj, am = proj.mwug, proj.am_norm
    except UnsupportedStratumError as exc:
        print(f"warning: projection route unavailable: {exc}", file=sys.stderr)
        mproj = am = np.full(space.n_cells, np.nan)
        meta["projection_route"] = f"unavailable: {exc}"
    out = _out_dir(args)
    n = space.ndim
    header = ["cell_id"] + [f"center_{i + 1}" for i in range(n)] + ["mass", "mwug_projection",
                                                                  "mwug_relaxation", "lip", "am_norm"]
    centers = space.cell_centers
    rows = [[c, *centers[c], space.cell_mass[c], mproj[c], relax.mwug[c], lip[c], am[c]]
            for c in range(space.n_cells)]
    _write_csv(out / "mwug.csv", header, rows)
    meta["function"] = args.f
    meta["cheeger_energy"] = _fmt(relax.energy)
    write_meta(out / "meta.txt", meta)
    print(f"mwug: f={args.f} cheeger_energy={relax.energy:.10g}")
    return EXIT_OK


def cmd_energy(args) -> int:
    spec = _load_spec(args.config)
    sched = _schedule(args)
    levels = sweep(spec, sched)
    T = tangent_from_sweep(levels, window=sched.stability_window)
    f = _function(args.f, spec.ambient_dim)
    rows = []
    for lv in levels:
        c = project_function(lv.space, f)
        ech = minimal_relaxed_gradient(lv.space, c, lv.W).energy
        dirichlet = 0.5 * float(c @ (assemble_stiffness(lv.space) @ c))
        rows.append([lv.space.h, ech, dirichlet])
        print(f"h={lv.space.h:.6g} cheeger_energy={ech:.10g} dirichlet_energy={dirichlet:.10g}")
    out = _out_dir(args)
    _write_csv(out / "energy.csv", ["h", "cheeger_energy", "dirichlet_energy"], rows)
    meta = _sweep_meta(_base_meta(args, spec), levels, T)
    meta["function"] = args.f
    meta["cheeger_energy"] = _fmt(rows[-1][1])
    write_meta(out / "meta.txt", meta)
    return EXIT_OK


def cmd_heat(args) -> int:
    spec = _load_spec(args.config)
    levels, T = _tangent(spec, args)
    space = T.space
    f = _function(args.f, space.ndim)
    if args.t <= 0 or args.steps < 1:
        raise UsageError("--t must be positive and --steps at least 1")
    res = heat_flow(space, T, project_function(space, f), args.t, args.steps)
    out = _out_dir(args)
    cols = ["step", "time", "mass", "energy", "w12_norm_sq"]
    _write_csv(out / "heat.csv", cols, [[r[k] for k in cols] for r in res.history])
    meta = _sweep_meta(_base_meta(args, spec), levels, T)
    meta.update({"function": args.f, "t_final": args.t, "steps": args.steps, "scheme": "implicit Euler"})
    write_meta(out / "meta.txt", meta)
    last = res.history[-1]
    print(f"heat: t={last['time']:.6g} mass={last['mass']:.12g} energy={last['energy']:.10g}")
    return EXIT_OK


def _field(args, space, T) -> tuple[np.ndarray, str]:
    n = space.ndim
    if args.w:
        parts = [p.strip() for p in args.w.split(";")]
        if len(parts) != n:
            raise UsageError(f"--w needs {n} components separated by ';'")
        X = space.node_user
        return np.stack([ClosedForm(p, n)(X) * np.ones(len(X)) for p in parts], axis=1), f"w=({args.w})"
    if args.f:
        coeffs = project_function(space, ClosedForm(args.f, n))
        g = node_gradients(space, coeffs)
        return np.einsum("qij,qj->qi", T.projectors()[space.node_cell], g), f"w=pr_T grad({args.f})"
    raise UsageError("divergence needs --w 'w1; w2' or --f")


def cmd_divergence(args) -> int:
    spec = _load_spec(args.config)
    levels, T = _tangent(spec, args)
    space = T.space
    w, label = _field(args, space, T)
    res = check_divergence(space, w, args.tol)
    out = _out_dir(args)
    n = space.ndim
    x = space.user_coords(space.dof_x)
    _write_csv(out / "divergence.csv", ["dof_id"] + [f"x_{i + 1}" for i in range(n)] + ["divergence"],
               [[i, *x[i], res.divergence[i]] for i in range(space.n_dofs)])
    meta = _sweep_meta(_base_meta(args, spec), levels, T)
    meta.update({"field": label, "accepted": res.accepted, "residual": _fmt(res.residual),
                 "resolution": _fmt(res.resolution), "reason": res.reason or "-"})
    if args.f and res.accepted:
        lap = laplacian(space, T, project_function(space, ClosedForm(args.f, n)))
        diff = node_values(space, lap - res.divergence)
        ref = np.sqrt(np.sum(space.node_w * node_values(space, lap) ** 2))
        gap = float(np.sqrt(np.sum(space.node_w * diff**2)) / ref) if ref > 0 else 0.0
        meta["laplacian_gap"] = _fmt(gap)
    write_meta(out / "meta.txt", meta)
    state = "accepted" if res.accepted else f"rejected ({res.reason})"
    print(f"divergence: {label} {state} residual={res.residual:.3e} resolution={res.resolution:.3e}")
    return EXIT_OK


def cmd_tensor(args) -> int:
    if not args.config or not args.config2:
        raise UsageError("tensor needs --config A --config2 B")
    a, b = _load_spec(args.config), _load_spec(args.config2)
    sched = _schedule(args)
    name = f"{a.name}x{b.name}"
    ca = prepare_case(f"{name}:left", a, sched)
    cb = prepare_case(f"{name}:right", b, sched)
    prod = prepare_case(name, product_spec(a, b, name), sched)
    records = verify_tensorization(name, ca, cb, prod)
    out = _out_dir(args)
    meta = _sweep_meta(_base_meta(args, prod.spec), prod.levels, prod.T)
    meta["config2"] = args.config2
    write_report(records, out, meta)
    sys.stdout.write(records_text(records))
    return exit_code(records)


def _suite_from(args) -> Suite:
    if args.config is None:
        suite = default_suite(args.seed)
    else:
        path = Path(args.config)
        if args.config in PRESETS:
            suite = Suite([SuiteCase(args.config, _scales(args), PRESETS[args.config]())])
        elif not path.is_file():
            raise UsageError(f"config file not found: {args.config}")
        else:
            try:
                doc = tomli.loads(path.read_text(encoding="utf-8"))
            except tomli.TOMLDecodeError as exc:
                raise SpecSyntaxError(str(exc)) from None
            if "domain" in doc:
                suite = Suite([SuiteCase(path.stem, _scales(args), load_measure_spec(path))])
            else:
                suite = load_suite(path)
    if args.seed_given:
        suite.seed = args.seed
    if args.svd_tol_given:
        suite.svd_tol = args.svd_tol
    if args.tol_given:
        suite.tol = args.tol
    return suite


def cmd_verify(args) -> int:
    suite = _suite_from(args)
    records = run_suite(suite)
    out = _out_dir(args)
    meta = _base_meta(args)
    meta.update({"seed": suite.seed, "svd_tol": suite.svd_tol, "eps_rule": f"{suite.eps_factor:g}*h^2",
                 "stability_window": suite.stability_window, "tol": suite.tol,
                 "f_family": "; ".join(suite.family)})
    for sc in suite.cases:
        spec = sc.spec if sc.spec is not None else product_spec(*sc.factors, sc.name)
        meta[f"case.{sc.name}.scales"] = ",".join(_fmt(h) for h in sc.scales)
        meta[f"case.{sc.name}.cantor_truncation_bound"] = _fmt(sum(s.truncation_error() for s in spec.strata))
        fr = [r.unstable_fraction for r in records if r.spec == sc.name]
        meta[f"case.{sc.name}.unstable_mass_fraction"] = _fmt(max(fr, default=0.0))
    write_report(records, out, meta)
    sys.stdout.write(records_text(records))
    return exit_code(records)


COMMANDS = {"fibers": cmd_fibers, "mwug": cmd_mwug, "energy": cmd_energy, "heat": cmd_heat,
            "divergence": cmd_divergence, "tensor": cmd_tensor, "verify": cmd_verify}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n\n{GRAMMAR}\n")
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wsobolev", description="Sobolev calculus on R^n weighted by stratified measures.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="measure config, preset name, or suite config (verify)")
        if name == "tensor":
            s.add_argument("--config2", help="second factor of the product")
        s.add_argument("--scales", help="comma list of grid sizes, coarse to fine, e.g. 1/16,1/32")
        s.add_argument("--h", help="single grid size")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--svd-tol", type=float, default=None)
        s.add_argument("--eps-factor", type=float, default=0.25, help="eps(h) = factor * h^2")
        s.add_argument("--window", type=int, default=2, help="stability window in scales")
        s.add_argument("--tol", type=float, default=None, help="divergence acceptance tolerance")
        if name in ("mwug", "energy", "heat", "divergence"):
            s.add_argument("--f", help="function expression in x1..x3")
        if name == "divergence":
            s.add_argument("--w", help="vector field components separated by ';'")
        if name == "heat":
            s.add_argument("--t", type=float, default=0.1)
            s.add_argument("--steps", type=int, default=64)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed_given, args.svd_tol_given, args.tol_given = (args.seed is not None, args.svd_tol is not None,
                                                         args.tol is not None)
    args.seed = 7 if args.seed is None else args.seed
    args.svd_tol = 0.05 if args.svd_tol is None else args.svd_tol
    args.tol = 1e-6 if args.tol is None else args.tol
    np.random.seed(args.seed)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](args)
    except (UsageError, SpecSyntaxError, ValidationError, UnsupportedStratumError, EvalError, ResourceError,
            FileNotFoundError) as exc:
        sys.stderr.write(f"wsobolev {args.command}: {type(exc).__name__}: {exc}\n\n{GRAMMAR}\n")
        return EXIT_USAGE
    except SolverError as exc:
        sys.stderr.write(f"wsobolev {args.command}: solver error: {exc}\n")
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
