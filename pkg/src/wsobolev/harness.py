"""Numerical checks of the structural identities, collected into suite reports."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import tomli

from .discretization import GridSpace, assemble_mass, assemble_stiffness, project_function
from .errors import (EvalError, InconclusiveError, ResourceError, SolverError, SpecSyntaxError,
                     UnsupportedStratumError, ValidationError)
from .expressions import ClosedForm
from .fibers import (DistributionField, SweepSchedule, am_distribution, grassmann_distance,
                     sweep, tangent_from_sweep)
from .measure import MeasureSpec, lebesgue_labels, load_measure_spec, product_spec
from .presets import PRESETS
from .sobolev import check_divergence, leibniz_defect, minimal_relaxed_gradient, mwug_via_projection

DEFAULT_FAMILY = ("1", "x1", "x2", "x1 + x2", "x1**2", "cos(pi*x1)")

T_IN_V_TOL = 1e-6
T_IN_V_MASS = 0.99
DIM_DROP_MASS = 0.90
LIP_TOL = 5e-2
LIP_MASS = 0.99
TANGENCY_MASS = 0.95
TENSOR_DGR = 0.1
TENSOR_MASS = 0.95
TENSOR_REL = 0.10
ROUTE_ABS = 5e-2


@dataclass
class CheckRecord:
    check: str
    spec: str
    scales: str
    status: str
    measured: float = float("nan")
    threshold: str = ""
    unstable_fraction: float = 0.0
    detail: str = ""
    offending_cells: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def _scales_str(levels) -> str:
    return ",".join(f"{lv.space.h:.6g}" for lv in levels)


def family_for(ndim: int, family=DEFAULT_FAMILY) -> list[ClosedForm]:
    out = []
    for text in family:
        try:
            out.append(ClosedForm(text, ndim))
        except ValidationError:
            continue
    return out


@dataclass(eq=False)
class CaseData:
    """Everything the checks need about one measure on one scale schedule."""

    name: str
    spec: MeasureSpec
    schedule: SweepSchedule
    levels: list
    T: DistributionField
    V: DistributionField | None
    V_error: str = ""

    @property
    def space(self) -> GridSpace:
        return self.T.space

    @property
    def W(self) -> DistributionField:
        return self.levels[-1].W

    @property
    def scales(self) -> str:
        return _scales_str(self.levels)


def prepare_case(name: str, spec: MeasureSpec, schedule: SweepSchedule) -> CaseData:
    levels = sweep(spec, schedule)
    T = tangent_from_sweep(levels, window=schedule.stability_window, warn=False)
    try:
        V = am_distribution(T.space)
        err = ""
    except UnsupportedStratumError as exc:
        V, err = None, str(exc)
    return CaseData(name, spec, schedule, levels, T, V, err)


def _record(case: CaseData, check: str, status: str, **kw) -> CheckRecord:
    return CheckRecord(check, case.name, case.scales, status,
                       unstable_fraction=case.T.unstable_fraction, **kw)


def _offenders(mask: np.ndarray, space: GridSpace, limit: int = 10) -> list:
    idx = np.flatnonzero(mask)
    order = np.argsort(-space.cell_mass[idx])
    return [int(i) for i in idx[order][:limit]]


def _needs_v(case: CaseData, check: str) -> CheckRecord | None:
    if case.V is None:
        return _record(case, check, "error", detail=f"UnsupportedStratumError: {case.V_error}")
    return None


# ----------------------------------------------------------------------------
# individual checks

def verify_T_leq_V(case: CaseData, tol: float = T_IN_V_TOL, mass: float = T_IN_V_MASS) -> CheckRecord:
    """Every tangent basis vector lies in the registry subspace."""
    if (rec := _needs_v(case, "T_leq_V")) is not None:
        return rec
    T, V = case.T, case.V
    mask = T.mask()
    res = np.linalg.norm(T.frames - np.einsum("cij,cjk->cik", V.projectors(), T.frames), axis=1)
    worst = np.where(mask, res, 0.0).max(axis=1)
    ok = worst <= tol
    frac = T.mass_fraction(ok)
    return _record(case, "T_leq_V", "pass" if frac >= mass else "fail", measured=frac,
                   threshold=f"residual<={tol:g} on >={mass:.0%} stable mass",
                   offending_cells=_offenders(~ok & T.stable, case.space))


def verify_dim_drop(case: CaseData, mass: float = DIM_DROP_MASS) -> CheckRecord:
    """A singular measure has dim T < n almost everywhere."""
    labels = lebesgue_labels(case.spec)
    if any(lab == "absolutely_continuous" for lab, _ in labels):
        return _record(case, "dim_drop", "skipped", detail="measure has an absolutely continuous stratum")
    T = case.T
    low = T.dims < case.spec.ambient_dim
    frac = T.mass_fraction(low)
    return _record(case, "dim_drop", "pass" if frac >= mass else "fail", measured=frac,
                   threshold=f"dim T<n on >={mass:.0%} stable mass",
                   offending_cells=_offenders(~low & T.stable, case.space))


def verify_lip_equality(case: CaseData, family=DEFAULT_FAMILY, tol: float = LIP_TOL,
                        mass: float = LIP_MASS) -> CheckRecord:
    """Full tangent fibers on most of the mass iff mwug equals lip on most of the mass."""
    if (rec := _needs_v(case, "lip_equality")) is not None:
        return rec
    T, V = case.T, case.V
    n = case.spec.ambient_dim
    full = T.mass_fraction(T.dims == n) >= mass
    fracs = []
    for f in family_for(n, family):
        sol = mwug_via_projection(T, V, f)
        fracs.append(T.mass_fraction(np.abs(sol.mwug - sol.lip) <= tol))
    equal = min(fracs) >= mass
    status = "pass" if full == equal else "fail"
    return _record(case, "lip_equality", status, measured=min(fracs),
                   threshold=f"full-fiber={full} must match mwug=lip={equal}",
                   detail=f"full_fiber_fraction={T.mass_fraction(T.dims == n):.4f}")


def random_polynomial_field(space: GridSpace, rng: np.random.Generator, degree: int = 2) -> np.ndarray:
    """Random smooth vector field at quadrature nodes, coefficients from ``rng``."""
    X = space.node_user
    n = space.ndim
    exps = [e for e in np.ndindex(*([degree + 1] * n)) if sum(e) <= degree]
    out = np.zeros((len(X), n))
    for j in range(n):
        for e in exps:
            out[:, j] += rng.normal() * np.prod(X ** np.array(e), axis=1)
    return out


def registry_field(space: GridSpace, raw: np.ndarray) -> np.ndarray:
    """Project a node field onto the registry subspace of the stratum owning each node.

    Each stratum's part is damped by a bump vanishing on its relative boundary,
    so no flux leaves through the edge of the support.
    """
    out = np.zeros_like(raw)
    for j, stratum in enumerate(space.spec.strata):
        sel = space.node_stratum == j
        B = stratum.am_basis()
        out[sel] = (raw[sel] @ B @ B.T) * stratum.bump(space.node_x[sel])[:, None]
    return out


def verify_divergence_tangency(case: CaseData, seed: int = 7, n_fields: int = 6, min_accepted: int = 3,
                               tol: float = 1e-6, svd_tol: float | None = None) -> tuple[CheckRecord, list]:
    """Accepted divergence fields must lie in the tangent fiber on most of the mass."""
    svd_tol = case.schedule.svd_tol if svd_tol is None else svd_tol
    space, T = case.space, case.T
    if case.V is None:
        return _needs_v(case, "divergence_tangency"), []
    rng = np.random.default_rng(seed)
    M = assemble_mass(space)
    accepted, worst = [], 1.0
    for _ in range(n_fields):
        w = registry_field(space, random_polynomial_field(space, rng))
        if np.sum(space.node_w * np.einsum("qi,qi->q", w, w)) <= 1e-24:
            continue
        if check_divergence(space, w, tol, M=M).accepted:
            accepted.append(w)
    if len(accepted) < min_accepted:
        rec = _record(case, "divergence_tangency", "inconclusive", measured=float(len(accepted)),
                      threshold=f">={min_accepted} accepted fields",
                      detail=f"only {len(accepted)} of {n_fields} random fields accepted")
        return rec, accepted
    P = T.projectors()[space.node_cell]
    for w in accepted:
        out = w - np.einsum("qij,qj->qi", P, w)
        num = np.sqrt(space.cell_average(np.einsum("qi,qi->q", out, out)))
        den = np.sqrt(space.cell_average(np.einsum("qi,qi->q", w, w)))
        ok = num <= 5 * svd_tol * den + 1e-14
        worst = min(worst, T.mass_fraction(ok))
    status = "pass" if worst >= TANGENCY_MASS else "fail"
    return _record(case, "divergence_tangency", status, measured=worst,
                   threshold=f"out-of-T<={5 * svd_tol:g}|w| on >={TANGENCY_MASS:.0%} stable mass",
                   detail=f"{len(accepted)} accepted fields"), accepted


def verify_route_agreement(case: CaseData, family=DEFAULT_FAMILY) -> CheckRecord:
    """Projection and relaxation routes agree cellwise on stable cells."""
    if (rec := _needs_v(case, "route_agreement")) is not None:
        return rec
    space, T, V = case.space, case.T, case.V
    svd_tol = case.schedule.svd_tol
    worst, bad_all = 0.0, np.zeros(space.n_cells, bool)
    for f in family_for(space.ndim, family):
        proj = mwug_via_projection(T, V, f)
        relax = minimal_relaxed_gradient(space, project_function(space, f), case.W)
        gap = np.abs(proj.mwug - relax.mwug)
        allowed = np.maximum(ROUTE_ABS, 5 * svd_tol * np.linalg.norm(space.cell_average(f.gradient(space.node_user)), axis=1))
        ratio = np.where(T.stable, gap / allowed, 0.0)
        worst = max(worst, float(ratio.max(initial=0.0)))
        bad_all |= ratio > 1
    return _record(case, "route_agreement", "pass" if worst <= 1 else "fail", measured=worst,
                   threshold="gap/allowed<=1 on every stable cell",
                   offending_cells=_offenders(bad_all, space))


def verify_tensorization(name: str, a: CaseData, b: CaseData, prod: CaseData,
                         family=DEFAULT_FAMILY) -> list[CheckRecord]:
    """Product fibers are direct sums and squared mwugs add."""
    space = prod.space
    na = a.spec.ambient_dim
    bary = space.cell_bary
    ca = _locate_cells(a.T, bary[:, :na])
    cb = _locate_cells(b.T, bary[:, na:])
    found = (ca >= 0) & (cb >= 0)
    n = space.ndim
    dist = np.ones(space.n_cells)
    for c in np.flatnonzero(found):
        Ba, Bb = a.T.basis(ca[c]), b.T.basis(cb[c])
        S = np.zeros((n, Ba.shape[1] + Bb.shape[1]))
        S[:na, : Ba.shape[1]] = Ba
        S[na:, Ba.shape[1]:] = Bb
        dist[c] = grassmann_distance(prod.T.basis(c), S)
    stable = prod.T.stable & found & a.T.stable[np.maximum(ca, 0)] & b.T.stable[np.maximum(cb, 0)]
    mass = space.cell_mass
    frac = float(mass[stable & (dist <= TENSOR_DGR)].sum() / mass[stable].sum())
    rec_a = CheckRecord("tensor_fibers", name, prod.scales, "pass" if frac >= TENSOR_MASS else "fail",
                        frac, f"dGr<={TENSOR_DGR} on >={TENSOR_MASS:.0%} stable mass",
                        prod.T.unstable_fraction, offending_cells=_offenders(stable & (dist > TENSOR_DGR), space))
    worst = 1.0
    Pa = a.T.projectors()[np.maximum(ca, 0)]
    Pb = b.T.projectors()[np.maximum(cb, 0)]
    for f in family_for(n, family):
        lhs = minimal_relaxed_gradient(space, project_function(space, f), prod.W).mwug ** 2
        grad = space.cell_average(f.gradient(space.node_user))
        ga = np.einsum("cij,cj->ci", Pa, grad[:, :na])
        gb = np.einsum("cij,cj->ci", Pb, grad[:, na:])
        rhs = np.sum(ga**2, axis=1) + np.sum(gb**2, axis=1)
        ok = np.abs(lhs - rhs) <= TENSOR_REL * np.maximum(lhs, rhs) + 1e-8
        worst = min(worst, float(mass[stable & ok].sum() / mass[stable].sum()))
    rec_b = CheckRecord("tensor_mwug", name, prod.scales, "pass" if worst >= TENSOR_MASS else "fail",
                        worst, f"relative gap<={TENSOR_REL:.0%} on >={TENSOR_MASS:.0%} stable mass",
                        prod.T.unstable_fraction)
    return [rec_a, rec_b]


def _locate_cells(F: DistributionField, points: np.ndarray) -> np.ndarray:
    space = F.space
    k = np.floor((points + space.jitter - space.grid.origin) / space.h).astype(np.int64)
    lookup = {tuple(c): i for i, c in enumerate(space.cells.tolist())}
    return np.array([lookup.get(tuple(row), -1) for row in k.tolist()], dtype=np.int64)


def verify_invariants(case: CaseData, seed: int = 7, accepted_fields=(), tol: float = 1e-6) -> list[CheckRecord]:
    """Projection, complement, energy and ordering identities."""
    rng = np.random.default_rng(seed)
    space, T = case.space, case.T
    n = space.ndim
    recs = []
    v = rng.normal(size=(space.n_cells, n))
    pv = T.project(v)
    idem = float(np.abs(T.project(pv) - pv).max())
    contract = float((np.linalg.norm(pv, axis=1) - np.linalg.norm(v, axis=1)).max())
    ok = idem <= 1e-12 and contract <= 1e-12
    recs.append(_record(case, "projection", "pass" if ok else "fail", measured=max(idem, contract),
                        threshold="idempotent and 1-Lipschitz to 1e-12"))
    back = T.complement().complement()
    inv = max((grassmann_distance(back.basis(c), T.basis(c)) for c in range(space.n_cells)), default=0.0)
    recs.append(_record(case, "complement_involution", "pass" if inv <= 1e-12 else "fail", measured=inv,
                        threshold="dGr<=1e-12"))
    W = case.W
    f = project_function(space, lambda x: rng.normal() + x @ rng.normal(size=n) + (x**2) @ rng.normal(size=n))
    g = project_function(space, lambda x: np.sin(x @ rng.normal(size=n)) + x[:, 0])
    E = lambda c: minimal_relaxed_gradient(space, c, W).energy
    lhs, rhs = E(f + g) + E(f - g), 2 * E(f) + 2 * E(g)
    par = abs(lhs - rhs) / max(abs(rhs), 1e-300)
    recs.append(_record(case, "parallelogram", "pass" if par <= 1e-10 else "fail", measured=par,
                        threshold="relative<=1e-10"))
    G = assemble_stiffness(space)
    dirichlet = 0.5 * float(f @ (G @ f))
    ech = E(f)
    recs.append(_record(case, "energy_le_dirichlet", "pass" if ech <= dirichlet * (1 + 1e-12) + 1e-15 else "fail",
                        measured=ech - dirichlet, threshold="E_Ch<=0.5 c^T G c"))
    if case.V is None:
        recs.append(_needs_v(case, "mwug_le_am_le_lip"))
    else:
        worst = -np.inf
        for form in family_for(n):
            sol = mwug_via_projection(T, case.V, form)
            worst = max(worst, float(np.max(sol.mwug - sol.am_norm)), float(np.max(sol.am_norm - sol.lip)))
        recs.append(_record(case, "mwug_le_am_le_lip", "pass" if worst <= 1e-12 else "fail", measured=worst,
                            threshold="max violation<=1e-12"))
    if accepted_fields:
        gform = ClosedForm("1 + 0.3*x1" + (" - 0.2*x2" if n > 1 else ""), n)
        M = assemble_mass(space)
        results = [leibniz_defect(space, w, gform, tol, M) for w in accepted_fields]
        used = min(r[1] for r in results)
        worst = max(r[0] for r in results)
        if used == 0:
            recs.append(_record(case, "leibniz", "inconclusive", detail="no interior test functions"))
        else:
            recs.append(_record(case, "leibniz", "pass" if worst <= 10 * tol else "fail", measured=worst,
                                threshold=f"weak defect<={10 * tol:g}"))
    else:
        recs.append(_record(case, "leibniz", "inconclusive", detail="no accepted divergence fields"))
    return recs


# ----------------------------------------------------------------------------
# suites

@dataclass
class SuiteCase:
    name: str
    scales: tuple
    spec: MeasureSpec | None = None
    factors: tuple | None = None


@dataclass
class Suite:
    cases: list
    seed: int = 7
    svd_tol: float = 0.05
    eps_factor: float = 0.25
    stability_window: int = 2
    family: tuple = DEFAULT_FAMILY
    tol: float = 1e-6


def default_suite(seed: int = 7) -> Suite:
    from .presets import cantor, cross, lebesgue, segment
    cases = [
        SuiteCase("lebesgue_square", (1 / 16, 1 / 32, 1 / 64), lebesgue(2)),
        SuiteCase("segment", (1 / 32, 1 / 64, 1 / 128), segment(0.0)),
        SuiteCase("cross", (1 / 32, 1 / 64, 1 / 128), cross()),
        SuiteCase("ternary", tuple(3.0**-k for k in (4, 5, 6)), cantor("ternary", 30)),
        SuiteCase("fat_cantor", tuple(2.0**-k for k in range(6, 13)), cantor("svc", 24)),
        SuiteCase("lebesgue_x_ternary", (1 / 27, 1 / 81), factors=(lebesgue(1), cantor("ternary", 30))),
    ]
    return Suite(cases, seed)


def parse_scales(values) -> tuple:
    from fractions import Fraction
    out = []
    for v in (values.split(",") if isinstance(values, str) else values):
        try:
            out.append(float(Fraction(str(v).strip())))
        except (ValueError, ZeroDivisionError):
            raise SpecSyntaxError(f"bad scale {v!r}") from None
    if not out or any(h <= 0 for h in out):
        raise ValidationError("scales must be positive")
    return tuple(out)


def _resolve_spec(ref: str, base: Path) -> MeasureSpec:
    if ref in PRESETS:
        return PRESETS[ref]()
    path = Path(ref)
    if not path.is_absolute():
        path = base / path
    return load_measure_spec(path)


def load_suite(path) -> Suite:
    path = Path(path)
    try:
        doc = tomli.loads(path.read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise SpecSyntaxError(str(exc)) from None
    head = doc.get("suite", {})
    entries = doc.get("case", [])
    if not entries:
        raise ValidationError("suite needs at least one [[case]]")
    cases = []
    for e in entries:
        name = e.get("name") or e.get("preset") or e.get("config") or "case"
        scales = parse_scales(e.get("scales", "1/16,1/32"))
        if "product" in e:
            a, b = e["product"]
            cases.append(SuiteCase(name, scales, factors=(_resolve_spec(a, path.parent), _resolve_spec(b, path.parent))))
        else:
            ref = e.get("preset") or e.get("config")
            if ref is None:
                raise ValidationError(f"case {name!r} needs preset, config or product")
            cases.append(SuiteCase(name, scales, _resolve_spec(ref, path.parent)))
    return Suite(cases, int(head.get("seed", 7)), float(head.get("svd_tol", 0.05)),
                 float(head.get("eps_factor", 0.25)), int(head.get("stability_window", 2)),
                 tuple(head.get("f_family", DEFAULT_FAMILY)), float(head.get("tol", 1e-6)))


def _schedule(suite: Suite, scales) -> SweepSchedule:
    return SweepSchedule(scales, suite.eps_factor, suite.svd_tol, suite.stability_window)


def run_case(suite: Suite, case: CaseData) -> list[CheckRecord]:
    recs = [verify_T_leq_V(case), verify_dim_drop(case), verify_lip_equality(case, suite.family)]
    tang, accepted = verify_divergence_tangency(case, suite.seed, tol=suite.tol)
    recs.append(tang)
    recs.append(verify_route_agreement(case, suite.family))
    recs.extend(verify_invariants(case, suite.seed, accepted, suite.tol))
    return recs


def run_suite(suite: Suite) -> list[CheckRecord]:
    records = []
    for sc in suite.cases:
        sched = _schedule(suite, sc.scales)
        try:
            if sc.factors is not None:
                a, b = sc.factors
                ca = prepare_case(f"{sc.name}:left", a, sched)
                cb = prepare_case(f"{sc.name}:right", b, sched)
                prod = prepare_case(sc.name, product_spec(a, b, sc.name), sched)
                records.extend(run_case(suite, prod))
                records.extend(verify_tensorization(sc.name, ca, cb, prod, suite.family))
            else:
                records.extend(run_case(suite, prepare_case(sc.name, sc.spec, sched)))
        except (SolverError, ResourceError, EvalError, InconclusiveError) as exc:
            records.append(CheckRecord("case", sc.name, ",".join(f"{h:.6g}" for h in sc.scales), "error",
                                       detail=f"{type(exc).__name__}: {exc}"))
    return records


def exit_code(records: list[CheckRecord]) -> int:
    if any(r.status == "error" and "SolverError" in r.detail for r in records):
        return 3
    if any(r.status in ("fail", "error") for r in records):
        return 1
    return 0


FIELDS = ["check", "spec", "scales", "status", "measured", "threshold", "unstable_fraction", "detail",
          "offending_cells"]


def records_csv(records: list[CheckRecord]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=FIELDS, lineterminator="\n")
    w.writeheader()
    for r in records:
        row = asdict(r)
        row["offending_cells"] = " ".join(map(str, r.offending_cells))
        w.writerow(row)
    return buf.getvalue()


def records_text(records: list[CheckRecord]) -> str:
    width = max((len(r.check) for r in records), default=10)
    swidth = max((len(r.spec) for r in records), default=10)
    lines = []
    for r in records:
        lines.append(f"{r.status.upper():<12} {r.check:<{width}}  {r.spec:<{swidth}}  measured={r.measured:.6g}"
                     f"  [{r.threshold}]  unstable={r.unstable_fraction:.3f}"
                     + (f"  {r.detail}" if r.detail else ""))
    counts = {s: sum(r.status == s for r in records) for s in ("pass", "fail", "inconclusive", "skipped", "error")}
    lines.append("summary: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return "\n".join(lines) + "\n"


def write_report(records: list[CheckRecord], out_dir, meta: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(records_text(records), encoding="utf-8")
    (out / "report.csv").write_text(records_csv(records), encoding="utf-8")
    if meta is not None:
        write_meta(out / "meta.txt", meta)


def write_meta(path, meta: dict) -> None:
    lines = [f"{k}: {v}" for k, v in meta.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0
