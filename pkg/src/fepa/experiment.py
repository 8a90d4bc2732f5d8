"""The heterogeneous-rates study: error of approximate lumping as the rates spread apart.

The model is ``(P1 <> ... <> PD) <alpha> Q`` with

    Pd  = (alpha, 1 + (d-1) Delta).Pd'      Pd' = (beta, 0.5).Pd
    Q   = (alpha, 1.0).Q'                    Q'  = (gamma, 15.0).Q

and initial populations Pd = 200 + (d-1), Q = 400.  Every Pd rate is replaced
by the class mean to get the reference model; for exact lumping the Pd
initial populations are averaged as well.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .lumping import EFL, OFL, Partition, build_lumped_ode
from .perturbation import efl_error, homogenize, ofl_error, perturbation_report, plan_for_partition
from .semantics import vector_field
from .solver import SolverConfig, integrate
from .syntax import MIN, PRODUCT, FepaModel, parse_model

COLUMNS = ("rho", "D", "delta_param", "eps_norm", "delta0_norm", "efl_error_pct", "ofl_error_pct", "theory_bound")


def default_deltas(start: float = 0.0005, stop: float = 0.1, step: float = 0.005) -> tuple[float, ...]:
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return tuple(round(start + k * step, 12) for k in range(n))


def heterogeneous_model_text(D: int, delta: float, rho: str = MIN, u: float = 1.0, s: float = 0.5, w: float = 15.0) -> str:
    lines = [f"semantics = {rho};"]
    for d in range(1, D + 1):
        r = 1.0 + (d - 1) * delta
        lines.append(f"P{d} = (alpha, {r!r}).P{d}';")
        lines.append(f"P{d}' = (beta, {s!r}).P{d};")
        lines.append(f"init P{d} = {200 + (d - 1)};")
    lines.append(f"Q = (alpha, {u!r}).Q';")
    lines.append(f"Q' = (gamma, {w!r}).Q;")
    lines.append("init Q = 400;")
    lines.append("system = (" + " <> ".join(f"P{d}" for d in range(1, D + 1)) + ") <alpha> Q;")
    return "\n".join(lines) + "\n"


def heterogeneous_model(D: int, delta: float, rho: str = MIN, **rates) -> FepaModel:
    if D < 1:
        raise ValueError("D must be at least 1")
    if delta < 0:
        raise ValueError("Delta must be nonnegative")
    return parse_model(heterogeneous_model_text(D, delta, rho, **rates))


def replica_partition(D: int) -> Partition:
    blocks = (tuple(f"P{d}" for d in range(1, D + 1)), ("Q",))
    sigmas = {f"P{d}": {"P1": f"P{d}", "P1'": f"P{d}'"} for d in range(1, D + 1)}
    sigmas["Q"] = {"Q": "Q", "Q'": "Q'"}
    return Partition(blocks, sigmas)


@dataclass(frozen=True)
class ExperimentSpec:
    efl_D: tuple[int, ...] = (3, 6, 9, 12)
    ofl_D: tuple[int, ...] = (12,)
    deltas: tuple[float, ...] = field(default_factory=default_deltas)
    rhos: tuple[str, ...] = (MIN, PRODUCT)
    t_end: float = 100.0
    grid: float = 0.2
    norm: str = "inf"
    bound: bool = True

    def __post_init__(self):
        if any(d < 1 for d in self.efl_D + self.ofl_D):
            raise ValueError("D values must be at least 1")
        if any(not x > 0 for x in self.deltas):
            raise ValueError("Delta values must be positive")
        if any(r not in (MIN, PRODUCT) for r in self.rhos):
            raise ValueError(f"unknown semantics in {self.rhos}")

    def points(self) -> list[tuple[str, str, int, float]]:
        out = []
        for rho in self.rhos:
            out += [(EFL, rho, D, x) for D in self.efl_D for x in self.deltas]
            out += [(OFL, rho, D, x) for D in self.ofl_D for x in self.deltas]
        return out


def run_point(kind: str, rho: str, D: int, delta: float, spec: ExperimentSpec = ExperimentSpec()) -> dict:
    """One sweep row: solve the heterogeneous model and its lumped reference."""
    cfg = SolverConfig(t_end=spec.t_end, grid=spec.grid)
    model = heterogeneous_model(D, delta, rho)
    partition = replica_partition(D)
    plan = plan_for_partition(model, partition, average_init=kind == EFL)
    reference, partial = homogenize(model, plan, spec.norm)
    full_field = vector_field(model)
    full = integrate(full_field, full_field.initial_state(), cfg)
    lumped = build_lumped_ode(reference, partition, kind)
    if kind == EFL:
        W = integrate(lumped, lumped.lump_initial(), cfg)
        error = efl_error(full, lumped.recover(W))
    else:
        W = integrate(lumped, lumped.lump_initial(full_field.initial_state()), cfg)
        error = ofl_error(full, W, lumped)
    bound = None
    if spec.bound and spec.norm == "inf":
        bound = perturbation_report(model, reference, spec.t_end, trajectory=full).bound
    return {
        "rho": rho,
        "D": D,
        "delta_param": delta,
        "eps_norm": float(partial.epsilon),
        "delta0_norm": float(partial.delta),
        "efl_error_pct": float(error) if kind == EFL else None,
        "ofl_error_pct": float(error) if kind == OFL else None,
        "theory_bound": None if bound is None else float(bound),
    }


def _run(args):
    return run_point(*args)


def run_sweep(spec: ExperimentSpec = ExperimentSpec(), jobs: int = 1) -> list[dict]:
    """All rows, ordered by (semantics, kind, D, Delta) whatever the scheduling."""
    points = spec.points()
    work = [(kind, rho, D, x, spec) for kind, rho, D, x in points]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run, work, chunksize=4))
    else:
        rows = [_run(w) for w in work]
    return rows


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(rows: list[dict], path_or_file) -> None:
    close = False
    fh = path_or_file
    if not hasattr(path_or_file, "write"):
        fh = open(path_or_file, "w", newline="", encoding="utf-8")
        close = True
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in COLUMNS])
    finally:
        if close:
            fh.close()


def read_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            row = {}
            for k, v in rec.items():
                if k == "rho":
                    row[k] = v
                elif k == "D":
                    row[k] = int(v)
                else:
                    row[k] = float(v) if v != "" else None
            rows.append(row)
    return rows


def r_squared(x, y) -> float:
    """Coefficient of determination of the least-squares line through (x, y)."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    ss_res = float(((y - (slope * x + intercept)) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


def _series(rows, kind: str, rho: str, D: int) -> tuple[list[float], list[float]]:
    col = "efl_error_pct" if kind == EFL else "ofl_error_pct"
    pts = sorted((r["delta_param"], r[col]) for r in rows if r["rho"] == rho and r["D"] == D and r[col] is not None)
    return [p[0] for p in pts], [p[1] for p in pts]


@dataclass
class SweepSummary:
    checks: list[tuple[str, bool, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def lines(self) -> list[str]:
        return [f"{'ok  ' if ok else 'FAIL'} {name}: {detail}" for name, ok, detail in self.checks]


def summarize(
    rows: list[dict], min_r2: float = 0.95, ofl_limit: float = 1.0, compare_D: tuple[int, ...] = (3, 6, 9)
) -> SweepSummary:
    """Monotonicity and linear fit per curve, semantics comparison, robustness of ordinary lumping."""
    out = SweepSummary()
    rhos = sorted({r["rho"] for r in rows})
    efl_D = sorted({r["D"] for r in rows if r["efl_error_pct"] is not None})
    for rho in rhos:
        for D in efl_D:
            x, y = _series(rows, EFL, rho, D)
            if len(x) < 2:
                continue
            mono = all(b >= a for a, b in zip(y, y[1:]))
            r2 = r_squared(x, y)
            out.checks.append((f"efl {rho} D={D} nondecreasing", mono, f"errors {y[0]:.4g}..{y[-1]:.4g} %"))
            out.checks.append((f"efl {rho} D={D} linear fit", r2 >= min_r2, f"R^2 = {r2:.4f}"))
    if {MIN, PRODUCT} <= set(rhos):
        for D in efl_D:
            if D not in compare_D:
                continue
            _, ym = _series(rows, EFL, MIN, D)
            _, yp = _series(rows, EFL, PRODUCT, D)
            if not ym or not yp:
                continue
            ok = all(p <= m for p, m in zip(yp, ym))
            out.checks.append((f"efl D={D} product <= min", ok, f"max product/min ratio {max((p / m for p, m in zip(yp, ym) if m > 0), default=0.0):.3g}"))
    for rho in rhos:
        for D in sorted({r["D"] for r in rows if r["ofl_error_pct"] is not None}):
            x, yo = _series(rows, OFL, rho, D)
            if not yo:
                continue
            xe, ye = _series(rows, EFL, rho, D)
            worst = max(yo)
            out.checks.append((f"ofl {rho} D={D} below {ofl_limit}%", worst < ofl_limit, f"max {worst:.4g} %"))
            if xe == x:
                ok = all(o < e for o, e in zip(yo, ye))
                out.checks.append((f"ofl {rho} D={D} below efl", ok, f"largest ofl/efl ratio {max((o / e for o, e in zip(yo, ye) if e > 0), default=0.0):.3g}"))
    return out
