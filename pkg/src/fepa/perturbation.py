"""Rate perturbations: homogenised reference models, Lipschitz constants and error bounds.

A model M(xi) whose atoms differ only slightly is compared with a reference
M(zeta) in which the rates (and, for exact lumping, initial populations) of
matched atoms are replaced by their class means.  The distance between the two
solutions is bounded by

    (eps K / L + delta) exp(L t) - eps K / L

with eps = |xi - zeta|, delta = |V_xi(0) - V_zeta(0)|, L a Lipschitz constant
of the reference field in the state and K one of the field in the rates along
the perturbed trajectory.  All constants here are for the infinity norm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import lumping
from .lumping import EFL, OFL, LumpedSystem, Partition, TuplePartition
from .semantics import VectorField, vector_field
from .solver import SolverConfig, Trajectory, integrate, norm
from .syntax import Choice, Const, FepaModel, Prefix, apply_rates, rate_occurrences

K_SAFETY = 1.1


@dataclass(frozen=True)
class HomogenizationPlan:
    """Groups of rate occurrences (indices into nu(M)) and of states to equalise."""

    rate_classes: tuple[tuple[int, ...], ...] = ()
    init_classes: tuple[tuple[str, ...], ...] = ()


@dataclass
class PerturbationReport:
    epsilon: float
    delta: float
    norm: str = "inf"
    L: float | None = None
    K: float | None = None
    t: float | None = None
    bound: float | None = None
    xi: tuple[float, ...] = ()
    zeta: tuple[float, ...] = ()

    def to_json(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "delta": self.delta,
            "norm": self.norm,
            "L": self.L,
            "K": self.K,
            "t": self.t,
            "bound": self.bound,
        }


# --------------------------------------------------------------------------
# homogenisation


def _paired_positions(body1, body2, out: list, counter: list) -> None:
    if isinstance(body1, Prefix) and isinstance(body2, Prefix) and body1.action == body2.action:
        out.append((counter[0], counter[1]))
        counter[0] += 1
        counter[1] += 1
        _paired_positions(body1.continuation, body2.continuation, out, counter)
    elif isinstance(body1, Choice) and isinstance(body2, Choice):
        _paired_positions(body1.left, body2.left, out, counter)
        _paired_positions(body1.right, body2.right, out, counter)
    elif isinstance(body1, Const) and isinstance(body2, Const):
        pass
    else:
        raise ValueError(f"definitions have different shapes: {body1} vs {body2}")


def plan_for_partition(
    model: FepaModel, partition: Partition | TuplePartition, average_init: bool = False
) -> HomogenizationPlan:
    """Equalise the rates at matching positions of the definitions paired by the bijections.

    Definitions are matched through the state bijections of each block, so
    the bodies must have the same prefix/choice structure and actions.  With
    ``average_init`` the initial populations of matched states are also
    equalised (needed for exact lumping).
    """
    if isinstance(partition, TuplePartition):
        partition = lumping.projected_partition(lumping.complete_tuple_partition(model, partition))
    partition = lumping.complete_partition(model, partition)
    field_ = vector_field(model)
    env = model.environment
    occ = {(d, pos): k for k, (d, pos, _) in enumerate(rate_occurrences(model))}
    parent = list(range(len(occ)))

    def find(k):
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    init_classes = []
    for block in partition.blocks:
        rep = block[0]
        g = field_.graphs[rep]
        for state, P in zip(g.states, g.names):
            images = [partition.sigmas[a][P] for a in block]
            if len(images) > 1:
                init_classes.append(tuple(images))
            if not isinstance(state, Const):
                continue
            for Q in images[1:]:
                if Q not in env:
                    raise ValueError(f"state {Q} matched with definition {P} is not a definition")
                pairs: list = []
                _paired_positions(env[P], env[Q], pairs, [0, 0])
                for i, j in pairs:
                    parent[find(occ[(Q, j)])] = find(occ[(P, i)])
    groups: dict[int, list[int]] = {}
    for k in range(len(occ)):
        groups.setdefault(find(k), []).append(k)
    rate_classes = tuple(tuple(g) for g in groups.values() if len(g) > 1)
    return HomogenizationPlan(rate_classes, tuple(init_classes) if average_init else ())


def _mean(values: Sequence[float]) -> float:
    if all(v == values[0] for v in values):
        return float(values[0])
    return math.fsum(values) / len(values)


def homogenize(model: FepaModel, plan: HomogenizationPlan, norm_kind: str = "inf") -> tuple[FepaModel, PerturbationReport]:
    """Reference model with every planned class set to its mean, and the resulting eps and delta."""
    xi = list(model.rate_vector)
    zeta = list(xi)
    for cls in plan.rate_classes:
        m = _mean([xi[k] for k in cls])
        for k in cls:
            zeta[k] = m
    ref = apply_rates(model, zeta)
    init = dict(model.initial_populations)
    new_init = dict(init)
    for cls in plan.init_classes:
        m = _mean([init.get(s, 0.0) for s in cls])
        for s in cls:
            new_init[s] = m
    ref = ref.replace(init=new_init)
    f = vector_field(model)
    d0 = f.population_vector(init) - f.population_vector(new_init)
    eps = norm(np.subtract(xi, zeta), norm_kind)
    return ref, PerturbationReport(eps, norm(d0, norm_kind), norm_kind, xi=tuple(xi), zeta=tuple(zeta))


# --------------------------------------------------------------------------
# Lipschitz constants


def _parents(field_: VectorField) -> np.ndarray:
    left, right, _, _ = field_._tree
    parent = np.full(len(left), -1, dtype=np.int64)
    for k in range(len(left)):
        if left[k] >= 0:
            parent[left[k]] = k
            parent[right[k]] = k
    return parent


def _edge_bounds(field_: VectorField, V: np.ndarray, edge_rate: np.ndarray, wrt: str) -> tuple[np.ndarray, np.ndarray]:
    """Upper bounds on each edge flow and on the l1 norm of its gradient.

    ``V`` has shape (points, states).  The flow of edge e is its rate times
    the source population times the scaling accumulated on the way to the
    root.  With ``wrt="state"`` the gradient is taken in the populations,
    with ``wrt="rate"`` in the edge rates, weighted by the number of
    derivations each edge stands for.
    """
    src, _, act, _ = field_._edges
    left, right, node_leaf, sync = field_._tree
    leaf_of = field_._state_leaf
    product = field_._product
    npts = V.shape[0]
    m, nn = len(field_.actions), len(left)
    mult = field_.multiplicity.astype(float)

    val = np.zeros((m, nn, npts))
    lip = np.zeros((m, nn, npts))
    leaf_node = {int(node_leaf[k]): k for k in range(nn) if node_leaf[k] >= 0}
    for e in range(len(src)):
        k = leaf_node[int(leaf_of[src[e]])]
        a = act[e]
        val[a, k] += edge_rate[e] * V[:, src[e]]
        if wrt == "state":
            lip[a, k] += edge_rate[e]
        else:
            lip[a, k] += mult[e] * V[:, src[e]]
    for k in range(nn):
        if node_leaf[k] >= 0:
            continue
        x, y = left[k], right[k]
        for a in range(m):
            if not sync[k, a]:
                val[a, k] = val[a, x] + val[a, y]
                lip[a, k] = lip[a, x] + lip[a, y]
            elif product:
                val[a, k] = val[a, x] * val[a, y]
                lip[a, k] = lip[a, x] * val[a, y] + val[a, x] * lip[a, y]
            else:
                val[a, k] = np.minimum(val[a, x], val[a, y])
                lip[a, k] = np.maximum(lip[a, x], lip[a, y])

    parent = _parents(field_)
    ev = np.empty((len(src), npts))
    el = np.empty((len(src), npts))
    for e in range(len(src)):
        a = act[e]
        v = edge_rate[e] * V[:, src[e]]
        g = np.full(npts, edge_rate[e]) if wrt == "state" else mult[e] * V[:, src[e]]
        child = leaf_node[int(leaf_of[src[e]])]
        node = parent[child]
        while node >= 0:
            if sync[node, a]:
                sib = right[node] if left[node] == child else left[node]
                if product:
                    v, g = v * val[a, sib], g * val[a, sib] + v * lip[a, sib]
                else:
                    # flow * min(1, A_sib / A_child): flow <= A_child keeps both ratios <= 1
                    g = g + lip[a, sib] + lip[a, child]
            child, node = node, parent[node]
        ev[e], el[e] = v, g
    return ev, el


def _row_sums(field_: VectorField, edge_lip: np.ndarray) -> np.ndarray:
    """Per state, the sum of the bounds of the edges entering or leaving it."""
    src, dst, _, _ = field_._edges
    rows = np.zeros((len(field_), edge_lip.shape[1]))
    for e in range(len(src)):
        if src[e] == dst[e]:
            continue
        rows[src[e]] += edge_lip[e]
        rows[dst[e]] += edge_lip[e]
    return rows


def _edge_rates(field_: VectorField) -> np.ndarray:
    return field_._edges[3]


def state_lipschitz(model: FepaModel, upper) -> float:
    """L with |F(x) - F(y)|_inf <= L |x - y|_inf for x, y in the box [0, upper]."""
    f = vector_field(model)
    upper = np.asarray(upper, dtype=float)
    if upper.shape != (len(f),) or not np.all(np.isfinite(upper)) or np.any(upper < 0):
        raise ValueError("state box must be finite and nonnegative, one bound per state")
    _, lip = _edge_bounds(f, upper[None, :], _edge_rates(f), "state")
    return float(_row_sums(f, lip).max(initial=0.0))


def parameter_lipschitz(model: FepaModel, V, rate_upper: Sequence[float] | None = None) -> np.ndarray:
    """K_x at each population in ``V``: |F_xi(x) - F_zeta(x)|_inf <= K_x |xi - zeta|_inf.

    ``rate_upper`` is the componentwise largest rate vector of the parameter
    box (default: the model's own rates).
    """
    f = vector_field(model)
    V = np.atleast_2d(np.asarray(V, dtype=float))
    rates = _edge_rates(f)
    if rate_upper is not None:
        fu = vector_field(apply_rates(model, rate_upper))
        if fu._edges[0].shape != f._edges[0].shape:
            raise ValueError("perturbed rates change the derivation graphs")
        rates = np.maximum(rates, _edge_rates(fu))
    _, lip = _edge_bounds(f, V, rates, "rate")
    return _row_sums(f, lip).max(axis=0, initial=0.0)


def lipschitz_estimate(model: FepaModel, box, rate_box: tuple[Sequence[float], Sequence[float]] | None = None) -> tuple[float, float]:
    """(L, K) over the state box [0, box] and the parameter box ``rate_box``.

    Both bounds grow with the populations, so K over the whole box is its
    value at the upper corner.
    """
    upper = np.asarray(box, dtype=float)
    L = state_lipschitz(model, upper)
    rate_upper = None
    if rate_box is not None:
        lo, hi = (np.asarray(x, dtype=float) for x in rate_box)
        if np.any(lo <= 0) or np.any(hi < lo):
            raise ValueError("rate box must be positive with lower <= upper")
        rate_upper = hi
    K = float(parameter_lipschitz(model, upper, rate_upper)[0])
    return L, K


def conservation_box(model: FepaModel, *initials: Mapping[str, float]) -> np.ndarray:
    """Upper population bound per state: the largest initial total of its atom.

    Each atom's total population is invariant, so every solution started from
    one of ``initials`` stays in [0, box].
    """
    f = vector_field(model)
    initials = initials or (model.initial_populations,)
    upper = np.zeros(len(f))
    for init in initials:
        V = f.population_vector(init)
        for atom, idx in f.atom_states.items():
            upper[idx] = np.maximum(upper[idx], V[idx].sum())
    return upper


# --------------------------------------------------------------------------
# bound


def error_bound(report: PerturbationReport, t: float | None = None) -> float:
    """(eps K / L + delta) e^{L t} - eps K / L, or infinity when it overflows."""
    t = report.t if t is None else t
    if report.L is None or report.K is None or t is None:
        raise ValueError("report needs L, K and t")
    L, K, eps, delta = report.L, report.K, report.epsilon, report.delta
    if not L > 0:
        raise ValueError("Lipschitz constant must be positive")
    if not math.isfinite(K):
        raise ValueError("parameter Lipschitz constant must be finite")
    if eps < 0 or delta < 0 or t < 0:
        raise ValueError("eps, delta and t must be nonnegative")
    try:
        growth = math.exp(L * t)
        drift = eps * K / L * math.expm1(L * t)
    except OverflowError:
        return math.inf if (eps > 0 and K > 0) or delta > 0 else 0.0
    return drift + delta * growth


def perturbation_report(
    perturbed: FepaModel,
    reference: FepaModel,
    t: float,
    trajectory: Trajectory | None = None,
    cfg: SolverConfig | None = None,
) -> PerturbationReport:
    """eps, delta, L, K and the bound at time t for M(xi) against M(zeta)."""
    xi, zeta = np.array(perturbed.rate_vector), np.array(reference.rate_vector)
    if xi.shape != zeta.shape:
        raise ValueError("models have different rate vectors")
    fx, fz = vector_field(perturbed), vector_field(reference)
    if fx.names != fz.names:
        raise ValueError("models have different state spaces")
    V0x, V0z = fx.initial_state(), fz.initial_state()
    if trajectory is None:
        cfg = cfg or SolverConfig(t_end=t, grid=t / max(1, round(t / 0.2)))
        trajectory = integrate(fx, V0x, cfg)
    upper = conservation_box(reference, perturbed.initial_populations, reference.initial_populations)
    L = state_lipschitz(reference, upper)
    hull_hi = np.maximum(xi, zeta)
    K = K_SAFETY * float(parameter_lipschitz(perturbed, np.maximum(trajectory.states, 0.0), hull_hi).max())
    report = PerturbationReport(
        float(np.abs(xi - zeta).max(initial=0.0)),
        float(np.abs(V0x - V0z).max(initial=0.0)),
        "inf",
        L,
        K,
        t,
        xi=tuple(xi),
        zeta=tuple(zeta),
    )
    report.bound = error_bound(report)
    return report


# --------------------------------------------------------------------------
# error metrics


def efl_error(full: Trajectory, perturbed: Trajectory, states: Sequence[str] | None = None) -> float:
    """100 * max_t max_S |V_S(t) - V'_S(t)| / V_S(0), in percent.

    By default S ranges over the states with positive initial population.
    """
    V0 = full.states[0]
    if states is None:
        states = [n for n, v in zip(full.names, V0) if v > 0]
        if not states:
            raise ValueError("no state has a positive initial population")
    worst = 0.0
    for s in states:
        base = full[s][0]
        if not base > 0:
            raise ValueError(f"state {s} has zero initial population")
        worst = max(worst, float(np.abs(full[s] - perturbed[s]).max()) / base)
    return 100.0 * worst


def ofl_error(full: Trajectory, lumped: Trajectory, members: LumpedSystem | Mapping[str, Sequence[str]]) -> float:
    """100 * max_t max_P |sum of block members - W_P| / (sum at time 0), in percent.

    Lumped variables whose block starts empty are skipped.
    """
    if isinstance(members, LumpedSystem):
        members = members.members
    worst = None
    for P in lumped.names:
        total = full.column_sum(members[P])
        if not total[0] > 0:
            continue
        err = float(np.abs(total - lumped[P]).max()) / total[0]
        worst = err if worst is None else max(worst, err)
    if worst is None:
        raise ValueError("every lumped variable starts at zero population")
    return 100.0 * worst


# --------------------------------------------------------------------------
# approximate lumping


@dataclass
class ApproximateLumping:
    mode: str
    partition: Partition | TuplePartition
    plan: HomogenizationPlan
    reference: FepaModel
    verification: lumping.VerificationReport
    perturbation: PerturbationReport
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "partition": self.partition.to_json(),
            "verification": self.verification.to_json(),
            "perturbation": self.perturbation.to_json(),
            "warnings": self.warnings,
        }


def approximate_lumping(
    model: FepaModel,
    mode: str,
    partition: Partition | TuplePartition | None = None,
    t: float = 100.0,
    norm_kind: str = "inf",
    samples: int = 50,
    tol: float = 1e-9,
    seed: int = 42,
    cfg: SolverConfig | None = None,
) -> ApproximateLumping:
    """Homogenise toward a partition and verify it on the reference model.

    Without a partition, the coarsest shape-compatible candidate is used.
    Exact lumping (``efl``) also equalises the initial populations.
    """
    if mode not in (EFL, OFL):
        raise ValueError(f"unknown mode {mode!r}")
    if partition is None:
        candidates = lumping.discover_partitions(model, "eps-" + mode, samples, tol, seed)
        partition = candidates[0].partition
    plan = plan_for_partition(model, partition, average_init=mode == EFL)
    reference, partial = homogenize(model, plan, norm_kind)
    if mode == EFL:
        verification = lumping.verify_efl(reference, partition, samples, tol, seed)
    else:
        part = partition
        if isinstance(part, TuplePartition):
            part = lumping.projected_partition(lumping.complete_tuple_partition(reference, part))
        verification = lumping.verify_ofl(reference, part, samples, tol, seed)
    report = perturbation_report(model, reference, t, cfg=cfg)
    report = replace(report, epsilon=partial.epsilon, delta=partial.delta, norm=norm_kind)
    if norm_kind == "inf":
        report.bound = error_bound(report)
    else:
        report.bound = None
    warnings = [] if norm_kind == "inf" else ["the error bound is only computed for the infinity norm"]
    return ApproximateLumping(mode, partition, plan, reference, verification, report, warnings)
