"""Semi-isomorphism, exact and ordinary fluid lumpability, and lumped ODE systems.

Partitions carry explicit state bijections.  A ``Partition`` lists blocks of
atom names, first member being the representative, and ``sigmas[atom]`` maps
each state of the representative to a state of ``atom``.  A
``TuplePartition`` groups tuples of atoms into classes that are claimed to be
label equivalent; there ``sigmas[atom]`` maps from the atom at the same
position of the first tuple of the class.

The conditions quantify over every population function; they are checked at
randomly sampled populations.
"""
from __future__ import annotations

import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .semantics import DerivationGraph, VectorField, vector_field
from .syntax import FepaModel, Leaf, Par, is_well_posed

PASS = "PASS"
FAIL = "FAIL"
EFL = "efl"
OFL = "ofl"

# graphs above this size are pre-partitioned by colour refinement
EXHAUSTIVE_LIMIT = 8
REL_TOL = 1e-9
ABS_TOL = 1e-12


class LumpingError(ValueError):
    pass


# --------------------------------------------------------------------------
# semi-isomorphism


def _rate_tensor(g: DerivationGraph, actions: Sequence[str]) -> np.ndarray:
    """T[a, i, j] = total rate of a-transitions from state i to state j."""
    pos = {a: k for k, a in enumerate(actions)}
    T = np.zeros((len(actions), len(g), len(g)))
    for (i, j, a), r in g.aggregated_rates.items():
        T[pos[a], i, j] += r
    return T


def _actions(*graphs: DerivationGraph) -> list[str]:
    return sorted({t.action for g in graphs for t in g.transitions})


def _signature(T: np.ndarray, i: int) -> np.ndarray:
    out = T[:, i, :].sum(axis=1) - T[:, i, i]
    inn = T[:, :, i].sum(axis=1) - T[:, i, i]
    return np.concatenate([out, inn, T[:, i, i]])


def _close(x, y) -> bool:
    return bool(np.all(np.isclose(x, y, rtol=REL_TOL, atol=ABS_TOL)))


def _round(x: float) -> float:
    return float(f"{x:.9g}")


def _refined_colours(T1: np.ndarray, T2: np.ndarray) -> tuple[list, list]:
    """Colour refinement on the disjoint union of the two weighted graphs."""
    n = T1.shape[1]
    T = np.zeros((T1.shape[0], 2 * n, 2 * n))
    T[:, :n, :n] = T1
    T[:, n:, n:] = T2
    colour = [tuple(_round(x) for x in _signature(T, i)) for i in range(2 * n)]
    for _ in range(2 * n):
        keys = []
        for i in range(2 * n):
            outs = sorted((a, _round(T[a, i, j]), colour[j]) for a, j in zip(*np.nonzero(T[:, i, :])))
            ins = sorted((a, _round(T[a, j, i]), colour[j]) for a, j in zip(*np.nonzero(T[:, :, i])))
            keys.append((colour[i], tuple(outs), tuple(ins)))
        ids = {k: c for c, k in enumerate(sorted(set(keys), key=repr))}
        new = [ids[k] for k in keys]
        if len(set(new)) == len(set(map(repr, colour))):
            colour = new
            break
        colour = new
    return colour[:n], colour[n:]


def semi_isomorphic(g1: DerivationGraph, g2: DerivationGraph) -> dict[str, str] | None:
    """A bijection ds(g1) -> ds(g2) preserving every aggregated rate, or None.

    Rates are compared with a relative tolerance of 1e-9.  The returned map
    is keyed by state names.
    """
    n = len(g1)
    if n != len(g2):
        return None
    actions = _actions(g1, g2)
    T1, T2 = _rate_tensor(g1, actions), _rate_tensor(g2, actions)
    sig1 = [_signature(T1, i) for i in range(n)]
    sig2 = [_signature(T2, j) for j in range(n)]
    allowed = [[j for j in range(n) if _close(sig1[i], sig2[j])] for i in range(n)]
    if n > EXHAUSTIVE_LIMIT:
        c1, c2 = _refined_colours(T1, T2)
        allowed = [[j for j in allowed[i] if c2[j] == c1[i]] for i in range(n)]
    if any(not a for a in allowed):
        return None
    # the root first, trying the other root first
    for i in range(n):
        allowed[i].sort(key=lambda j, i=i: (j != i, j))

    assign: list[int] = []
    used = [False] * n

    def extend(i: int) -> bool:
        if i == n:
            return True
        for j in allowed[i]:
            if used[j]:
                continue
            ok = _close(T1[:, i, i], T2[:, j, j])
            if ok and assign:
                ok = _close(T1[:, i, :i], T2[:, j, assign]) and _close(T1[:, :i, i], T2[:, assign, j])
            if not ok:
                continue
            assign.append(j)
            used[j] = True
            if extend(i + 1):
                return True
            assign.pop()
            used[j] = False
        return False

    if not extend(0):
        return None
    return {g1.names[i]: g2.names[j] for i, j in enumerate(assign)}


def eps_semi_isomorphism(
    g1: DerivationGraph, g2: DerivationGraph, require_support: bool = False
) -> tuple[dict[str, str], float] | None:
    """The bijection minimising the largest aggregated-rate difference, with that difference.

    None when the derivative sets differ in size (or, with
    ``require_support``, when no bijection maps transitions onto transitions).
    """
    n = len(g1)
    if n != len(g2):
        return None
    actions = _actions(g1, g2)
    T1, T2 = _rate_tensor(g1, actions), _rate_tensor(g2, actions)
    S1, S2 = T1 > 0, T2 > 0
    best: list = [math.inf, None]
    assign: list[int] = []
    used = [False] * n

    def extend(i: int, cost: float):
        if cost >= best[0]:
            return
        if i == n:
            best[0], best[1] = cost, list(assign)
            return
        for j in sorted(range(n), key=lambda j: (j != i, j)):
            if used[j]:
                continue
            if require_support:
                if (S1[:, i, i] != S2[:, j, j]).any():
                    continue
                if assign and ((S1[:, i, :i] != S2[:, j, assign]).any() or (S1[:, :i, i] != S2[:, assign, j]).any()):
                    continue
            c = float(np.abs(T1[:, i, i] - T2[:, j, j]).max(initial=0.0))
            if assign:
                c = max(
                    c,
                    float(np.abs(T1[:, i, :i] - T2[:, j, assign]).max(initial=0.0)),
                    float(np.abs(T1[:, :i, i] - T2[:, assign, j]).max(initial=0.0)),
                )
            assign.append(j)
            used[j] = True
            extend(i + 1, max(cost, c))
            assign.pop()
            used[j] = False

    extend(0, 0.0)
    if best[1] is None:
        return None
    return {g1.names[i]: g2.names[j] for i, j in enumerate(best[1])}, best[0]


# --------------------------------------------------------------------------
# partitions


@dataclass
class Partition:
    blocks: tuple[tuple[str, ...], ...]
    sigmas: dict[str, dict[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        self.blocks = tuple(tuple(b) for b in self.blocks)
        if any(not b for b in self.blocks):
            raise LumpingError("empty block")

    @classmethod
    def discrete(cls, model: FepaModel) -> "Partition":
        return cls(tuple((a,) for a in model.atoms))

    @property
    def atoms(self) -> list[str]:
        return [a for b in self.blocks for a in b]

    def is_discrete(self) -> bool:
        return all(len(b) == 1 for b in self.blocks)

    def to_json(self) -> dict:
        return {"kind": "partition", "blocks": [list(b) for b in self.blocks], "sigma": self.sigmas}

    def __str__(self):
        return "{" + ", ".join("{" + ", ".join(b) + "}" for b in self.blocks) + "}"


@dataclass
class TuplePartition:
    classes: tuple[tuple[tuple[str, ...], ...], ...]
    sigmas: dict[str, dict[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        self.classes = tuple(tuple(tuple(t) for t in c) for c in self.classes)
        for c in self.classes:
            if not c or any(not t for t in c):
                raise LumpingError("empty tuple class")
            if len({len(t) for t in c}) != 1:
                raise LumpingError(f"tuples of different length in one class: {c}")

    @classmethod
    def identity(cls, model: FepaModel) -> "TuplePartition":
        return cls(tuple((((a,),)) for a in model.atoms))

    @property
    def atoms(self) -> list[str]:
        return [a for c in self.classes for t in c for a in t]

    def to_json(self) -> dict:
        return {"kind": "tuples", "classes": [[list(t) for t in c] for c in self.classes], "sigma": self.sigmas}

    def __str__(self):
        return "{" + ", ".join(" ~ ".join("(" + ", ".join(t) + ")" for t in c) for c in self.classes) + "}"


def partition_from_json(data: Mapping) -> Partition | TuplePartition:
    sigmas = {a: dict(m) for a, m in data.get("sigma", {}).items()}
    if "classes" in data:
        return TuplePartition(data["classes"], sigmas)
    if "blocks" in data:
        return Partition(data["blocks"], sigmas)
    raise LumpingError("partition file needs 'blocks' or 'classes'")


def load_partition(path) -> Partition | TuplePartition:
    with open(path, encoding="utf-8") as fh:
        return partition_from_json(json.load(fh))


def _check_cover(model: FepaModel, atoms: Sequence[str]) -> None:
    expected = model.atoms
    if sorted(atoms) != sorted(expected) or len(set(atoms)) != len(atoms):
        missing = sorted(set(expected) - set(atoms))
        extra = sorted(set(atoms) - set(expected))
        dup = sorted({a for a in atoms if atoms.count(a) > 1})
        raise LumpingError(
            "partition must cover every atom exactly once"
            + (f"; missing {missing}" if missing else "")
            + (f"; unknown {extra}" if extra else "")
            + (f"; repeated {dup}" if dup else "")
        )


def _bijection(model: FepaModel, source: str, target: str, given: Mapping[str, str] | None, warnings: list) -> dict[str, str]:
    """State map from atom ``source`` to atom ``target``: given, exact, or the closest one."""
    field_ = vector_field(model)
    g1, g2 = field_.graphs[source], field_.graphs[target]
    if given is not None:
        given = dict(given)
        if sorted(given) != sorted(g1.names) or sorted(given.values()) != sorted(g2.names):
            raise LumpingError(f"sigma for {target} is not a bijection ds({source}) -> ds({target})")
        return given
    if source == target:
        return {n: n for n in g1.names}
    sigma = semi_isomorphic(g1, g2)
    if sigma is not None:
        return sigma
    found = eps_semi_isomorphism(g1, g2, require_support=False)
    if found is None:
        raise LumpingError(f"no bijection between ds({source}) and ds({target}): sizes {len(g1)} and {len(g2)}")
    sigma, eps = found
    warnings.append(f"{source} and {target} are not semi-isomorphic (closest bijection off by {eps:g})")
    return sigma


def complete_partition(model: FepaModel, p: Partition, warnings: list | None = None) -> Partition:
    """Copy of ``p`` with every bijection filled in."""
    warnings = [] if warnings is None else warnings
    _check_cover(model, p.atoms)
    sigmas = {}
    for block in p.blocks:
        rep = block[0]
        for atom in block:
            sigmas[atom] = _bijection(model, rep, atom, p.sigmas.get(atom), warnings)
    return Partition(p.blocks, sigmas)


def complete_tuple_partition(model: FepaModel, tp: TuplePartition, warnings: list | None = None) -> TuplePartition:
    warnings = [] if warnings is None else warnings
    _check_cover(model, tp.atoms)
    sigmas = {}
    for c in tp.classes:
        for t in c:
            for k, atom in enumerate(t):
                sigmas[atom] = _bijection(model, c[0][k], atom, tp.sigmas.get(atom), warnings)
    return TuplePartition(tp.classes, sigmas)


def projected_partition(tp: TuplePartition) -> Partition:
    """Blocks of atoms at the same position of label-equivalent tuples."""
    blocks = []
    sigmas = {}
    for c in tp.classes:
        for k in range(len(c[0])):
            block = tuple(t[k] for t in c)
            blocks.append(block)
            for atom in block:
                if atom in tp.sigmas:
                    sigmas[atom] = tp.sigmas[atom]
    return Partition(tuple(blocks), sigmas)


def _compose(first: Mapping[str, str], second: Mapping[str, str]) -> dict[str, str]:
    return {a: second[b] for a, b in first.items()}


def _invert(sigma: Mapping[str, str]) -> dict[str, str]:
    return {b: a for a, b in sigma.items()}


def merge_partitions(model: FepaModel, parts: Sequence[Partition | TuplePartition]) -> Partition:
    """Quotient by the transitive closure of the union of the (projected) relations.

    The block representative is the lexicographically smallest atom.
    Refused on ill-posed models, where merging is not guaranteed to be sound.
    """
    if not is_well_posed(model):
        raise LumpingError("model is ill-posed; merged partitions need not be exactly fluid lumpable")
    parent = {a: a for a in model.atoms}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    edges: dict[str, list[tuple[str, dict[str, str]]]] = {a: [] for a in model.atoms}
    for part in parts:
        if isinstance(part, TuplePartition):
            part = projected_partition(complete_tuple_partition(model, part))
        else:
            part = complete_partition(model, part)
        for block in part.blocks:
            rep = block[0]
            for atom in block[1:]:
                parent[find(atom)] = find(rep)
                sigma = part.sigmas[atom]
                edges[rep].append((atom, sigma))
                edges[atom].append((rep, _invert(sigma)))

    groups: dict[str, list[str]] = {}
    for a in model.atoms:
        groups.setdefault(find(a), []).append(a)
    blocks, sigmas = [], {}
    for members in groups.values():
        rep = min(members)
        maps = {rep: {n: n for n in vector_field(model).graphs[rep].names}}
        queue = deque([rep])
        while queue:
            a = queue.popleft()
            for b, sigma in edges[a]:
                if b not in maps:
                    maps[b] = _compose(maps[a], sigma)
                    queue.append(b)
        order = [rep] + sorted(m for m in members if m != rep)
        blocks.append(tuple(order))
        sigmas.update({m: maps[m] for m in order})
    blocks.sort(key=lambda b: model.atoms.index(b[0]))
    return Partition(tuple(blocks), sigmas)


# --------------------------------------------------------------------------
# verification


@dataclass
class VerificationReport:
    verdict: str
    kind: str
    samples: int
    tol: float
    worst_residual: float = 0.0
    condition: str | None = None
    action: str | None = None
    state: str | None = None
    witness: dict[str, float] | None = None
    lhs: float | None = None
    rhs: float | None = None
    detail: str = ""
    warnings: list[str] = field(default_factory=list)
    partition: Partition | TuplePartition | None = None

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def to_json(self) -> dict:
        out = {
            "verdict": self.verdict,
            "kind": self.kind,
            "samples": self.samples,
            "tol": self.tol,
            "worst_residual": self.worst_residual,
            "condition": self.condition,
            "action": self.action,
            "state": self.state,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "witness": self.witness,
            "detail": self.detail,
            "warnings": list(self.warnings),
        }
        if self.partition is not None:
            out["partition"] = self.partition.to_json()
        return out

    def summary(self) -> str:
        if self.passed:
            return f"{self.kind.upper()} {PASS} ({self.samples} samples, worst residual {self.worst_residual:.3g})"
        where = ", ".join(
            x for x in (f"condition {self.condition}", self.action and f"action {self.action}",
                        self.state and f"state {self.state}") if x
        )
        values = f": {self.lhs!r} != {self.rhs!r}" if self.lhs is not None else ""
        return f"{self.kind.upper()} {FAIL} at {where}{values}" + (f" ({self.detail})" if self.detail else "")


def _residual(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    return np.abs(lhs - rhs) / np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(rhs)))


def sample_populations(model: FepaModel, samples: int, seed: int = 42) -> np.ndarray:
    """Random population vectors in [0, Vmax], then two structured ones per atom.

    Every other random sample has some zero entries.  The structured samples
    make one atom dominant (all others shrunk by 1e-3) or one atom scarce, so
    that each branch of a min is exercised.
    """
    field_ = vector_field(model)
    init = model.initial_populations
    vmax = 2.0 * max(init.values(), default=0.0) + 1.0
    rng = np.random.default_rng(seed)
    V = rng.uniform(0.0, vmax, size=(samples, len(field_)))
    zeros = rng.random(V.shape) < 0.3
    zeros[::2] = False
    V[zeros] = 0.0
    atom_of = field_._state_leaf
    n_atoms = int(atom_of.max()) + 1
    base = rng.uniform(0.1 * vmax, vmax, size=(2 * n_atoms, len(field_)))
    for k in range(n_atoms):
        mine = atom_of == k
        base[2 * k, ~mine] *= 1e-3
        base[2 * k + 1, mine] *= 1e-3
    return np.vstack([V, base])


class _Checker:
    """Collects the worst residual and the first violation."""

    def __init__(self, report: VerificationReport, field_: VectorField):
        self.report = report
        self.field = field_

    def check(self, condition: str, lhs: np.ndarray, rhs: np.ndarray, states: Sequence[int] | None, V) -> bool:
        res = _residual(lhs, rhs)
        if res.size == 0:
            return True
        worst = float(res.max())
        self.report.worst_residual = max(self.report.worst_residual, worst)
        if worst <= self.report.tol:
            return True
        idx = np.unravel_index(int(res.argmax()), res.shape)
        r = self.report
        r.verdict = FAIL
        r.condition = condition
        r.action = self.field.actions[idx[0]] if len(self.field.actions) else None
        if states is not None and res.ndim == 2:
            r.state = self.field.names[states[idx[1]]]
        r.lhs, r.rhs = float(lhs[idx]), float(rhs[idx])
        if V is not None:
            r.witness = {n: float(x) for n, x in zip(self.field.names, V)}
        return False


def _state_index(field_: VectorField, atom: str, sigma: Mapping[str, str]) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (P, sigma(P)) over the states of sigma's source atom."""
    src = np.array([field_.index[a] for a in sigma], dtype=np.int64)
    dst = np.array([field_.index[b] for b in sigma.values()], dtype=np.int64)
    return src, dst


def _ill_posed_warning(model: FepaModel) -> list[str]:
    if is_well_posed(model):
        return []
    return ["model is ill-posed: the characterisation by semi-isomorphism does not apply"]


def verify_efl(
    model: FepaModel, tp: TuplePartition | Partition, samples: int = 50, tol: float = 1e-9, seed: int = 42
) -> VerificationReport:
    """Check label equivalence of the tuples in each class at sampled populations.

    Given a plain ``Partition`` instead, the exact-lumpability property itself
    is checked: the field maps populations that are symmetric under the
    bijections to symmetric derivatives.
    """
    if isinstance(tp, Partition):
        return _verify_symmetry(model, tp, samples, tol, seed)
    warnings = _ill_posed_warning(model)
    tp = complete_tuple_partition(model, tp, warnings)
    field_ = vector_field(model)
    report = VerificationReport(PASS, EFL, samples, tol, warnings=warnings, partition=tp)
    checker = _Checker(report, field_)
    Vs = sample_populations(model, samples, seed)
    n = len(field_)
    roots = {a: field_.atom_states[a][0] for a in model.atoms}

    for c in tp.classes:
        for ti, tj in itertools.combinations(c, 2):
            perm = np.arange(n)
            src_all, dst_all = [], []
            for k in range(len(ti)):
                sigma = _compose(_invert(tp.sigmas[ti[k]]), tp.sigmas[tj[k]])
                src, dst = _state_index(field_, ti[k], sigma)
                perm[src] = dst
                perm[dst] = src
                src_all.append(src)
                dst_all.append(dst)
            src = np.concatenate(src_all)
            dst = np.concatenate(dst_all)
            inside = set(itertools.chain.from_iterable(field_.atom_states[a] for a in ti + tj))
            others = np.array([i for i in range(n) if i not in inside], dtype=np.int64)
            for V in Vs:
                W = V[perm]
                R, root = field_.component_rates(V)
                Rs, root_s = field_.component_rates(W)
                In = field_.inflow(V, R)
                Ins = field_.inflow(W, Rs)
                ok = (
                    checker.check("a", R[:, src], Rs[:, dst], src, V)
                    and checker.check("b", In[:, src], Ins[:, dst], src, V)
                    and checker.check("c", R[:, others], Rs[:, others], others, V)
                    and checker.check("d", root[:, None], root_s[:, None], None, V)
                )
                if not ok:
                    report.detail = f"tuples ({', '.join(ti)}) and ({', '.join(tj)})"
                    return report
            for a, b in zip(ti, tj):
                a_i = field_.state_rate[:, roots[a]]
                a_j = field_.state_rate[:, roots[b]]
                if not checker.check("d", a_i[:, None], a_j[:, None], None, None):
                    report.detail = f"atoms {a} and {b} have different apparent rates"
                    return report
    return report


def _verify_symmetry(model: FepaModel, p: Partition, samples: int, tol: float, seed: int) -> VerificationReport:
    warnings = _ill_posed_warning(model)
    p = complete_partition(model, p, warnings)
    field_ = vector_field(model)
    report = VerificationReport(PASS, EFL, samples, tol, warnings=warnings, partition=p)
    checker = _Checker(report, field_)
    pairs = [_state_index(field_, b[0], p.sigmas[a]) for b in p.blocks for a in b[1:]]
    for V in sample_populations(model, samples, seed):
        for src, dst in pairs:
            V[dst] = V[src]
        F = field_(V)
        for src, dst in pairs:
            if not checker.check("symmetry", F[None, src], F[None, dst], src, V):
                report.action = None
                return report
    return report


def _ofl_aggregation(field_: VectorField, p: Partition) -> tuple[np.ndarray, np.ndarray]:
    """(A, rep): V^sigma = A @ V, and the indices of the representative states."""
    n = len(field_)
    A = np.zeros((n, n))
    rep = []
    for block in p.blocks:
        for P in field_.graphs[block[0]].names:
            i = field_.index[P]
            rep.append(i)
            for atom in block:
                A[i, field_.index[p.sigmas[atom][P]]] += 1.0
    return A, np.array(rep, dtype=np.int64)


def verify_ofl(model: FepaModel, p: Partition, samples: int = 50, tol: float = 1e-9, seed: int = 42) -> VerificationReport:
    """Check the ordinary-lumpability conditions at sampled populations."""
    warnings = _ill_posed_warning(model)
    p = complete_partition(model, p, warnings)
    field_ = vector_field(model)
    report = VerificationReport(PASS, OFL, samples, tol, warnings=warnings, partition=p)
    checker = _Checker(report, field_)
    A, rep = _ofl_aggregation(field_, p)
    for V in sample_populations(model, samples, seed):
        W = A @ V
        R, root = field_.component_rates(V)
        Rs, root_s = field_.component_rates(W)
        In = field_.inflow(V, R)
        Ins = field_.inflow(W, Rs)
        ok = (
            checker.check("i", (R @ A.T)[:, rep], Rs[:, rep], rep, V)
            and checker.check("ii", (In @ A.T)[:, rep], Ins[:, rep], rep, V)
            and checker.check("iii", root[:, None], root_s[:, None], None, V)
        )
        if not ok:
            return report
    # the sampled checks give a population witness; this one catches what they may miss
    for block in p.blocks:
        a1 = field_.state_rate[:, field_.atom_states[block[0]][0]]
        for atom in block[1:]:
            aj = field_.state_rate[:, field_.atom_states[atom][0]]
            if not checker.check("iii", a1[:, None], aj[:, None], None, None):
                report.detail = f"atoms {block[0]} and {atom} have different apparent rates"
                return report
    return report


# --------------------------------------------------------------------------
# lumped systems


class LumpedSystem:
    """The aggregated field over the representatives' states.

    In ``ofl`` mode the variable of representative state P is the block sum
    W_P and the field is evaluated at the zero extension of W.  In ``efl``
    mode W_P is the common value of P and its images, and the field is
    evaluated at the replicated population.
    """

    def __init__(self, model: FepaModel, partition: Partition, mode: str, report: VerificationReport | None = None):
        if mode not in (EFL, OFL):
            raise ValueError(f"unknown lumping mode {mode!r}")
        self.model = model
        self.partition = partition
        self.mode = mode
        self.report = report
        self.field = vector_field(model)
        f = self.field
        rep = [f.index[P] for block in partition.blocks for P in f.graphs[block[0]].names]
        pos = {i: k for k, i in enumerate(rep)}
        emb = np.full(len(f), -1, dtype=np.int64)
        for k, i in enumerate(rep):
            emb[i] = k
        self.members: dict[str, list[str]] = {}
        for block in partition.blocks:
            for P in f.graphs[block[0]].names:
                images = [partition.sigmas[a][P] for a in block]
                self.members[P] = images
                if mode == EFL:
                    for Q in images:
                        emb[f.index[Q]] = pos[f.index[P]]
        self._rep = np.array(rep, dtype=np.int64)
        self._emb = emb
        self.names = tuple(f.names[i] for i in rep)

    def __len__(self):
        return len(self.names)

    def __repr__(self):
        return f"LumpedSystem({self.mode}, {len(self)} of {len(self.field)} states)"

    def kernel_args(self) -> tuple:
        return self.field.kernel_args(self._emb, self._rep)

    def embed(self, W) -> np.ndarray:
        W = np.asarray(W, dtype=float)
        return np.where(self._emb >= 0, W[np.maximum(self._emb, 0)], 0.0)

    def __call__(self, W) -> np.ndarray:
        return self.field(self.embed(W))[self._rep]

    def lump_initial(self, V0=None) -> np.ndarray:
        """Lumped initial condition from a full one (default: the model's)."""
        f = self.field
        V0 = f.initial_state() if V0 is None else f._as_vector(V0)
        W = np.empty(len(self.names))
        for k, P in enumerate(self.names):
            values = [V0[f.index[Q]] for Q in self.members[P]]
            if self.mode == OFL:
                W[k] = sum(values)
            else:
                if not np.allclose(values, values[0], rtol=1e-12, atol=0.0):
                    raise ValueError(f"initial populations of {', '.join(self.members[P])} differ; exact lumping needs them equal")
                W[k] = values[0]
        return W

    def block_sums(self, trajectory):
        """Sums of the full solution matching each lumped variable."""
        from .solver import Trajectory

        cols = [trajectory.column_sum(self.members[P]) for P in self.names]
        return Trajectory(trajectory.times, np.column_stack(cols), self.names)

    def recover(self, trajectory):
        """Full trajectory from a lumped one (``efl``) or the block sums (``ofl``)."""
        from .solver import Trajectory

        if self.mode == OFL:
            return Trajectory(trajectory.times, trajectory.states.copy(), self.names)
        cols = np.empty((len(trajectory.times), len(self.field)))
        for k, P in enumerate(self.names):
            for Q in self.members[P]:
                cols[:, self.field.index[Q]] = trajectory.states[:, k]
        return Trajectory(trajectory.times, cols, self.field.names)


def build_lumped_ode(
    model: FepaModel,
    partition: Partition | TuplePartition,
    mode: str = OFL,
    force: bool = False,
    samples: int = 50,
    tol: float = 1e-9,
    seed: int = 42,
) -> LumpedSystem:
    """Verify ``partition`` (unless forced) and build its lumped system."""
    if mode not in (EFL, OFL):
        raise ValueError(f"unknown lumping mode {mode!r}")
    report = None
    if mode == EFL:
        if not force:
            report = verify_efl(model, partition, samples, tol, seed)
        if isinstance(partition, TuplePartition):
            partition = projected_partition(complete_tuple_partition(model, partition))
    else:
        if isinstance(partition, TuplePartition):
            partition = projected_partition(complete_tuple_partition(model, partition))
        if not force:
            report = verify_ofl(model, partition, samples, tol, seed)
    if report is not None and not report.passed:
        raise LumpingError(f"partition is not {mode.upper()}: {report.summary()}")
    partition = complete_partition(model, partition)
    return LumpedSystem(model, partition, mode, report)


# --------------------------------------------------------------------------
# discovery


@dataclass
class Candidate:
    partition: Partition | TuplePartition
    report: VerificationReport | None
    epsilon: float = 0.0

    def lumped_size(self, model: FepaModel) -> int:
        p = projected_partition(self.partition) if isinstance(self.partition, TuplePartition) else self.partition
        graphs = vector_field(model).graphs
        return sum(len(graphs[b[0]]) for b in p.blocks)


def atom_classes(model: FepaModel, approximate: bool = False) -> list[tuple[list[str], dict[str, dict[str, str]], float]]:
    """Group atoms by semi-isomorphism (or by shape, with the rate mismatch).

    Atoms are scanned in lexicographic order, so each class is led by its
    smallest name.  Returns ``(members, sigmas, eps)`` per class.
    """
    graphs = vector_field(model).graphs
    classes: list[list] = []
    for atom in sorted(model.atoms):
        for entry in classes:
            rep = entry[0][0]
            if approximate:
                found = eps_semi_isomorphism(graphs[rep], graphs[atom], require_support=True)
                if found is None:
                    continue
                sigma, e = found
            else:
                sigma, e = semi_isomorphic(graphs[rep], graphs[atom]), 0.0
                if sigma is None:
                    continue
            entry[0].append(atom)
            entry[1][atom] = sigma
            entry[2] = max(entry[2], e)
            break
        else:
            classes.append([[atom], {atom: {n: n for n in graphs[atom].names}}, 0.0])
    return [tuple(c) for c in classes]


def _subtrees(comp, out):
    out.append(comp)
    if isinstance(comp, Par):
        _subtrees(comp.left, out)
        _subtrees(comp.right, out)
    return out


def _leaves(comp) -> tuple[str, ...]:
    if isinstance(comp, Leaf):
        return (comp.atom,)
    return _leaves(comp.left) + _leaves(comp.right)


def _shape(comp, class_of: Mapping[str, int]):
    if isinstance(comp, Leaf):
        return ("leaf", class_of[comp.atom])
    return ("par", tuple(sorted(comp.sync)), _shape(comp.left, class_of), _shape(comp.right, class_of))


def _tuple_candidates(model: FepaModel, classes) -> list[TuplePartition]:
    class_of = {a: k for k, (members, _, _) in enumerate(classes) for a in members}
    graphs = vector_field(model).graphs
    groups: dict = {}
    for sub in _subtrees(model.system, []):
        groups.setdefault(_shape(sub, class_of), []).append(_leaves(sub))
    out = []
    for shape, tuples in sorted(groups.items(), key=lambda kv: -len(kv[1][0])):
        if len(tuples) < 2:
            continue
        tuples = sorted(tuples)
        claimed = {a for t in tuples for a in t}
        if len(claimed) != sum(len(t) for t in tuples):
            continue
        sigmas = {}
        for t in tuples:
            for k, atom in enumerate(t):
                ref = tuples[0][k]
                if ref == atom:
                    sigmas[atom] = {n: n for n in graphs[atom].names}
                else:
                    sigma = semi_isomorphic(graphs[ref], graphs[atom])
                    if sigma is None:
                        found = eps_semi_isomorphism(graphs[ref], graphs[atom], require_support=True)
                        sigma = found[0] if found else None
                    if sigma is None:
                        break
                    sigmas[atom] = sigma
        rest = [a for a in model.atoms if a not in claimed]
        cls = [tuple(tuples)] + [((a,),) for a in rest]
        for a in rest:
            sigmas[a] = {n: n for n in graphs[a].names}
        out.append(TuplePartition(tuple(cls), sigmas))
    return out


def _classes_to_partition(model: FepaModel, classes) -> Partition:
    blocks, sigmas = [], {}
    for members, s, _ in classes:
        blocks.append(tuple(members))
        sigmas.update(s)
    blocks.sort(key=lambda b: model.atoms.index(b[0]))
    return Partition(tuple(blocks), sigmas)


def discover_partitions(
    model: FepaModel, mode: str = OFL, samples: int = 50, tol: float = 1e-9, seed: int = 42
) -> list[Candidate]:
    """Candidate partitions, coarsest first, ending with the discrete partition.

    In ``efl``/``ofl`` mode every candidate returned has passed verification.
    In ``eps-efl``/``eps-ofl`` mode atoms are grouped by shape and candidates
    are returned unverified with their rate mismatch; they become exact only
    after homogenising the rates.
    """
    approximate = mode.startswith("eps-")
    base = mode[4:] if approximate else mode
    if base not in (EFL, OFL):
        raise ValueError(f"unknown discovery mode {mode!r}")
    classes = atom_classes(model, approximate)
    eps = max((e for _, _, e in classes), default=0.0)
    proposals: list[Partition | TuplePartition] = []
    if base == OFL:
        proposals.append(_classes_to_partition(model, classes))
    else:
        proposals.extend(_tuple_candidates(model, classes))
        proposals.append(
            TuplePartition(
                tuple(tuple((a,) for a in members) for members, _, _ in classes),
                {a: s for _, sig, _ in classes for a, s in sig.items()},
            )
        )
    out: list[Candidate] = []
    seen = set()
    for p in proposals:
        key = json.dumps(p.to_json(), sort_keys=True)
        trivial = (isinstance(p, Partition) and p.is_discrete()) or (
            isinstance(p, TuplePartition) and all(len(c) == 1 for c in p.classes)
        )
        if key in seen or trivial:
            continue
        seen.add(key)
        if approximate:
            out.append(Candidate(p, None, eps))
            continue
        report = verify_efl(model, p, samples, tol, seed) if base == EFL else verify_ofl(model, p, samples, tol, seed)
        if report.passed:
            out.append(Candidate(p, report))
    out.sort(key=lambda c: c.lumped_size(model))
    discrete = Partition.discrete(model) if base == OFL else TuplePartition.identity(model)
    verdict = verify_efl(model, discrete, samples, tol, seed) if base == EFL else verify_ofl(model, discrete, samples, tol, seed)
    out.append(Candidate(discrete, verdict))
    return out
