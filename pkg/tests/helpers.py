"""Model builders and brute-force oracles shared by the tests."""
import itertools
import random

import numpy as np
from hypothesis import strategies as st

from fepa import AtomDefinition, Choice, Const, FepaModel, Leaf, Par, Prefix, component_rate, derivation_graph, parse_model
from fepa.lumping import TuplePartition, complete_partition

# (criterion, passed, detail, seconds), filled in by test_acceptance and printed at the end of the run
ACCEPTANCE: list[tuple[str, bool, str, float]] = []


def sys_text(D, rates=None, init=None, rho="product", u=1.0, s=0.5, w=15.0, q0=400):
    rates = rates or [1.0] * D
    lines = [f"semantics = {rho};"]
    for d in range(1, D + 1):
        lines.append(f"P{d} = (alpha, {rates[d - 1]!r}).P{d}'; P{d}' = (beta, {s!r}).P{d};")
        lines.append(f"init P{d} = {200 if init is None else init[d - 1]!r};")
    lines.append(f"Q = (alpha, {u!r}).Q'; Q' = (gamma, {w!r}).Q; init Q = {q0!r};")
    lines.append("system = (" + " <> ".join(f"P{d}" for d in range(1, D + 1)) + ") <alpha> Q;")
    return "\n".join(lines) + "\n"


def sys_model(D, **kw):
    return parse_model(sys_text(D, **kw))


def sys_e_text(D, rho="product", r_rates=None, p0=100, r0=50, q0=400):
    """Replicated (P <alpha> R) pairs in parallel, all synchronising with Q."""
    r_rates = r_rates or [2.0] * D
    lines = [f"semantics = {rho};"]
    for d in range(1, D + 1):
        lines.append(f"P{d} = (alpha, 1.0).P{d}'; P{d}' = (beta, 0.5).P{d}; init P{d} = {p0!r};")
        lines.append(f"R{d} = (alpha, {r_rates[d - 1]!r}).R{d}'; R{d}' = (gamma, 3.0).R{d}; init R{d} = {r0!r};")
    lines.append(f"Q = (alpha, 1.0).Q'; Q' = (delta, 15.0).Q; init Q = {q0!r};")
    lines.append("system = (" + " <> ".join(f"(P{d} <alpha> R{d})" for d in range(1, D + 1)) + ") <alpha> Q;")
    return "\n".join(lines) + "\n"


def sys_e_model(D, **kw):
    return parse_model(sys_e_text(D, **kw))


def sys_e_tuples(D):
    return TuplePartition([[(f"P{d}", f"R{d}") for d in range(1, D + 1)], [("Q",)]])


def p_tilde_text(D, rho="product", r=1.0, s=0.5, u=1.0, w=15.0):
    """Replicas with a gamma self-loop split, synchronised on {alpha, gamma} with a Q that never does gamma."""
    lines = [f"semantics = {rho};"]
    for d in range(1, D + 1):
        a = r / (d + 1)
        lines.append(f"P{d} = (alpha, {r!r}).P{d}' + (gamma, {a!r}).P{d} + (gamma, {r - a!r}).P{d}';")
        lines.append(f"P{d}' = (beta, {s!r}).P{d}; init P{d} = 100;")
    lines.append(f"Q = (alpha, {u!r}).Q'; Q' = (delta, {w!r}).Q; init Q = 300;")
    lines.append("system = (" + " <> ".join(f"P{d}" for d in range(1, D + 1)) + ") <alpha, gamma> Q;")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# random atoms


def random_atom_text(rng: random.Random, name: str, n_states: int, actions=("a", "b"), rates=(0.5, 1.0, 2.0)):
    """An atom with states name0..name{k-1}, each with one to three prefixes; a cycle keeps all reachable."""
    names = [f"{name}{i}" for i in range(n_states)]
    lines = []
    for i, s in enumerate(names):
        terms = [f"({rng.choice(actions)}, {rng.choice(rates)!r}).{names[(i + 1) % n_states]}"]
        for _ in range(rng.randint(0, 2)):
            terms.append(f"({rng.choice(actions)}, {rng.choice(rates)!r}).{rng.choice(names)}")
        lines.append(f"{s} = {' + '.join(terms)};")
    return lines


def relabelled(lines, old: str, new: str, perm, rng: random.Random, jitter: float = 0.0):
    """Rename states old{i} -> new{perm[i]} keeping old0 as the root; optionally perturb rates."""
    import re

    out = []
    for line in lines:
        line = re.sub(rf"\b{old}(\d+)\b", lambda m: f"{new}{perm[int(m.group(1))]}", line)
        if jitter:
            line = re.sub(r"\(([ab]), ([0-9.]+)\)", lambda m: f"({m.group(1)}, {float(m.group(2)) + rng.uniform(-jitter, jitter)!r})", line)
        out.append(line)
    return out


def atom_graph(lines, root):
    model = parse_model("\n".join(lines) + f"\nsystem = {root};\n")
    return derivation_graph(root, model.environment)


def _tensor(g, actions):
    T = np.zeros((len(actions), len(g), len(g)))
    for (i, j, a), r in g.aggregated_rates.items():
        T[actions.index(a), i, j] += r
    return T


def brute_force_min_eps(g1, g2):
    """Minimum over all bijections of the largest aggregated-rate difference (None if sizes differ)."""
    if len(g1) != len(g2):
        return None
    actions = sorted({t.action for g in (g1, g2) for t in g.transitions})
    T1, T2 = _tensor(g1, actions), _tensor(g2, actions)
    best = np.inf
    for perm in itertools.permutations(range(len(g1))):
        p = list(perm)
        best = min(best, float(np.abs(T1 - T2[:, p][:, :, p]).max(initial=0.0)))
    return best


def is_rate_preserving(g1, g2, mapping, tol=1e-9):
    actions = sorted({t.action for g in (g1, g2) for t in g.transitions})
    T1, T2 = _tensor(g1, actions), _tensor(g2, actions)
    p = [g2.names.index(mapping[n]) for n in g1.names]
    return np.allclose(T1, T2[:, p][:, :, p], rtol=tol, atol=1e-12)


# --------------------------------------------------------------------------
# hypothesis strategies for well-formed models

ACTIONS = ("a", "b", "c")
rates = st.floats(min_value=1e-3, max_value=1e3, allow_nan=False, allow_infinity=False)


@st.composite
def bodies(draw, names, depth=2):
    def term(d):
        if d == 0 or draw(st.booleans()):
            return Prefix(draw(st.sampled_from(ACTIONS)), draw(rates), Const(draw(st.sampled_from(names))))
        if draw(st.booleans()):
            return Choice(term(d - 1), term(d - 1))
        inner = term(d - 1)
        return Prefix(draw(st.sampled_from(ACTIONS)), draw(rates), inner)

    return term(depth)


@st.composite
def compositions(draw, atoms):
    if len(atoms) == 1:
        return Leaf(atoms[0])
    k = draw(st.integers(1, len(atoms) - 1))
    sync = frozenset(draw(st.sets(st.sampled_from(ACTIONS))))
    return Par(draw(compositions(atoms[:k])), draw(compositions(atoms[k:])), sync)


@st.composite
def models(draw):
    n_atoms = draw(st.integers(1, 3))
    defs, atoms, init = [], [], {}
    for k in range(n_atoms):
        names = [f"X{k}_{i}" for i in range(draw(st.integers(1, 3)))]
        atoms.append(names[0])
        for name in names:
            defs.append(AtomDefinition(name, draw(bodies(names))))
        if draw(st.booleans()):
            init[names[0]] = draw(st.floats(0, 1e4, allow_nan=False))
    rho = draw(st.sampled_from(["min", "product"]))
    return FepaModel(tuple(defs), draw(compositions(atoms)), rho, tuple(init.items()))


# --------------------------------------------------------------------------
# lumping oracles


def reevaluate_ofl(model, partition, report):
    """Independent check of the reported condition at the witness, via the recursive rates."""
    env, rho = model.environment, model.rho
    V = dict(report.witness)
    p = complete_partition(model, partition)
    block = next(b for b in p.blocks if report.state in p.sigmas[b[0]].values())
    images = [p.sigmas[a][report.state] for a in block]
    lumped = {name: 0.0 for name in V}
    for b in p.blocks:
        for P in p.sigmas[b[0]]:
            lumped[P] = sum(V[p.sigmas[a][P]] for a in b)
    assert report.condition == "i"
    lhs = sum(component_rate(model.system, V, s, report.action, rho, env) for s in images)
    rhs = component_rate(model.system, lumped, report.state, report.action, rho, env)
    return abs(lhs - rhs) / max(1.0, abs(lhs), abs(rhs))


COMPOSED_LEFT = """A1 = (a, 1.0).A1'; A1' = (b, 0.5).A1; A2 = (a, 1.0).A2'; A2' = (b, 0.5).A2; A3 = (a, 1.0).A3'; A3' = (b, 0.5).A3;
B = (a, 2.0).B' + (c, 1.0).B; B' = (c, 3.0).B;
init A1 = 30; init A2 = 10; init B = 20;
"""
COMPOSED_RIGHT = """C1 = (d, 1.5).C1'; C1' = (a, 0.7).C1; C2 = (d, 1.5).C2'; C2' = (a, 0.7).C2;
E = (d, 1.0).E'; E' = (e, 4.0).E;
init C1 = 5; init C2' = 15; init E = 25;
"""


def composed_text(L, rho, part="both"):
    """Two small models with replica blocks; part selects the left, right or the composition over L."""
    left, right = "(A1 <> A2 <> A3) <a> B", "(C1 <> C2) <d> E"
    if part == "left":
        return f"semantics = {rho};\n{COMPOSED_LEFT}system = {left};\n"
    if part == "right":
        return f"semantics = {rho};\n{COMPOSED_RIGHT}system = {right};\n"
    return f"semantics = {rho};\n{COMPOSED_LEFT}{COMPOSED_RIGHT}system = ({left}) <{','.join(sorted(L))}> ({right});\n"
