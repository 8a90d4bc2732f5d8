"""Fluid semantics: derivation graphs, apparent/component rates and the ODE field.

Two evaluators live here.  ``apparent_rate`` and ``component_rate`` follow the
recursive definitions literally and work on name-keyed population dicts; they
are slow and serve as the reference.  ``VectorField`` flattens the model into
arrays and evaluates the same quantities with the compiled kernels.
"""
from __future__ import annotations

import functools
import json
from collections import Counter, deque
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import _kernels
from .syntax import (
    PRODUCT,
    Choice,
    Composition,
    Const,
    FepaModel,
    Leaf,
    ModelError,
    Par,
    Prefix,
    Term,
    format_term,
)


def state_name(term: Term) -> str:
    return term.name if isinstance(term, Const) else format_term(term)


@dataclass(frozen=True)
class Transition:
    source: Term
    action: str
    rate: float
    target: Term
    multiplicity: int


def _moves(term: Term, env: Mapping[str, Term], unfolding: tuple = ()) -> list[tuple[str, float, Term]]:
    """One-step derivations of ``term``, one entry per derivation."""
    if isinstance(term, Prefix):
        return [(term.action, term.rate, term.continuation)]
    if isinstance(term, Choice):
        return _moves(term.left, env, unfolding) + _moves(term.right, env, unfolding)
    if term.name in unfolding:
        cycle = " -> ".join(unfolding + (term.name,))
        raise ModelError(f"unguarded recursion: {cycle}")
    if term.name not in env:
        raise ModelError(f"undefined constant {term.name}")
    return _moves(env[term.name], env, unfolding + (term.name,))


class DerivationGraph:
    """Derivative set and transition multiset of one fluid atom."""

    def __init__(self, root: Term, states, transitions):
        self.root = root
        self.states: tuple[Term, ...] = tuple(states)
        self.transitions: tuple[Transition, ...] = tuple(transitions)
        self.index = {s: i for i, s in enumerate(self.states)}
        self.names = tuple(state_name(s) for s in self.states)

    def __len__(self):
        return len(self.states)

    def __repr__(self):
        return f"DerivationGraph({state_name(self.root)}: {len(self.states)} states, {len(self.transitions)} transitions)"

    @functools.cached_property
    def aggregated_rates(self) -> dict[tuple[int, int, str], float]:
        """Rate sum per (source index, target index, action)."""
        agg: dict[tuple[int, int, str], float] = {}
        for t in self.transitions:
            key = (self.index[t.source], self.index[t.target], t.action)
            agg[key] = agg.get(key, 0.0) + t.rate * t.multiplicity
        return agg

    def outgoing(self, state: Term) -> list[Transition]:
        return [t for t in self.transitions if t.source == state]


def derivation_graph(atom: str | Term, env: Mapping[str, Term]) -> DerivationGraph:
    root = Const(atom) if isinstance(atom, str) else atom
    states = [root]
    seen = {root}
    transitions = []
    queue = deque([root])
    while queue:
        state = queue.popleft()
        counts = Counter(_moves(state, env))
        for (action, rate, target), mult in counts.items():
            transitions.append(Transition(state, action, rate, target, mult))
            if target not in seen:
                seen.add(target)
                states.append(target)
                queue.append(target)
    return DerivationGraph(root, states, transitions)


def atom_apparent_rate(term: Term, alpha: str, env: Mapping[str, Term], _unfolding: tuple = ()) -> float:
    if isinstance(term, Prefix):
        return term.rate if term.action == alpha else 0.0
    if isinstance(term, Choice):
        return atom_apparent_rate(term.left, alpha, env, _unfolding) + atom_apparent_rate(
            term.right, alpha, env, _unfolding
        )
    if term.name in _unfolding:
        raise ModelError(f"unguarded recursion through {term.name}")
    return atom_apparent_rate(env[term.name], alpha, env, _unfolding + (term.name,))


def jump_probability(graph: DerivationGraph, source: Term, target: Term, alpha: str) -> float:
    total = sum(t.rate * t.multiplicity for t in graph.outgoing(source) if t.action == alpha)
    if total == 0:
        return 0.0
    hit = sum(t.rate * t.multiplicity for t in graph.outgoing(source) if t.action == alpha and t.target == target)
    return hit / total


# --------------------------------------------------------------------------
# reference evaluators (recursive, name-keyed)


def _derivatives(comp: Composition, env) -> set[str]:
    if isinstance(comp, Leaf):
        return set(derivation_graph(comp.atom, env).names)
    return _derivatives(comp.left, env) | _derivatives(comp.right, env)


def apparent_rate(comp: Composition, V: Mapping[str, float], alpha: str, rho: str, env) -> float:
    """r_alpha(M, V) by direct recursion over the composition."""
    if isinstance(comp, Leaf):
        g = derivation_graph(comp.atom, env)
        return sum(V.get(name, 0.0) * atom_apparent_rate(s, alpha, env) for s, name in zip(g.states, g.names))
    x = apparent_rate(comp.left, V, alpha, rho, env)
    y = apparent_rate(comp.right, V, alpha, rho, env)
    if alpha not in comp.sync:
        return x + y
    return x * y if rho == PRODUCT else min(x, y)


def component_rate(comp: Composition, V: Mapping[str, float], state: str, alpha: str, rho: str, env) -> float:
    """R_alpha(M, V, P') by direct recursion; a zero operand rate gives zero."""
    if isinstance(comp, Leaf):
        g = derivation_graph(comp.atom, env)
        if state not in g.names:
            raise KeyError(state)
        term = g.states[g.names.index(state)]
        return V.get(state, 0.0) * atom_apparent_rate(term, alpha, env)
    side = comp.left if state in _derivatives(comp.left, env) else comp.right
    inner = component_rate(side, V, state, alpha, rho, env)
    if alpha not in comp.sync:
        return inner
    side_rate = apparent_rate(side, V, alpha, rho, env)
    if side_rate == 0:
        return 0.0
    return inner / side_rate * apparent_rate(comp, V, alpha, rho, env)


def can_perform(comp: Composition, alpha: str, env) -> bool:
    """Whether some population makes r_alpha(comp, V) positive."""
    if isinstance(comp, Leaf):
        g = derivation_graph(comp.atom, env)
        return any(atom_apparent_rate(s, alpha, env) > 0 for s in g.states)
    left = can_perform(comp.left, alpha, env)
    right = can_perform(comp.right, alpha, env)
    return (left and right) if alpha in comp.sync else (left or right)


# --------------------------------------------------------------------------
# compiled field


class VectorField:
    """The ODE right-hand side F of a model, evaluated by compiled kernels.

    States are ordered atom by atom (left to right in the composition), each
    atom's derivatives in breadth-first order of first appearance.
    """

    def __init__(self, model: FepaModel):
        from .syntax import validate

        errors = [d for d in validate(model) if d.severity == "error"]
        if errors:
            raise ModelError("; ".join(d.message for d in errors))
        self.model = model
        self.rho = model.rho
        env = model.environment
        self.atoms = model.atoms
        self.graphs = {a: derivation_graph(a, env) for a in self.atoms}
        self.actions = model.actions
        action_index = {a: k for k, a in enumerate(self.actions)}

        self.states: list[Term] = []
        self.atom_of: list[str] = []
        self.atom_states: dict[str, list[int]] = {}
        for atom in self.atoms:
            g = self.graphs[atom]
            self.atom_states[atom] = list(range(len(self.states), len(self.states) + len(g)))
            self.states.extend(g.states)
            self.atom_of.extend([atom] * len(g))
        self.names = [state_name(s) for s in self.states]
        self.index = {name: i for i, name in enumerate(self.names)}
        n, m = len(self.states), len(self.actions)

        leaf_of_atom = {a: k for k, a in enumerate(self.atoms)}
        self._state_leaf = np.array([leaf_of_atom[a] for a in self.atom_of], dtype=np.int64)
        self.state_rate = np.zeros((m, n))
        for i, s in enumerate(self.states):
            for a, alpha in enumerate(self.actions):
                self.state_rate[a, i] = atom_apparent_rate(s, alpha, env)

        src, dst, act, rate, mult = [], [], [], [], []
        offset = 0
        for atom in self.atoms:
            g = self.graphs[atom]
            for t in g.transitions:
                src.append(offset + g.index[t.source])
                dst.append(offset + g.index[t.target])
                act.append(action_index[t.action])
                rate.append(t.rate * t.multiplicity)
                mult.append(t.multiplicity)
            offset += len(g)
        self._edges = (
            np.array(src, dtype=np.int64),
            np.array(dst, dtype=np.int64),
            np.array(act, dtype=np.int64),
            np.array(rate, dtype=float),
        )
        self.multiplicity = np.array(mult, dtype=np.int64)

        left, right, node_leaf, sync = [], [], [], []
        self.nodes: list[Composition] = []

        def visit(comp):
            if isinstance(comp, Leaf):
                left.append(-1)
                right.append(-1)
                node_leaf.append(leaf_of_atom[comp.atom])
            else:
                lk = visit(comp.left)
                rk = visit(comp.right)
                left.append(lk)
                right.append(rk)
                node_leaf.append(-1)
            sync.append([a in comp.sync if isinstance(comp, Par) else False for a in self.actions])
            self.nodes.append(comp)
            return len(left) - 1

        visit(model.system)
        self._tree = (
            np.array(left, dtype=np.int64),
            np.array(right, dtype=np.int64),
            np.array(node_leaf, dtype=np.int64),
            np.array(sync, dtype=np.bool_).reshape(len(left), m),
        )
        self._product = self.rho == PRODUCT

    def __len__(self):
        return len(self.states)

    def __repr__(self):
        return f"VectorField({len(self)} states, rho={self.rho})"

    # -- numerics

    def kernel_args(self, emb=None, rep=None) -> tuple:
        n = len(self.states)
        emb = np.arange(n, dtype=np.int64) if emb is None else np.asarray(emb, dtype=np.int64)
        rep = np.arange(n, dtype=np.int64) if rep is None else np.asarray(rep, dtype=np.int64)
        return (emb, rep, self._state_leaf, self.state_rate, *self._edges, *self._tree, self._product)

    def _as_vector(self, V) -> np.ndarray:
        if isinstance(V, Mapping):
            return self.population_vector(V)
        V = np.asarray(V, dtype=float)
        if V.shape != (len(self.states),):
            raise ValueError(f"expected a population vector of length {len(self.states)}")
        return V

    def __call__(self, V) -> np.ndarray:
        V = self._as_vector(V)
        out = np.empty(len(self.states))
        _kernels.full_field(V, out, self._state_leaf, self.state_rate, *self._edges, *self._tree, self._product)
        return out

    def component_rates(self, V) -> tuple[np.ndarray, np.ndarray]:
        """``(R, root)``: R[a, i] = R_a(M, V, state i); root[a] = r_a(M, V)."""
        V = self._as_vector(V)
        return _kernels.component_rates(V, self._state_leaf, self.state_rate, *self._tree, self._product)

    def inflow(self, V, R=None) -> np.ndarray:
        """sum_{P'} p_a(P', P) R_a(M, V, P') as an (actions x states) array."""
        V = self._as_vector(V)
        if R is None:
            R, _ = self.component_rates(V)
        return _kernels.inflow(V, R, self.state_rate, *self._edges)

    def population_vector(self, populations: Mapping[str, float]) -> np.ndarray:
        V = np.zeros(len(self.states))
        for name, value in populations.items():
            if name not in self.index:
                raise KeyError(f"unknown state {name}")
            V[self.index[name]] = value
        return V

    def initial_state(self) -> np.ndarray:
        return self.population_vector(self.model.initial_populations)

    def atom_totals(self, V) -> dict[str, float]:
        V = self._as_vector(V)
        return {a: float(V[idx].sum()) for a, idx in self.atom_states.items()}

    # -- symbolic export

    def _flows(self, i: int):
        """Aggregated (action, source, coefficient) terms of F_i."""
        coeff: dict[tuple[int, int], float] = {}
        src, dst, act, rate = self._edges
        for e in range(len(src)):
            if dst[e] == i:
                key = (int(act[e]), int(src[e]))
                coeff[key] = coeff.get(key, 0.0) + float(rate[e])
        for a in range(len(self.actions)):
            if self.state_rate[a, i] > 0:
                key = (a, i)
                coeff[key] = coeff.get(key, 0.0) - float(self.state_rate[a, i])
        scale = max((abs(c) for c in coeff.values()), default=0.0)
        return [(a, s, c) for (a, s), c in sorted(coeff.items()) if abs(c) > 1e-14 * scale]

    def _node_exprs(self, a: int) -> list:
        """Expression trees of each node's apparent rate for action index a."""
        left, right, node_leaf, sync = self._tree
        exprs = []
        for k in range(len(left)):
            if node_leaf[k] >= 0:
                atom = self.atoms[node_leaf[k]]
                terms = [(float(self.state_rate[a, i]), i) for i in self.atom_states[atom] if self.state_rate[a, i] > 0]
                exprs.append(("lin", tuple(terms)))
            else:
                op = ("prod" if self._product else "min") if sync[k, a] else "sum"
                exprs.append((op, exprs[left[k]], exprs[right[k]]))
        return exprs

    def _leaf_scales(self, a: int) -> dict[int, list]:
        """Per leaf, the list of (parent expr, child expr) ratios on the path to the root."""
        left, right, node_leaf, sync = self._tree
        exprs = self._node_exprs(a)
        ratios = {len(left) - 1: []}
        scales = {}
        for k in range(len(left) - 1, -1, -1):
            if node_leaf[k] >= 0:
                scales[int(node_leaf[k])] = ratios[k]
                continue
            for child, sibling in ((left[k], right[k]), (right[k], left[k])):
                if sync[k, a]:
                    if self._product:
                        ratios[child] = ratios[k] + [("factor", exprs[sibling])]
                    else:
                        ratios[child] = ratios[k] + [("ratio", exprs[k], exprs[child])]
                else:
                    ratios[child] = ratios[k]
        return scales

    def polynomials(self) -> list[dict[tuple[tuple[int, int], ...], float]]:
        """Each F_i as {monomial: coefficient}; monomials are sorted (state, power) tuples.

        Only defined for product semantics, where the field is polynomial.
        """
        if not self._product:
            raise ValueError("the field is polynomial only under product semantics")
        scales = [self._leaf_scales(a) for a in range(len(self.actions))]
        polys = []
        for i in range(len(self.states)):
            poly: dict = {}
            for a, s, c in self._flows(i):
                term = {((s, 1),): c}
                for _, sibling in scales[a][int(self._state_leaf[s])]:
                    term = _pmul(term, _expr_poly(sibling))
                poly = _padd(poly, term)
            scale = max((abs(c) for c in poly.values()), default=0.0)
            polys.append({mono: c for mono, c in sorted(poly.items()) if abs(c) > 1e-14 * scale})
        return polys

    def equations(self) -> list[str]:
        """One line per state: ``d/dt V[state] = <expression>``."""
        lines = []
        if self._product:
            for name, poly in zip(self.names, self.polynomials()):
                lines.append(f"d/dt V[{name}] = {self._render_poly(poly)}")
            return lines
        scales = [self._leaf_scales(a) for a in range(len(self.actions))]
        for i, name in enumerate(self.names):
            parts = []
            for a, s, c in self._flows(i):
                text = f"{abs(c)!r}*V[{self.names[s]}]"
                for _, num, den in scales[a][int(self._state_leaf[s])]:
                    text += f" * {self._render(num)} / ({self._render(den)})"
                parts.append(("-" if c < 0 else "+", text))
            lines.append(f"d/dt V[{name}] = {_join_signed(parts)}")
        return lines

    def to_json(self) -> dict:
        scales = [self._leaf_scales(a) for a in range(len(self.actions))]
        eqs = []
        polys = self.polynomials() if self._product else None
        for i, name in enumerate(self.names):
            flows = []
            for a, s, c in self._flows(i):
                scale = [self._json_ratio(r) for r in scales[a][int(self._state_leaf[s])]]
                flows.append({"action": self.actions[a], "source": self.names[s], "coefficient": c, "scale": scale})
            eq = {"state": name, "flows": flows}
            if polys is not None:
                eq["polynomial"] = [
                    {"coefficient": c, "monomial": {self.names[v]: p for v, p in mono}}
                    for mono, c in polys[i].items()
                ]
            eqs.append(eq)
        return {"semantics": self.rho, "states": list(self.names), "actions": list(self.actions), "equations": eqs}

    def to_json_text(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    def _render(self, expr) -> str:
        op = expr[0]
        if op == "lin":
            return " + ".join(f"{c!r}*V[{self.names[i]}]" for c, i in expr[1]) or "0"
        if op == "min":
            return f"min({self._render(expr[1])}, {self._render(expr[2])})"
        if op == "prod":
            return f"({self._render(expr[1])}) * ({self._render(expr[2])})"
        return f"{self._render(expr[1])} + {self._render(expr[2])}"

    def _json_expr(self, expr):
        if expr[0] == "lin":
            return {"linear": [[c, self.names[i]] for c, i in expr[1]]}
        return {expr[0]: [self._json_expr(expr[1]), self._json_expr(expr[2])]}

    def _json_ratio(self, ratio):
        if ratio[0] == "factor":
            return {"factor": self._json_expr(ratio[1])}
        return {"numerator": self._json_expr(ratio[1]), "denominator": self._json_expr(ratio[2])}

    def _render_poly(self, poly) -> str:
        parts = []
        for mono, c in poly.items():
            factors = "*".join(f"V[{self.names[v]}]" + (f"^{p}" if p > 1 else "") for v, p in mono)
            text = f"{abs(c)!r}" + (f"*{factors}" if factors else "")
            parts.append(("-" if c < 0 else "+", text))
        return _join_signed(parts)


def _join_signed(parts) -> str:
    if not parts:
        return "0"
    first_sign, first = parts[0]
    out = ("-" if first_sign == "-" else "") + first
    for sign, text in parts[1:]:
        out += f" {sign} {text}"
    return out


def _padd(p, q):
    out = dict(p)
    for mono, c in q.items():
        out[mono] = out.get(mono, 0.0) + c
    return out


def _pmul(p, q):
    out: dict = {}
    for m1, c1 in p.items():
        for m2, c2 in q.items():
            powers = Counter(dict(m1))
            powers.update(dict(m2))
            mono = tuple(sorted(powers.items()))
            out[mono] = out.get(mono, 0.0) + c1 * c2
    return out


def _expr_poly(expr):
    op = expr[0]
    if op == "lin":
        return {((i, 1),): c for c, i in expr[1]}
    if op == "prod":
        return _pmul(_expr_poly(expr[1]), _expr_poly(expr[2]))
    if op == "sum":
        return _padd(_expr_poly(expr[1]), _expr_poly(expr[2]))
    raise ValueError("min terms are not polynomial")


@functools.lru_cache(maxsize=128)
def vector_field(model: FepaModel) -> VectorField:
    return VectorField(model)
