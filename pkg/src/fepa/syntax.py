"""Abstract syntax, concrete-syntax parser and printer for FEPA models.

A model file looks like::

    # two replicated clients sharing a server
    P1 = (alpha, 1.0).P1';
    P1' = (beta, 0.5).P1;
    Q = (alpha, 1.0).Q';
    Q' = (gamma, 15.0).Q;
    system = P1 <alpha> Q;
    init P1 = 200;
    init Q = 400;
    semantics = product;

Prefix binds tighter than choice, so ``(a, 1.0).P + Q`` is a choice between
``(a, 1.0).P`` and ``Q``.  ``<>`` is the empty cooperation set and
composition is left-associative.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence, Union

MIN = "min"
PRODUCT = "product"
SEMANTICS = (MIN, PRODUCT)


class ModelError(ValueError):
    """A model is malformed.  Carries an optional source location."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"line {line}, column {column}: {message}"
        super().__init__(message)


class ParseError(ModelError):
    pass


# --------------------------------------------------------------------------
# sequential terms


@dataclass(frozen=True)
class Prefix:
    action: str
    rate: float
    continuation: "Term"


@dataclass(frozen=True)
class Choice:
    left: "Term"
    right: "Term"


@dataclass(frozen=True)
class Const:
    name: str


Term = Union[Prefix, Choice, Const]


@dataclass(frozen=True)
class AtomDefinition:
    name: str
    body: Term


# --------------------------------------------------------------------------
# composition


@dataclass(frozen=True)
class Leaf:
    atom: str


@dataclass(frozen=True)
class Par:
    left: "Composition"
    right: "Composition"
    sync: frozenset = frozenset()


Composition = Union[Leaf, Par]


def leaves(comp: Composition) -> list[str]:
    """Atom names of ``comp`` from left to right."""
    if isinstance(comp, Leaf):
        return [comp.atom]
    return leaves(comp.left) + leaves(comp.right)


@dataclass(frozen=True)
class FepaModel:
    definitions: tuple[AtomDefinition, ...]
    system: Composition
    rho: str = MIN
    init: tuple[tuple[str, float], ...] = ()
    positions: Mapping[str, tuple[int, int]] = field(
        default_factory=dict, compare=False, hash=False, repr=False
    )

    def __post_init__(self):
        if self.rho not in SEMANTICS:
            raise ModelError(f"unknown synchronisation semantics {self.rho!r}")

    @property
    def environment(self) -> dict[str, Term]:
        return {d.name: d.body for d in self.definitions}

    @property
    def atoms(self) -> list[str]:
        return leaves(self.system)

    @property
    def actions(self) -> list[str]:
        """Every action label used in a prefix or a cooperation set, sorted."""
        found: set[str] = set()
        for d in self.definitions:
            found.update(_actions(d.body))
        found.update(_sync_actions(self.system))
        return sorted(found)

    @property
    def initial_populations(self) -> dict[str, float]:
        return dict(self.init)

    @property
    def rate_vector(self) -> tuple[float, ...]:
        """The rate occurrences nu(M): definitions by name, prefixes in source order."""
        return tuple(rate for _, _, rate in rate_occurrences(self))

    def replace(self, **changes) -> "FepaModel":
        values = dict(
            definitions=self.definitions,
            system=self.system,
            rho=self.rho,
            init=self.init,
            positions=self.positions,
        )
        values.update(changes)
        if isinstance(values["init"], Mapping):
            values["init"] = tuple(values["init"].items())
        return FepaModel(**values)


def _actions(term: Term) -> Iterator[str]:
    if isinstance(term, Prefix):
        yield term.action
        yield from _actions(term.continuation)
    elif isinstance(term, Choice):
        yield from _actions(term.left)
        yield from _actions(term.right)


def _sync_actions(comp: Composition) -> set[str]:
    if isinstance(comp, Leaf):
        return set()
    return set(comp.sync) | _sync_actions(comp.left) | _sync_actions(comp.right)


def _prefix_rates(term: Term) -> Iterator[float]:
    if isinstance(term, Prefix):
        yield term.rate
        yield from _prefix_rates(term.continuation)
    elif isinstance(term, Choice):
        yield from _prefix_rates(term.left)
        yield from _prefix_rates(term.right)


def rate_occurrences(model: FepaModel) -> list[tuple[str, int, float]]:
    """``(definition name, position in that body, rate)`` in nu(M) order."""
    out = []
    for d in sorted(model.definitions, key=lambda d: d.name):
        for pos, rate in enumerate(_prefix_rates(d.body)):
            out.append((d.name, pos, rate))
    return out


def _substitute(term: Term, rates: Iterator[float]) -> Term:
    if isinstance(term, Prefix):
        rate = next(rates)
        return Prefix(term.action, rate, _substitute(term.continuation, rates))
    if isinstance(term, Choice):
        left = _substitute(term.left, rates)
        return Choice(left, _substitute(term.right, rates))
    return term


def apply_rates(model: FepaModel, xi: Sequence[float]) -> FepaModel:
    """Return M(xi): the model with its i-th rate occurrence replaced by xi[i]."""
    xi = [float(x) for x in xi]
    n = len(rate_occurrences(model))
    if len(xi) != n:
        raise ValueError(f"rate vector has length {len(xi)}, model has {n} rate occurrences")
    if any(not x > 0 for x in xi):
        raise ValueError("rates must be positive")
    it = iter(xi)
    new_bodies = {}
    for d in sorted(model.definitions, key=lambda d: d.name):
        new_bodies[d.name] = _substitute(d.body, it)
    defs = tuple(AtomDefinition(d.name, new_bodies[d.name]) for d in model.definitions)
    return model.replace(definitions=defs)


# --------------------------------------------------------------------------
# printing


def format_term(term: Term) -> str:
    if isinstance(term, Const):
        return term.name
    if isinstance(term, Prefix):
        return f"({term.action}, {term.rate!r}).{_format_operand(term.continuation)}"
    right = format_term(term.right)
    if isinstance(term.right, Choice):
        right = f"({right})"
    return f"{format_term(term.left)} + {right}"


def _format_operand(term: Term) -> str:
    text = format_term(term)
    return f"({text})" if isinstance(term, Choice) else text


def format_composition(comp: Composition) -> str:
    if isinstance(comp, Leaf):
        return comp.atom
    right = format_composition(comp.right)
    if isinstance(comp.right, Par):
        right = f"({right})"
    return f"{format_composition(comp.left)} <{','.join(sorted(comp.sync))}> {right}"


def format_model(model: FepaModel) -> str:
    lines = [f"{d.name} = {format_term(d.body)};" for d in model.definitions]
    lines.append(f"system = {format_composition(model.system)};")
    lines.extend(f"init {name} = {value!r};" for name, value in model.init)
    lines.append(f"semantics = {model.rho};")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# parsing

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<number>-?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_']*)
  | (?P<sym>[=;+(),.<>])
    """,
    re.VERBOSE,
)


@dataclass
class _Token:
    kind: str
    text: str
    line: int
    column: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            tokens.append(_Token(kind, m.group(), line, m.start() - line_start + 1))
        pos = m.end()
    tokens.append(_Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def peek(self, k: int = 1) -> _Token:
        return self.tokens[min(self.i + k, len(self.tokens) - 1)]

    def error(self, message: str, tok: _Token | None = None) -> ParseError:
        tok = tok or self.tok
        found = tok.text or "end of input"
        return ParseError(f"{message}, found {found!r}", tok.line, tok.column)

    def expect(self, text: str) -> _Token:
        if self.tok.text != text:
            raise self.error(f"expected {text!r}")
        return self.advance()

    def expect_kind(self, kind: str, what: str) -> _Token:
        if self.tok.kind != kind:
            raise self.error(f"expected {what}")
        return self.advance()

    def advance(self) -> _Token:
        tok = self.tok
        self.i += 1
        return tok

    def seq(self) -> Term:
        term = self.seq_operand()
        while self.tok.text == "+":
            self.advance()
            term = Choice(term, self.seq_operand())
        return term

    def seq_operand(self) -> Term:
        tok = self.tok
        if tok.kind == "ident":
            self.advance()
            self.refs.append(tok)
            return Const(tok.text)
        if tok.text == "(":
            if self.peek().kind == "ident" and self.peek(2).text == ",":
                return self.prefix()
            self.advance()
            term = self.seq()
            self.expect(")")
            return term
        raise self.error("expected a prefix, a constant or '('")

    def prefix(self) -> Prefix:
        self.expect("(")
        action = self.expect_kind("ident", "an action name").text
        self.expect(",")
        rate_tok = self.expect_kind("number", "a rate")
        rate = float(rate_tok.text)
        if not rate > 0:
            raise ParseError(f"rate must be positive, got {rate_tok.text}", rate_tok.line, rate_tok.column)
        self.expect(")")
        self.expect(".")
        return Prefix(action, rate, self.seq_operand())

    def comp(self) -> Composition:
        comp = self.comp_operand()
        while self.tok.text == "<":
            self.advance()
            sync = set()
            if self.tok.text != ">":
                sync.add(self.expect_kind("ident", "an action name").text)
                while self.tok.text == ",":
                    self.advance()
                    sync.add(self.expect_kind("ident", "an action name").text)
            self.expect(">")
            comp = Par(comp, self.comp_operand(), frozenset(sync))
        return comp

    def comp_operand(self) -> Composition:
        tok = self.tok
        if tok.kind == "ident":
            self.advance()
            self.leaf_refs.append(tok)
            return Leaf(tok.text)
        if tok.text == "(":
            self.advance()
            comp = self.comp()
            self.expect(")")
            return comp
        raise self.error("expected an atom name or '('")

    def model(self, rho: str | None) -> FepaModel:
        self.refs: list[_Token] = []
        self.leaf_refs: list[_Token] = []
        definitions: list[AtomDefinition] = []
        positions: dict[str, tuple[int, int]] = {}
        system = None
        semantics = None
        init: dict[str, float] = {}
        while self.tok.kind != "eof":
            tok = self.tok
            if tok.text == "system" and self.peek().text == "=":
                if system is not None:
                    raise self.error("duplicate system declaration")
                self.advance()
                self.advance()
                system = self.comp()
                positions["system"] = (tok.line, tok.column)
            elif tok.text == "semantics" and self.peek().text == "=":
                self.advance()
                self.advance()
                sem = self.expect_kind("ident", "'min' or 'product'")
                if sem.text not in SEMANTICS:
                    raise self.error("expected 'min' or 'product'", sem)
                semantics = sem.text
            elif tok.text == "init" and self.peek().kind == "ident":
                self.advance()
                name = self.advance().text
                self.expect("=")
                val_tok = self.expect_kind("number", "a population")
                value = float(val_tok.text)
                if value < 0:
                    raise ParseError("initial population must be nonnegative", val_tok.line, val_tok.column)
                if name in init:
                    raise ParseError(f"duplicate init for {name}", tok.line, tok.column)
                init[name] = value
            else:
                name = self.expect_kind("ident", "a definition").text
                if name in positions:
                    raise ParseError(f"duplicate definition of {name}", tok.line, tok.column)
                self.expect("=")
                definitions.append(AtomDefinition(name, self.seq()))
                positions[name] = (tok.line, tok.column)
            self.expect(";")
        if system is None:
            raise ParseError("missing 'system = ...;' declaration", self.tok.line, self.tok.column)
        defined = {d.name for d in definitions}
        for ref in self.refs + self.leaf_refs:
            if ref.text not in defined:
                raise ParseError(f"undefined constant {ref.text}", ref.line, ref.column)
        if rho is None:
            rho = semantics or MIN
        return FepaModel(tuple(definitions), system, rho, tuple(init.items()), positions)


def parse_model(text: str, rho: str | None = None) -> FepaModel:
    """Parse a model file.  ``rho`` overrides any ``semantics`` line."""
    return _Parser(text).model(rho)


def load_model(path, rho: str | None = None) -> FepaModel:
    with open(path, encoding="utf-8") as fh:
        return parse_model(fh.read(), rho)


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" or "warning"
    code: str
    message: str
    line: int | None = None
    column: int | None = None

    def __str__(self):
        where = f"{self.line}:{self.column}: " if self.line is not None else ""
        return f"{where}{self.severity}: {self.message} [{self.code}]"


def _const_refs(term: Term) -> Iterator[str]:
    if isinstance(term, Const):
        yield term.name
    elif isinstance(term, Prefix):
        yield from _const_refs(term.continuation)
    else:
        yield from _const_refs(term.left)
        yield from _const_refs(term.right)


def _par_nodes(comp: Composition) -> Iterator[Par]:
    if isinstance(comp, Par):
        yield comp
        yield from _par_nodes(comp.left)
        yield from _par_nodes(comp.right)


def validate(model: FepaModel) -> list[Diagnostic]:
    """Structural checks plus the well-posedness warning.

    Errors: undefined constants, nonpositive rates, unguarded recursion,
    overlapping derivative sets, populations for unknown states.  Warnings:
    ill-posed cooperations, where an operand can never perform a synchronised
    action.
    """
    from .semantics import can_perform, derivation_graph

    diags: list[Diagnostic] = []
    env = model.environment
    pos = model.positions

    def at(name):
        return pos.get(name, (None, None))

    for d in model.definitions:
        for ref in _const_refs(d.body):
            if ref not in env:
                diags.append(Diagnostic("error", "undefined-constant", f"{d.name} refers to undefined constant {ref}", *at(d.name)))
        if any(not r > 0 for r in _prefix_rates(d.body)):
            diags.append(Diagnostic("error", "nonpositive-rate", f"{d.name} has a nonpositive rate", *at(d.name)))
    for atom in model.atoms:
        if atom not in env:
            diags.append(Diagnostic("error", "undefined-constant", f"system refers to undefined atom {atom}", *at("system")))
    if any(d.severity == "error" for d in diags):
        return diags

    from .semantics import _moves

    for d in model.definitions:
        try:
            _moves(Const(d.name), env)
        except ModelError as exc:
            diags.append(Diagnostic("error", "unguarded-recursion", f"{d.name}: {exc}", *at(d.name)))
    if any(d.severity == "error" for d in diags):
        return diags

    graphs = {}
    owner: dict = {}
    for atom in model.atoms:
        if atom in graphs:
            diags.append(Diagnostic("error", "derivative-overlap", f"atom {atom} occurs more than once in the system", *at("system")))
            continue
        graphs[atom] = derivation_graph(atom, env)
        for s in graphs[atom].states:
            if s in owner and owner[s] != atom:
                diags.append(Diagnostic(
                    "error", "derivative-overlap",
                    f"atoms {owner[s]} and {atom} share the derivative {graphs[atom].names[graphs[atom].index[s]]}",
                    *at(atom),
                ))
            owner.setdefault(s, atom)

    known = {name for g in graphs.values() for name in g.names}
    for name, value in model.init:
        if name not in known:
            diags.append(Diagnostic("error", "unknown-state", f"init refers to {name}, which is not a derivative of any atom"))
        if value < 0:
            diags.append(Diagnostic("error", "negative-population", f"init {name} is negative"))

    for node in _par_nodes(model.system):
        for alpha in sorted(node.sync):
            for side, operand in (("left", node.left), ("right", node.right)):
                if not can_perform(operand, alpha, env):
                    diags.append(Diagnostic(
                        "warning", "ill-posed",
                        f"ill-posed cooperation {format_composition(node)}: {side} operand "
                        f"{format_composition(operand)} never performs {alpha}",
                        *at("system"),
                    ))
    return diags


def is_well_posed(model: FepaModel) -> bool:
    return not any(d.code == "ill-posed" for d in validate(model))
