"""KGQ: a small graph query language over the live indexes.

    query     := "MATCH" chain ("," chain)* ("WHERE" cond ("AND" cond)*)? "RETURN" proj ("," proj)* ("LIMIT" int)?
    chain     := node (edge node)*
    node      := "(" var (":" type)? ")"
    edge      := "-[" pred ("*" int)? "]->" | "<-[" pred ("*" int)? "]-"
    pred      := name ("." name)?            composite edges use "predicate.relationship_predicate"
    cond      := var "." path cmp literal | "SEARCH(" var "," string ")" | "ID(" var "," string ")"
                 | Operator "(" arg ("," arg)* ")"
    proj      := var ("." path)?
    path      := name ("." name)?

``*n`` walks 1..n hops of the same predicate. The hop total of each chain is
bounded by ``max_depth``. Virtual operators are named fragments (MATCH chains
plus conditions) that expand in place of a call.
"""
from __future__ import annotations

import itertools
import json
import operator
import re
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace
from typing import Optional, Protocol, Union

from kgplatform.core import KgError

MAX_DEPTH = 3
KEYWORDS = {"MATCH", "WHERE", "AND", "RETURN", "LIMIT"}
BUILTINS = {"SEARCH", "ID"}
CMP_OPS = ("=", "!=", "<", "<=", ">", ">=")


class KgqError(KgError):
    pass


class KgqSyntaxError(KgqError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class UnboundVariable(KgqError):
    pass


class DepthExceeded(KgqError):
    pass


class UnknownOperator(KgqError):
    pass


class RecursiveExpansion(KgqError):
    pass


# -- AST -----------------------------------------------------------------------------

Literal = Union[str, int, float]


@dataclass(frozen=True)
class Node:
    var: str
    type: Optional[str] = None


@dataclass(frozen=True)
class Edge:
    pred: str
    hops: int = 1
    reverse: bool = False


@dataclass(frozen=True)
class Chain:
    nodes: tuple[Node, ...]
    edges: tuple[Edge, ...] = ()

    @property
    def depth(self) -> int:
        return sum(e.hops for e in self.edges)

    def triples(self):
        for i, e in enumerate(self.edges):
            yield self.nodes[i].var, e, self.nodes[i + 1].var


@dataclass(frozen=True)
class Compare:
    var: str
    path: tuple[str, ...]
    op: str
    value: Literal


@dataclass(frozen=True)
class Search:
    var: str
    text: str


@dataclass(frozen=True)
class IdIs:
    var: str
    entity: str


@dataclass(frozen=True)
class Lit:
    value: Literal


@dataclass(frozen=True)
class OpCall:
    name: str
    args: tuple[Union[str, Lit], ...]


Cond = Union[Compare, Search, IdIs, OpCall]


@dataclass(frozen=True)
class Projection:
    var: str
    path: tuple[str, ...] = ()


@dataclass(frozen=True)
class Query:
    chains: tuple[Chain, ...]
    conds: tuple[Cond, ...] = ()
    returns: tuple[Projection, ...] = ()
    limit: Optional[int] = None

    @property
    def variables(self) -> list[str]:
        seen: dict[str, None] = {}
        for c in self.chains:
            for n in c.nodes:
                seen.setdefault(n.var)
        return list(seen)

    @property
    def has_virtual_ops(self) -> bool:
        return any(isinstance(c, OpCall) for c in self.conds)


# -- lexer / parser --------------------------------------------------------------------

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<larrow><-\[)
  | (?P<ledge>-\[)
  | (?P<rarrow>\]->)
  | (?P<redge>\]-)
  | (?P<cmp><=|>=|!=|=|<|>)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<number>-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[(),:.*])
""", re.VERBOSE)


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _lex(text: str) -> list[_Tok]:
    out, pos = [], 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise KgqSyntaxError(f"unexpected character {text[pos]!r}", pos)
        if m.lastgroup != "ws":
            kind = m.lastgroup
            if kind == "punct":
                kind = m.group()
            out.append(_Tok(kind, m.group(), pos))
        pos = m.end()
    out.append(_Tok("eof", "", len(text)))
    return out


class _Parser:
    def __init__(self, text: str):
        self.toks = _lex(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def peek(self, k: int = 1) -> _Tok:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def fail(self, expected: str):
        raise KgqSyntaxError(f"expected {expected}, found {self.tok.text or 'end of input'!r}", self.tok.pos)

    def eat(self, kind: str, what: Optional[str] = None) -> _Tok:
        if self.tok.kind != kind:
            self.fail(what or kind)
        t = self.tok
        self.i += 1
        return t

    def keyword(self, word: str) -> bool:
        if self.tok.kind == "name" and self.tok.text.upper() == word:
            self.i += 1
            return True
        return False

    def expect_keyword(self, word: str) -> None:
        if not self.keyword(word):
            self.fail(word)

    def var(self) -> str:
        t = self.eat("name", "variable")
        if t.text.upper() in KEYWORDS:
            raise KgqSyntaxError(f"keyword {t.text!r} used as a variable", t.pos)
        return t.text

    def dotted(self) -> tuple[str, ...]:
        parts = [self.eat("name", "predicate").text]
        if self.tok.kind == ".":
            self.i += 1
            parts.append(self.eat("name", "predicate").text)
        return tuple(parts)

    def integer(self) -> int:
        t = self.eat("number", "integer")
        if not re.fullmatch(r"\d+", t.text):
            raise KgqSyntaxError("expected a non-negative integer", t.pos)
        return int(t.text)

    def literal(self) -> Literal:
        if self.tok.kind == "string":
            return json.loads(self.eat("string").text)
        if self.tok.kind == "number":
            text = self.eat("number").text
            return int(text) if re.fullmatch(r"-?\d+", text) else float(text)
        self.fail("literal")

    def node(self) -> Node:
        self.eat("(", "'('")
        v = self.var()
        t = None
        if self.tok.kind == ":":
            self.i += 1
            t = self.eat("name", "type").text
        self.eat(")", "')'")
        return Node(v, t)

    def edge(self) -> Optional[Edge]:
        if self.tok.kind not in ("ledge", "larrow"):
            return None
        reverse = self.eat(self.tok.kind).kind == "larrow"
        pred = ".".join(self.dotted())
        hops = 1
        if self.tok.kind == "*":
            self.i += 1
            pos = self.tok.pos
            hops = self.integer()
            if hops < 1:
                raise KgqSyntaxError("hop bound must be >= 1", pos)
        self.eat("redge" if reverse else "rarrow", "']-'" if reverse else "']->'")
        return Edge(pred, hops, reverse)

    def chain(self) -> Chain:
        nodes, edges = [self.node()], []
        while (e := self.edge()) is not None:
            edges.append(e)
            nodes.append(self.node())
        return Chain(tuple(nodes), tuple(edges))

    def cond(self) -> Cond:
        name = self.eat("name", "condition")
        if self.tok.kind == "(":
            self.i += 1
            if name.text.upper() in BUILTINS:
                v = self.var()
                self.eat(",", "','")
                s = self.eat("string", "string")
                self.eat(")", "')'")
                text = json.loads(s.text)
                return Search(v, text) if name.text.upper() == "SEARCH" else IdIs(v, text)
            args = [self.op_arg()]
            while self.tok.kind == ",":
                self.i += 1
                args.append(self.op_arg())
            self.eat(")", "')'")
            return OpCall(name.text, tuple(args))
        if name.text.upper() in KEYWORDS:
            raise KgqSyntaxError(f"keyword {name.text!r} used as a variable", name.pos)
        self.eat(".", "'.'")
        path = self.dotted()
        op = self.eat("cmp", "comparison").text
        return Compare(name.text, path, op, self.literal())

    def op_arg(self) -> Union[str, Lit]:
        if self.tok.kind in ("string", "number"):
            return Lit(self.literal())
        return self.var()

    def projection(self) -> Projection:
        v = self.var()
        if self.tok.kind == ".":
            self.i += 1
            return Projection(v, self.dotted())
        return Projection(v)

    def chains(self) -> tuple[Chain, ...]:
        self.expect_keyword("MATCH")
        out = [self.chain()]
        while self.tok.kind == ",":
            self.i += 1
            out.append(self.chain())
        return tuple(out)

    def conds(self) -> tuple[Cond, ...]:
        if not self.keyword("WHERE"):
            return ()
        out = [self.cond()]
        while self.keyword("AND"):
            out.append(self.cond())
        return tuple(out)

    def query(self) -> Query:
        chains = self.chains()
        conds = self.conds()
        self.expect_keyword("RETURN")
        rets = [self.projection()]
        while self.tok.kind == ",":
            self.i += 1
            rets.append(self.projection())
        limit = self.integer() if self.keyword("LIMIT") else None
        self.eat("eof", "end of input")
        return Query(chains, conds, tuple(rets), limit)

    def fragment(self) -> Query:
        chains = self.chains()
        conds = self.conds()
        self.eat("eof", "end of input")
        return Query(chains, conds)


def _cond_vars(c: Cond) -> list[str]:
    if isinstance(c, OpCall):
        return [a for a in c.args if isinstance(a, str)]
    return [c.var]


def validate(q: Query, max_depth: int = MAX_DEPTH, params: Iterable[str] = ()) -> Query:
    bound = set(q.variables) | set(params)
    for c in q.conds:
        for v in _cond_vars(c):
            if v not in bound:
                raise UnboundVariable(v)
    for p in q.returns:
        if p.var not in bound:
            raise UnboundVariable(p.var)
    for ch in q.chains:
        if ch.depth > max_depth:
            raise DepthExceeded(f"chain depth {ch.depth} > {max_depth}")
    return q


def parse_kgq(text: str, max_depth: int = MAX_DEPTH) -> Query:
    return validate(_Parser(text).query(), max_depth)


def parse_fragment(text: str, max_depth: int = MAX_DEPTH, params: Iterable[str] = ()) -> Query:
    """MATCH chains plus optional WHERE; ``params`` count as bound."""
    return validate(_Parser(text).fragment(), max_depth, params)


# -- printer -----------------------------------------------------------------------

def _lit(v: Literal) -> str:
    return json.dumps(v, ensure_ascii=False) if isinstance(v, str) else repr(v)


def _print_edge(e: Edge) -> str:
    hops = f"*{e.hops}" if e.hops != 1 else ""
    return f"<-[{e.pred}{hops}]-" if e.reverse else f"-[{e.pred}{hops}]->"


def _print_node(n: Node) -> str:
    return f"({n.var}:{n.type})" if n.type else f"({n.var})"


def _print_chain(c: Chain) -> str:
    out = _print_node(c.nodes[0])
    for e, n in zip(c.edges, c.nodes[1:]):
        out += _print_edge(e) + _print_node(n)
    return out


def _print_cond(c: Cond) -> str:
    if isinstance(c, Search):
        return f"SEARCH({c.var}, {_lit(c.text)})"
    if isinstance(c, IdIs):
        return f"ID({c.var}, {_lit(c.entity)})"
    if isinstance(c, OpCall):
        args = ", ".join(_lit(a.value) if isinstance(a, Lit) else a for a in c.args)
        return f"{c.name}({args})"
    return f"{c.var}.{'.'.join(c.path)} {c.op} {_lit(c.value)}"


def print_kgq(q: Query) -> str:
    parts = ["MATCH " + ", ".join(_print_chain(c) for c in q.chains)]
    if q.conds:
        parts.append("WHERE " + " AND ".join(_print_cond(c) for c in q.conds))
    if q.returns:
        parts.append("RETURN " + ", ".join(p.var + ("." + ".".join(p.path) if p.path else "") for p in q.returns))
    if q.limit is not None:
        parts.append(f"LIMIT {q.limit}")
    return " ".join(parts)


# -- virtual operators -------------------------------------------------------------

@dataclass(frozen=True)
class VirtualOperator:
    name: str
    params: tuple[str, ...]
    fragment: str

    def parsed(self, max_depth: int = MAX_DEPTH) -> Query:
        q = parse_fragment(self.fragment, max_depth, self.params)
        missing = set(self.params) - set(q.variables) - {v for c in q.conds for v in _cond_vars(c)}
        if missing:
            raise KgqError(f"{self.name}: parameters {sorted(missing)} not in fragment")
        return q


def _rename_cond(c: Cond, f) -> Cond:
    if isinstance(c, OpCall):
        return OpCall(c.name, tuple(a if isinstance(a, Lit) else f(a) for a in c.args))
    return replace(c, var=f(c.var))


def _rename_chain(c: Chain, f) -> Chain:
    return Chain(tuple(Node(f(n.var), n.type) for n in c.nodes), c.edges)


def expand_virtual_ops(q: Query, registry: Optional[Mapping[str, VirtualOperator]] = None,
                       max_depth: int = MAX_DEPTH) -> Query:
    """Replace operator calls with their fragments; fragment-local variables get fresh names."""
    if not q.has_virtual_ops:
        return q
    registry = registry or {}
    counter = itertools.count()
    chains, conds = list(q.chains), []

    def visit(c: Cond, stack: tuple[str, ...]):
        if not isinstance(c, OpCall):
            conds.append(c)
            return
        if c.name not in registry:
            raise UnknownOperator(c.name)
        if c.name in stack:
            raise RecursiveExpansion(" -> ".join(stack + (c.name,)))
        op = registry[c.name]
        if len(c.args) != len(op.params):
            raise KgqError(f"{c.name} takes {len(op.params)} arguments, got {len(c.args)}")
        if any(isinstance(a, Lit) for a in c.args):
            raise KgqError(f"{c.name}: operator arguments must be variables")
        frag = op.parsed(max_depth)
        k = next(counter)
        binding = dict(zip(op.params, c.args))
        f = lambda v: binding.get(v, f"_{c.name.lower()}{k}_{v}")
        chains.extend(_rename_chain(ch, f) for ch in frag.chains)
        for fc in frag.conds:
            visit(_rename_cond(fc, f), stack + (c.name,))

    for c in q.conds:
        visit(c, ())
    return validate(Query(tuple(chains), tuple(conds), q.returns, q.limit), max_depth)


# -- execution -----------------------------------------------------------------------

class GraphAccess(Protocol):
    def entities(self) -> list[str]: ...
    def search(self, text: str) -> set[str]: ...
    def has_entity(self, e: str) -> bool: ...
    def types(self, e: str) -> set[str]: ...
    def neighbors(self, e: str, pred: str, reverse: bool = False) -> set[str]: ...
    def values(self, e: str, path: tuple[str, ...]) -> list[str]: ...


_ORDER = {"<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge, "=": operator.eq}


def compare_values(values: Iterable[str], op: str, lit: Literal) -> bool:
    """Existential over values; "!=" holds when no value equals the literal.
    Numeric literals compare numerically against values that parse as numbers."""
    def test(v: str, o: str) -> bool:
        if isinstance(lit, str):
            return _ORDER[o](v, lit)
        try:
            return _ORDER[o](float(v), float(lit))
        except ValueError:
            return False

    if op == "!=":
        return not any(test(v, "=") for v in values)
    return any(test(v, op) for v in values)


def reach(g: GraphAccess, start: str, edge: Edge) -> set[str]:
    """Nodes reachable by 1..hops steps along ``edge``."""
    out, frontier = set(), {start}
    for _ in range(edge.hops):
        frontier = set().union(*(g.neighbors(e, edge.pred, edge.reverse) for e in frontier)) if frontier else set()
        frontier -= out
        out |= frontier
        if not frontier:
            break
    return out


@dataclass
class QueryPlan:
    steps: list[tuple] = field(default_factory=list)

    def describe(self) -> list[str]:
        return [" ".join(str(x) for x in s) for s in self.steps]


def plan_query(q: Query) -> QueryPlan:
    """Greedy plan: bind the most constrained variable first (search/id push-down),
    then follow edges out of bound variables."""
    seeded = {c.var for c in q.conds if isinstance(c, (Search, IdIs))}
    edges = [(u, e, v) for ch in q.chains for (u, e, v) in ch.triples()]
    bound: set[str] = set()
    plan = QueryPlan()
    order = q.variables
    while len(bound) < len(order):
        progress = True
        while progress:
            progress = False
            for i, (u, e, v) in enumerate(edges):
                if u in bound or v in bound:
                    if u in bound and v in bound:
                        plan.steps.append(("check", u, e, v))
                    elif u in bound:
                        plan.steps.append(("expand", u, e, v))
                        bound.add(v)
                    else:
                        plan.steps.append(("expand", v, Edge(e.pred, e.hops, not e.reverse), u))
                        bound.add(u)
                    edges.pop(i)
                    progress = True
                    break
        rest = [x for x in order if x not in bound]
        if rest:
            start = next((x for x in rest if x in seeded), rest[0])
            plan.steps.append(("scan", start))
            bound.add(start)
    for u, e, v in edges:
        plan.steps.append(("check", u, e, v))
    return plan


def execute_query(q: Query, g: GraphAccess, registry: Optional[Mapping[str, VirtualOperator]] = None,
                  max_depth: int = MAX_DEPTH) -> list[tuple[str, ...]]:
    """Distinct result rows sorted ascending; LIMIT applies after sorting."""
    q = expand_virtual_ops(q, registry, max_depth)
    types: dict[str, set] = {}
    for ch in q.chains:
        for n in ch.nodes:
            if n.type:
                types.setdefault(n.var, set()).add(n.type)
    domain: dict[str, set] = {}
    compares: dict[str, list[Compare]] = {}
    for c in q.conds:
        if isinstance(c, Search):
            hits = g.search(c.text)
        elif isinstance(c, IdIs):
            hits = {c.entity} if g.has_entity(c.entity) else set()
        else:
            compares.setdefault(c.var, []).append(c)
            continue
        domain[c.var] = domain[c.var] & hits if c.var in domain else hits

    def admissible(var: str, e: str) -> bool:
        if var in domain and e not in domain[var]:
            return False
        if var in types and not types[var] <= g.types(e):
            return False
        return all(compare_values(g.values(e, c.path), c.op, c.value) for c in compares.get(var, ()))

    bindings: list[dict] = [{}]
    for step in plan_query(q).steps:
        nxt = []
        if step[0] == "scan":
            var = step[1]
            pool = sorted(domain[var]) if var in domain else g.entities()
            pool = [e for e in pool if admissible(var, e)]
            nxt = [dict(b, **{var: e}) for b in bindings for e in pool]
        elif step[0] == "expand":
            _, u, e, v = step
            cache: dict[str, list] = {}
            for b in bindings:
                src = b[u]
                if src not in cache:
                    cache[src] = [x for x in sorted(reach(g, src, e)) if admissible(v, x)]
                nxt.extend(dict(b, **{v: x}) for x in cache[src])
        else:
            _, u, e, v = step
            nxt = [b for b in bindings if b[v] in reach(g, b[u], e)]
        bindings = nxt
        if not bindings:
            return []
    rows: set[tuple[str, ...]] = set()
    for b in bindings:
        cols = [[b[p.var]] if not p.path else g.values(b[p.var], p.path) for p in q.returns]
        rows.update(itertools.product(*cols))
    out = sorted(rows)
    return out if q.limit is None else out[:q.limit]
