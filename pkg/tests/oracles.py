"""Independent brute-force references shared by module tests and the acceptance suite."""
import itertools
import random

import numpy as np

from kgplatform.core import EntityId
from kgplatform.embed import batch_loss_and_grads
from kgplatform.link import LinkageGraph


def set_partitions(items):
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [part[i] | {first}] + part[i + 1:]
        yield part + [{first}]


def partition_cost(edges, partition):
    label = {n: i for i, block in enumerate(partition) for n in block}
    return sum((s > 0) != (label[a] == label[b]) for (a, b), s in edges.items())


def optimum_disagreement(g: LinkageGraph):
    return min(partition_cost(g.edges, p) for p in set_partitions(sorted(g.nodes, key=str)))


def node_ids(n, graph=0):
    """``graph`` leading nodes are akg entities, the rest source entities."""
    return [EntityId("akg", f"g{i}") if i < graph else EntityId("src", f"s{i}") for i in range(n)]


def random_signed_graph(rng: random.Random, n, graph=0, p_edge=0.7):
    nodes = node_ids(n, graph)
    edges, weights = {}, {}
    for a, b in itertools.combinations(nodes, 2):
        if rng.random() < p_edge:
            key = (a, b) if str(a) < str(b) else (b, a)
            sign = rng.choice((1, -1))
            edges[key] = sign
            weights[key] = rng.uniform(0.9, 1.0) if sign > 0 else rng.uniform(0.0, 0.1)
    return LinkageGraph(frozenset(nodes), edges, weights)


def consistent_signed_graph(rng: random.Random, n, complete=True):
    """Plant a partition, then label every (or some) pair by membership."""
    nodes = node_ids(n)
    labels = {v: rng.randrange(n) for v in nodes}
    edges = {}
    for a, b in itertools.combinations(nodes, 2):
        if complete or rng.random() < 0.6:
            key = (a, b) if str(a) < str(b) else (b, a)
            edges[key] = 1 if labels[a] == labels[b] else -1
    return LinkageGraph(frozenset(nodes), edges, {k: 0.95 if s > 0 else 0.05 for k, s in edges.items()})


def google_matrix(n, edges, damping):
    """Dense column-stochastic transition with dangling columns spread uniformly."""
    A = np.zeros((n, n))
    for s, d in edges:
        A[d, s] += 1.0
    col = A.sum(axis=0)
    for j in range(n):
        A[:, j] = A[:, j] / col[j] if col[j] else 1.0 / n
    return damping * A + (1.0 - damping) / n


def pagerank_power_oracle(n, edges, damping=0.85, iters=5000):
    G = google_matrix(n, edges, damping)
    p = np.full(n, 1.0 / n)
    for _ in range(iters):
        p = G @ p
    return p / p.sum()


def pagerank_exact(n, edges, damping=0.85):
    """Stationary vector by solving (G - I) p = 0 with sum(p) = 1."""
    G = google_matrix(n, edges, damping)
    M = np.vstack([G - np.eye(n), np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    return np.linalg.lstsq(M, b, rcond=None)[0]


# -- naive KGQ evaluator ------------------------------------------------------------

def _naive_values(triples, e, path):
    out = set()
    for t in triples:
        if str(t.subject) != e:
            continue
        if len(path) == 1:
            if t.predicate == path[0] and t.r_id is None:
                out.add(str(t.object))
        else:
            if t.predicate == path[0] and t.r_predicate == path[1]:
                out.add(str(t.object))
            if t.predicate == path[0] and t.r_id is None and t.object_kind.value == "entity_ref":
                out |= _naive_values(triples, str(t.object), path[1:])
    return out


def _naive_step(triples, e, pred, reverse):
    out = set()
    for t in triples:
        if t.object_kind.value != "entity_ref":
            continue
        label = f"{t.predicate}.{t.r_predicate}" if t.r_id is not None else t.predicate
        if label != pred:
            continue
        if not reverse and str(t.subject) == e:
            out.add(str(t.object))
        if reverse and str(t.object) == e:
            out.add(str(t.subject))
    return out


def _naive_cmp(vals, op, lit):
    import operator as o
    fns = {"=": o.eq, "<": o.lt, "<=": o.le, ">": o.gt, ">=": o.ge}

    def one(v, f):
        if isinstance(lit, str):
            return f(v, lit)
        try:
            return f(float(v), float(lit))
        except ValueError:
            return False
    if op == "!=":
        return not any(one(v, fns["="]) for v in vals)
    return any(one(v, fns[op]) for v in vals)


def naive_kgq(query, triples, tokenize):
    """Nested loops over assignments of every variable; no indexes, no planning.
    Per-variable domains are pre-filtered by node-local constraints only."""
    from kgplatform.kgq import Compare, IdIs, Search
    triples = list(triples)
    universe = sorted({str(t.subject) for t in triples})
    memo_v, memo_s = {}, {}

    def values(e, path):
        if (e, path) not in memo_v:
            memo_v[e, path] = _naive_values(triples, e, path)
        return memo_v[e, path]

    def step(e, pred, reverse):
        if (e, pred, reverse) not in memo_s:
            memo_s[e, pred, reverse] = _naive_step(triples, e, pred, reverse)
        return memo_s[e, pred, reverse]

    def connected(a, b, edge):
        def walk(x, k):
            return k > 0 and any(y == b or walk(y, k - 1) for y in step(x, edge.pred, edge.reverse))
        return walk(a, edge.hops)

    def local_ok(var, e):
        for ch in query.chains:
            for n in ch.nodes:
                if n.var == var and n.type and n.type not in values(e, ("type",)):
                    return False
        for c in query.conds:
            if c.var != var:
                continue
            if isinstance(c, Search):
                toks = set()
                for p in ("name", "alias"):
                    for val in values(e, (p,)):
                        toks |= set(tokenize(val))
                want = tokenize(c.text)
                if not (want and set(want) <= toks):
                    return False
            elif isinstance(c, IdIs):
                if e != c.entity:
                    return False
            elif isinstance(c, Compare) and not _naive_cmp(values(e, c.path), c.op, c.value):
                return False
        return True

    vs = query.variables
    domains = [[e for e in universe if local_ok(v, e)] for v in vs]
    rows = set()
    for assign in itertools.product(*domains):
        b = dict(zip(vs, assign))
        if all(connected(b[u], b[v], e) for ch in query.chains for u, e, v in ch.triples()):
            cols = [[b[p.var]] if not p.path else sorted(values(b[p.var], p.path)) for p in query.returns]
            rows.update(itertools.product(*cols))
    out = sorted(rows)
    return out if query.limit is None else out[:query.limit]


def finite_difference_check(kind, seed):
    """Worst relative error of the analytic gradient against central differences on a random model."""
    rng = np.random.default_rng(seed)
    E_ = rng.normal(size=(5, 6))
    R_ = rng.normal(size=(2, 6))
    pos, neg = np.array([[0, 1, 2]]), np.array([[3, 1, 2]])
    loss, gE, gR = batch_loss_and_grads(kind, E_, R_, pos, neg, margin=5.0)
    h, worst = 1e-6, 0.0
    for M, G in ((E_, gE), (R_, gR)):
        num = np.zeros_like(M)
        for idx in np.ndindex(M.shape):
            old = M[idx]
            M[idx] = old + h
            lp = batch_loss_and_grads(kind, E_, R_, pos, neg, 5.0)[0]
            M[idx] = old - h
            lm = batch_loss_and_grads(kind, E_, R_, pos, neg, 5.0)[0]
            M[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        worst = max(worst, np.linalg.norm(num - G) / max(np.linalg.norm(num), 1e-12))
    return loss, worst
