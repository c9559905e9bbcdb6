"""TransE and DistMult embeddings over the entity-to-entity facts of the KG."""
from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from kgplatform.core import SAME_AS, EntityId, KgError, KgSnapshot, ObjectKind
from kgplatform.simstrings import NonFiniteLoss, read_matrix_file, write_matrix_file

KINDS = ("transe", "distmult")


class EmbedError(KgError):
    pass


class EmptyTrainingSet(EmbedError):
    pass


class UnknownId(EmbedError, KeyError):
    pass


@dataclass
class TrainingView:
    triples: np.ndarray  # (m, 3) int: s, p, o
    entities: list[EntityId]
    predicates: list[str]

    @property
    def entity_index(self) -> dict[EntityId, int]:
        return {e: i for i, e in enumerate(self.entities)}

    @property
    def predicate_index(self) -> dict[str, int]:
        return {p: i for i, p in enumerate(self.predicates)}

    def __len__(self):
        return len(self.triples)


def build_training_view(snapshot: Union[KgSnapshot, Iterable], exclude_predicates: Iterable[str] = ()) -> TrainingView:
    """Entity-to-entity facts only; composite facts are named ``predicate.r_predicate``."""
    excluded = {SAME_AS, *exclude_predicates}
    rows = set()
    for t in snapshot:
        if t.object_kind is not ObjectKind.ENTITY_REF or t.predicate in excluded:
            continue
        name = f"{t.predicate}.{t.r_predicate}" if t.r_id else t.predicate
        rows.add((t.subject, name, t.object))
    if not rows:
        raise EmptyTrainingSet("no entity-to-entity facts")
    entities = sorted({r[0] for r in rows} | {r[2] for r in rows})
    predicates = sorted({r[1] for r in rows})
    ei = {e: i for i, e in enumerate(entities)}
    pi = {p: i for i, p in enumerate(predicates)}
    arr = np.array(sorted((ei[s], pi[p], ei[o]) for s, p, o in rows), dtype=np.int64)
    return TrainingView(arr, entities, predicates)


@dataclass
class TrainConfig:
    kind: str = "transe"
    dim: int = 32
    lr: float = 0.05
    epochs: int = 200
    negatives: int = 4
    margin: float = 1.0
    seed: int = 0
    batch_size: int = 16
    # unit-normalize DistMult entity rows too (TransE always does)
    normalize: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise EmbedError(f"unknown model kind {self.kind!r}")
        for name in ("dim", "negatives", "batch_size"):
            if getattr(self, name) < 1:
                raise EmbedError(f"{name} must be positive")
        if self.lr <= 0 or self.margin <= 0 or self.epochs < 0:
            raise EmbedError("lr and margin must be positive, epochs non-negative")


@dataclass
class EmbeddingModel:
    kind: str
    entity_vectors: np.ndarray
    predicate_vectors: np.ndarray
    entities: list[EntityId]
    predicates: list[str]
    losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        self._ei = {e: i for i, e in enumerate(self.entities)}
        self._pi = {p: i for i, p in enumerate(self.predicates)}

    @property
    def dim(self) -> int:
        return self.entity_vectors.shape[1]

    def eid(self, e) -> int:
        try:
            return self._ei[EntityId.parse(e)]
        except KeyError:
            raise UnknownId(str(e)) from None

    def pid(self, p: str) -> int:
        try:
            return self._pi[p]
        except KeyError:
            raise UnknownId(p) from None

    def entity_vector(self, e) -> np.ndarray:
        return self.entity_vectors[self.eid(e)]

    def save(self, path) -> None:
        header = {"kind": self.kind, "entities": [str(e) for e in self.entities], "predicates": self.predicates}
        write_matrix_file(path, header, [self.entity_vectors, self.predicate_vectors])

    @classmethod
    def load(cls, path) -> "EmbeddingModel":
        header, (ev, pv) = read_matrix_file(path)
        return cls(header["kind"], ev.astype(np.float64), pv.astype(np.float64),
                   [EntityId.parse(e) for e in header["entities"]], header["predicates"])


def _scores(kind: str, S: np.ndarray, P: np.ndarray, O: np.ndarray) -> np.ndarray:
    if kind == "transe":
        return -np.linalg.norm(S + P - O, axis=-1)
    # (s*o) first: elementwise products commute, so f(s,p,o) == f(o,p,s) bit for bit
    return np.sum((S * O) * P, axis=-1)


def score_fact(model: EmbeddingModel, s, p, o) -> float:
    E, R = model.entity_vectors, model.predicate_vectors
    return float(_scores(model.kind, E[model.eid(s)], R[model.pid(p)], E[model.eid(o)]))


# -- losses and gradients ----------------------------------------------------------

def batch_loss_and_grads(kind: str, E: np.ndarray, R: np.ndarray, pos: np.ndarray, neg: np.ndarray,
                         margin: float = 1.0):
    """Summed loss over aligned (positive, negative) rows and dense gradients.

    TransE: max(0, margin + d(pos) - d(neg)) with d the L2 distance ||s + p - o||.
    DistMult: softplus(-f(pos)) + softplus(f(neg)) with f the trilinear score.
    """
    gE, gR = np.zeros_like(E), np.zeros_like(R)
    ps, pp, po = pos[:, 0], pos[:, 1], pos[:, 2]
    ns, np_, no = neg[:, 0], neg[:, 1], neg[:, 2]
    if kind == "transe":
        xp = E[ps] + R[pp] - E[po]
        xn = E[ns] + R[np_] - E[no]
        dp = np.linalg.norm(xp, axis=1)
        dn = np.linalg.norm(xn, axis=1)
        raw = margin + dp - dn
        active = raw > 0
        loss = float(raw[active].sum())
        up = np.where(dp[:, None] > 0, xp / np.where(dp > 0, dp, 1.0)[:, None], 0.0) * active[:, None]
        un = np.where(dn[:, None] > 0, xn / np.where(dn > 0, dn, 1.0)[:, None], 0.0) * active[:, None]
        np.add.at(gE, ps, up)
        np.add.at(gR, pp, up)
        np.add.at(gE, po, -up)
        np.add.at(gE, ns, -un)
        np.add.at(gR, np_, -un)
        np.add.at(gE, no, un)
        return loss, gE, gR
    fp = np.sum(E[ps] * R[pp] * E[po], axis=1)
    fn = np.sum(E[ns] * R[np_] * E[no], axis=1)
    loss = float(np.logaddexp(0.0, -fp).sum() + np.logaddexp(0.0, fn).sum())
    cp = -np.exp(-np.logaddexp(0.0, fp))  # d softplus(-f)/df = -sigmoid(-f)
    cn = np.exp(-np.logaddexp(0.0, -fn))  # d softplus(f)/df = sigmoid(f)
    for c, s, p, o in ((cp, ps, pp, po), (cn, ns, np_, no)):
        np.add.at(gE, s, c[:, None] * R[p] * E[o])
        np.add.at(gR, p, c[:, None] * E[s] * E[o])
        np.add.at(gE, o, c[:, None] * E[s] * R[p])
    return loss, gE, gR


def _unit_rows(M: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(M, axis=1, keepdims=True)
    return M / np.where(n > 0, n, 1.0)


def init_model(view: TrainingView, cfg: TrainConfig) -> EmbeddingModel:
    rng = np.random.default_rng(cfg.seed)
    bound = 6.0 / math.sqrt(cfg.dim)
    E = rng.uniform(-bound, bound, (len(view.entities), cfg.dim))
    R = rng.uniform(-bound, bound, (len(view.predicates), cfg.dim))
    if cfg.kind == "transe":
        E = _unit_rows(E)
    return EmbeddingModel(cfg.kind, E, R, list(view.entities), list(view.predicates))


def corrupt(pos: np.ndarray, n_entities: int, negatives: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Repeat each positive ``negatives`` times and replace s (prob 1/2) or o by a uniform entity."""
    rep = np.repeat(pos, negatives, axis=0)
    neg = rep.copy()
    which = rng.random(len(rep)) < 0.5
    repl = rng.integers(0, n_entities, len(rep))
    neg[which, 0] = repl[which]
    neg[~which, 2] = repl[~which]
    return rep, neg


def train(view: TrainingView, cfg: Optional[TrainConfig] = None) -> EmbeddingModel:
    """Mini-batch SGD on summed per-sample losses; seeded and reproducible."""
    cfg = cfg or TrainConfig()
    if len(view) == 0:
        raise EmptyTrainingSet("no facts")
    model = init_model(view, cfg)
    E, R = model.entity_vectors, model.predicate_vectors
    rng = np.random.default_rng(cfg.seed + 1)
    n_ent = len(view.entities)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(view))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            pos, neg = corrupt(view.triples[order[start:start + cfg.batch_size]], n_ent, cfg.negatives, rng)
            loss, gE, gR = batch_loss_and_grads(cfg.kind, E, R, pos, neg, cfg.margin)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"{cfg.kind} loss {loss}")
            total += loss
            E -= cfg.lr * gE
            R -= cfg.lr * gR
            if cfg.kind == "transe" or cfg.normalize:
                touched = np.unique(np.concatenate([pos[:, 0], pos[:, 2], neg[:, 0], neg[:, 2]]))
                E[touched] = _unit_rows(E[touched])
        model.losses.append(total / (len(view) * cfg.negatives))
    return model


# -- inference ----------------------------------------------------------------------

def _query_scores(model: EmbeddingModel, s_idx: int, p_idx: int) -> np.ndarray:
    E, R = model.entity_vectors, model.predicate_vectors
    if model.kind == "transe":
        return -np.linalg.norm((E[s_idx] + R[p_idx])[None, :] - E, axis=1)
    return np.sum((E[s_idx][None, :] * E) * R[p_idx], axis=1)


def predict_object(model: EmbeddingModel, s, p, k: int = 10, exclude_known: Iterable = ()) -> list[tuple[EntityId, float]]:
    """Brute-force scan of all entity vectors against f(s, p)."""
    scores = _query_scores(model, model.eid(s), model.pid(p))
    skip = {model.eid(e) for e in exclude_known}
    order = sorted((i for i in range(len(scores)) if i not in skip), key=lambda i: (-scores[i], str(model.entities[i])))
    return [(model.entities[i], float(scores[i])) for i in order[:k]]


def known_objects(view: TrainingView) -> dict[tuple[int, int], set]:
    out: dict = {}
    for s, p, o in view.triples:
        out.setdefault((int(s), int(p)), set()).add(int(o))
    return out


def rank_facts(model: EmbeddingModel, s, p, objects: Iterable) -> list[tuple[EntityId, float]]:
    scored = [(EntityId.parse(o), score_fact(model, s, p, o)) for o in objects]
    return sorted(scored, key=lambda x: (-x[1], str(x[0])))


def verify_facts(model: EmbeddingModel, facts: Sequence[tuple], percentile: float) -> list[tuple]:
    """Facts in the lowest ``percentile`` percent of scores, flagged for audit."""
    if not 0 <= percentile <= 100:
        raise EmbedError("percentile outside [0, 100]")
    scored = sorted(((score_fact(model, *f), i) for i, f in enumerate(facts)))
    n_flag = math.ceil(percentile / 100.0 * len(facts))
    return [facts[i] for _, i in scored[:n_flag]]


# -- evaluation ------------------------------------------------------------------------

def filtered_mrr(model: EmbeddingModel, test: np.ndarray, known: Mapping[tuple[int, int], set]) -> tuple[float, float]:
    """(model MRR, exact MRR of a uniformly random ranking) over the same filtered candidates.

    For a query with C candidates (the true object plus every entity not known
    as another true object) a random ranking has expected reciprocal rank H_C / C.
    """
    rr, base = [], []
    for s, p, o in test:
        scores = _query_scores(model, int(s), int(p))
        mask = np.ones(len(scores), dtype=bool)
        mask[list(known.get((int(s), int(p)), set()) - {int(o)})] = False
        cand = scores[mask]
        rank = 1 + int(np.sum(cand > scores[o]))
        rr.append(1.0 / rank)
        c = int(mask.sum())
        base.append(sum(1.0 / i for i in range(1, c + 1)) / c)
    return float(np.mean(rr)), float(np.mean(base))


def planted_block_graph(n: int = 100, blocks: int = 2, p_in: float = 0.5, p_out: float = 0.0,
                        seed: int = 0, predicate: str = "related_to") -> list[tuple[str, str, str]]:
    """Directed edges, dense inside blocks, optional sparse noise across them."""
    rng = np.random.default_rng(seed)
    block = np.arange(n) % blocks
    out = []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if rng.random() < (p_in if block[i] == block[j] else p_out):
                out.append((f"akg:n{i:03d}", predicate, f"akg:n{j:03d}"))
    return out


def view_from_edges(edges: Iterable[tuple[str, str, str]], entities: Optional[Iterable] = None) -> TrainingView:
    edges = list(edges)
    ents = sorted({EntityId.parse(x) for s, _, o in edges for x in (s, o)} | set(map(EntityId.parse, entities or ())))
    preds = sorted({p for _, p, _ in edges})
    ei = {e: i for i, e in enumerate(ents)}
    pi = {p: i for i, p in enumerate(preds)}
    arr = np.array([(ei[EntityId.parse(s)], pi[p], ei[EntityId.parse(o)]) for s, p, o in edges], dtype=np.int64)
    return TrainingView(arr.reshape(-1, 3), ents, preds)
