"""String similarity functions: q-gram Jaccard, edit similarity, learned encoders.

The learned encoder is a hashed bag of character n-grams: each n-gram indexes
a row of an embedding table, rows are mean-pooled and L2-normalized, and
strings are compared by cosine. Tables are trained per string type with a
triplet loss over distantly supervised (anchor, positive, negative) names.
"""
from __future__ import annotations

import json
import random
import struct
import unicodedata
import zlib
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from kgplatform.core import KgError, KgSnapshot, ObjectKind


class EmptyString(KgError, ValueError):
    pass


class ZeroVector(KgError, ValueError):
    pass


class NonFiniteLoss(KgError, ArithmeticError):
    pass


class InsufficientData(KgError):
    pass


def normalize(s: str) -> str:
    return " ".join(unicodedata.normalize("NFC", s).lower().split())


def qgrams(s: str, q: int, pad: str = "#") -> set[str]:
    if q < 1:
        raise ValueError("q must be >= 1")
    if not s:
        return set()
    padded = pad * (q - 1) + s + pad * (q - 1)
    return {padded[i:i + q] for i in range(len(padded) - q + 1)}


def qgram_jaccard(a: str, b: str, q: int = 2) -> float:
    ga, gb = qgrams(a, q), qgrams(b, q)
    if not ga and not gb:
        return 1.0
    return len(ga & gb) / len(ga | gb)


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def edit_similarity(a: str, b: str) -> float:
    if not a and not b:
        return 1.0
    return 1.0 - levenshtein(a, b) / max(len(a), len(b))


def token_jaccard(a: str, b: str) -> float:
    ta, tb = set(normalize(a).split()), set(normalize(b).split())
    if not ta and not tb:
        return 1.0
    return len(ta & tb) / len(ta | tb)


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ZeroVector("cosine of a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


# -- learned encoder ---------------------------------------------------------------

@dataclass
class StringEncoder:
    string_type: str
    ngram_size: int = 3
    hash_buckets: int = 4096
    dim: int = 64
    embedding_table: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self):
        if self.embedding_table is None:
            rng = np.random.default_rng(self.seed)
            self.embedding_table = rng.normal(0.0, 1.0 / np.sqrt(self.dim), (self.hash_buckets, self.dim))
        if self.embedding_table.shape != (self.hash_buckets, self.dim):
            raise ValueError(f"table shape {self.embedding_table.shape} != ({self.hash_buckets}, {self.dim})")

    def bucket_counts(self, s: str) -> Counter:
        text = normalize(s)
        if not text:
            raise EmptyString(repr(s))
        padded = f"<{text}>"
        n = self.ngram_size
        grams = [padded[i:i + n] for i in range(max(1, len(padded) - n + 1))]
        return Counter(zlib.crc32(g.encode("utf-8")) % self.hash_buckets for g in grams)

    def encode(self, s: str) -> np.ndarray:
        return _encode(self.embedding_table, self.bucket_counts(s))[0]

    def similarity(self, a: str, b: str) -> float:
        return float(np.clip(self.encode(a) @ self.encode(b), -1.0, 1.0))

    def save(self, path) -> None:
        header = {"string_type": self.string_type, "n": self.ngram_size, "buckets": self.hash_buckets, "dim": self.dim}
        write_matrix_file(path, header, [self.embedding_table])

    @classmethod
    def load(cls, path) -> "StringEncoder":
        header, (table,) = read_matrix_file(path)
        return cls(header["string_type"], header["n"], header["buckets"], header["dim"], table.astype(np.float64))


def encode(encoder: StringEncoder, s: str) -> np.ndarray:
    return encoder.encode(s)


def _encode(table: np.ndarray, counts: Counter):
    rows = np.fromiter(counts.keys(), dtype=np.int64)
    weights = np.fromiter(counts.values(), dtype=float)
    weights /= weights.sum()
    mean = weights @ table[rows]
    norm = np.linalg.norm(mean)
    if norm == 0:
        raise ZeroVector("encoded mean is zero")
    return mean / norm, rows, weights, norm


# -- training data -------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingTriplet:
    anchor: str
    positive: str
    negative: str

    def __post_init__(self):
        if self.anchor == self.negative:
            raise ValueError("anchor and negative must differ")


@dataclass
class AugmentationConfig:
    entity_type: Optional[str] = None
    name_predicates: tuple[str, ...] = ("name", "alias")
    typos_per_name: int = 1
    negatives_per_positive: int = 2
    min_triplets: int = 10
    seed: int = 0


def typo_variants(s: str, rng: random.Random, k: int) -> list[str]:
    """One-edit corruptions: adjacent transposition, deletion, or duplication."""
    out = []
    if len(s) < 3:
        return out
    for _ in range(k):
        i = rng.randrange(len(s) - 1)
        op = rng.choice(("swap", "drop", "dup"))
        if op == "swap":
            v = s[:i] + s[i + 1] + s[i] + s[i + 2:]
        elif op == "drop":
            v = s[:i] + s[i + 1:]
        else:
            v = s[:i] + s[i] + s[i:]
        if v != s:
            out.append(v)
    return out


def generate_training_data(snapshot: KgSnapshot, string_type: str, cfg: AugmentationConfig) -> list[TrainingTriplet]:
    """Distant supervision from the KG: aliases of one entity are positives,
    names of other (unlinked) entities are negatives."""
    rng = random.Random(cfg.seed)
    names: dict = {}
    types: dict = {}
    for t in snapshot:
        if t.object_kind is not ObjectKind.LITERAL or t.r_id is not None:
            continue
        if t.predicate in cfg.name_predicates:
            names.setdefault(t.subject, set()).add(str(t.object))
        elif t.predicate == "type":
            types.setdefault(t.subject, set()).add(str(t.object))
    entities = sorted(
        e for e in names if cfg.entity_type is None or cfg.entity_type in types.get(e, ())
    )
    pool = [(e, n) for e in entities for n in sorted(names[e])]
    triplets: list[TrainingTriplet] = []
    for e in entities:
        own = sorted(names[e])
        positives = [(a, b) for a in own for b in own if a != b]
        for a in own:
            positives.extend((a, v) for v in typo_variants(a, rng, cfg.typos_per_name))
        others = [n for (o, n) in pool if o != e]
        if not others:
            continue
        for anchor, pos in positives:
            for _ in range(cfg.negatives_per_positive):
                neg = rng.choice(others)
                if normalize(neg) != normalize(anchor):
                    triplets.append(TrainingTriplet(anchor, pos, neg))
    if len(triplets) < cfg.min_triplets:
        raise InsufficientData(f"{string_type}: {len(triplets)} triplets < {cfg.min_triplets}")
    return triplets


# -- training ---------------------------------------------------------------------

@dataclass
class EncoderTrainConfig:
    dim: int = 64
    margin: float = 0.2
    lr: float = 0.5
    epochs: int = 30
    seed: int = 0
    ngram_size: int = 3
    hash_buckets: int = 4096


def triplet_loss_and_grad(table: np.ndarray, a: Counter, p: Counter, n: Counter, margin: float):
    """Loss max(0, margin - cos(a,p) + cos(a,n)) and its sparse gradient.

    Returns (loss, {row: gradient vector}).
    """
    ea, ra, wa, na = _encode(table, a)
    ep, rp, wp, np_ = _encode(table, p)
    en, rn, wn, nn = _encode(table, n)
    cap, can = ea @ ep, ea @ en
    loss = margin - cap + can
    if loss <= 0:
        return 0.0, {}
    # d(u.v)/d(mean_u) = (v - (u.v) u) / |mean_u| for unit u
    g_ea = (-(ep - cap * ea) + (en - can * ea)) / na
    g_ep = -(ea - cap * ep) / np_
    g_en = (ea - can * en) / nn
    grads: dict[int, np.ndarray] = {}
    for rows, weights, g in ((ra, wa, g_ea), (rp, wp, g_ep), (rn, wn, g_en)):
        for r, w in zip(rows, weights):
            r = int(r)
            grads[r] = grads.get(r, 0.0) + w * g
    return float(loss), grads


def train_encoder(triplets: Sequence[TrainingTriplet], cfg: EncoderTrainConfig,
                  string_type: str = "default", min_triplets: int = 1):
    """Plain SGD on the triplet loss. Returns (encoder, per-epoch mean losses)."""
    if len(triplets) < min_triplets:
        raise InsufficientData(f"{len(triplets)} triplets")
    enc = StringEncoder(string_type, cfg.ngram_size, cfg.hash_buckets, cfg.dim, seed=cfg.seed)
    table = enc.embedding_table
    cache: dict[str, Counter] = {}

    def counts(s):
        if s not in cache:
            cache[s] = enc.bucket_counts(s)
        return cache[s]

    rng = random.Random(cfg.seed)
    order = list(range(len(triplets)))
    losses = []
    for _ in range(cfg.epochs):
        rng.shuffle(order)
        total = 0.0
        for i in order:
            t = triplets[i]
            loss, grads = triplet_loss_and_grad(table, counts(t.anchor), counts(t.positive), counts(t.negative), cfg.margin)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"triplet {t}")
            total += loss
            for r, g in grads.items():
                table[r] -= cfg.lr * g
        losses.append(total / max(1, len(triplets)))
    return enc, losses


# -- binary matrix files (shared with the embedding model format) ------------------

def write_matrix_file(path, header: dict, matrices: Iterable[np.ndarray]) -> None:
    """JSON header (length-prefixed) followed by little-endian float32 matrices."""
    mats = [np.ascontiguousarray(m, dtype="<f4") for m in matrices]
    header = dict(header, shapes=[list(m.shape) for m in mats])
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for m in mats:
            fh.write(m.tobytes())


def read_matrix_file(path):
    data = Path(path).read_bytes()
    (n,) = struct.unpack_from("<I", data, 0)
    header = json.loads(data[4:4 + n].decode("utf-8"))
    offset = 4 + n
    mats = []
    for shape in header["shapes"]:
        count = int(np.prod(shape))
        mats.append(np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).copy())
        offset += 4 * count
    return header, mats
