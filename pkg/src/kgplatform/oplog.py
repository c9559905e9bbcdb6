"""Durable operation log with LSNs, per-store replay agents, and the stores they feed.

Each log entry points at a staged payload file. A payload lists, for every
changed entity, its complete new fact set (an empty list deletes it), so
applying an entry is idempotent and a re-applied entry after a crash is harmless.
"""
from __future__ import annotations

import fcntl
import hashlib
import json
import logging
import os
import zlib
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from kgplatform.core import EntityId, ExtendedTriple, KgError, KgSnapshot, ObjectKind
from kgplatform.simstrings import normalize

log = logging.getLogger(__name__)


class LogError(KgError):
    pass


class StageMissing(LogError):
    pass


class ChecksumMismatch(LogError):
    pass


class ApplyFailure(LogError):
    def __init__(self, lsn: int, reason: str = ""):
        super().__init__(f"apply failed at lsn {lsn}: {reason}")
        self.lsn = lsn


class EmptyAgentSet(LogError):
    pass


def _fsync_write(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    tmp.replace(path)


def stage_payload(path: Union[str, Path], changes: Mapping[EntityId, Iterable[ExtendedTriple]]) -> Path:
    """Write per-entity replacement records, one JSON line per entity, sorted by id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for eid in sorted(changes, key=str):
        facts = sorted(changes[eid], key=lambda t: t.key)
        lines.append(json.dumps({"entity": str(eid), "facts": [t.to_record() for t in facts]},
                                sort_keys=True, ensure_ascii=False))
    _fsync_write(path, ("\n".join(lines) + "\n" if lines else "").encode("utf-8"))
    return path


def stage_snapshot_changes(path, snapshot: KgSnapshot, entities: Iterable[EntityId]) -> Path:
    return stage_payload(path, {e: list(snapshot.facts_of(e).values()) for e in entities})


@dataclass(frozen=True)
class LogEntry:
    lsn: int
    payload_ref: str
    changed_entities: tuple[str, ...]
    checksum: str

    def to_record(self) -> dict:
        return {"lsn": self.lsn, "payload_ref": self.payload_ref,
                "changed_entities": list(self.changed_entities), "checksum": self.checksum}


class OperationLog:
    """Append-only JSON Lines file; LSNs start at 1 and have no gaps."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._entries: list[LogEntry] = []
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                self._load(fh)

    def _load(self, fh) -> None:
        """Read entries past those already known (other writers may have appended)."""
        fh.seek(0)
        lines = [line for line in fh.read().splitlines() if line.strip()]
        for line in lines[len(self._entries):]:
            r = json.loads(line)
            entry = LogEntry(r["lsn"], r["payload_ref"], tuple(r["changed_entities"]), r["checksum"])
            if entry.lsn != len(self._entries) + 1:
                raise LogError(f"log gap: expected lsn {len(self._entries) + 1}, found {entry.lsn}")
            self._entries.append(entry)

    def refresh(self) -> int:
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                self._load(fh)
        return self.head

    @property
    def head(self) -> int:
        return len(self._entries)

    def __len__(self):
        return len(self._entries)

    def entry(self, lsn: int) -> LogEntry:
        if not 1 <= lsn <= self.head:
            raise LogError(f"lsn {lsn} outside 1..{self.head}")
        return self._entries[lsn - 1]

    def entries(self, after: int = 0, limit: Optional[int] = None) -> list[LogEntry]:
        out = self._entries[after:]
        return out if limit is None else out[:limit]

    def _resolve(self, payload_ref: str) -> Path:
        p = Path(payload_ref)
        return p if p.is_absolute() else self.path.parent / p

    def append(self, payload_ref: Union[str, Path], changed_entities: Iterable) -> int:
        ref = str(payload_ref)
        staged = self._resolve(ref)
        if not staged.is_file():
            raise StageMissing(ref)
        checksum = hashlib.sha256(staged.read_bytes()).hexdigest()
        changed = tuple(sorted(map(str, changed_entities)))
        with open(self.path, "a+", encoding="utf-8") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                self._load(fh)
                entry = LogEntry(self.head + 1, ref, changed, checksum)
                fh.seek(0, os.SEEK_END)
                fh.write(json.dumps(entry.to_record(), sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)
        self._entries.append(entry)
        return entry.lsn

    def read_payload(self, entry: LogEntry) -> list[dict]:
        data = self._resolve(entry.payload_ref).read_bytes()
        if hashlib.sha256(data).hexdigest() != entry.checksum:
            raise ChecksumMismatch(f"lsn {entry.lsn}: {entry.payload_ref}")
        return [json.loads(line) for line in data.decode("utf-8").splitlines() if line.strip()]


def append_op(log_: OperationLog, payload_ref, changed_entities) -> int:
    return log_.append(payload_ref, changed_entities)


# -- stores ------------------------------------------------------------------------

class Store:
    kind = "base"

    def apply(self, payload: list[dict]) -> None:
        for rec in payload:
            self.replace(rec["entity"], rec["facts"])

    def replace(self, entity: str, facts: list[dict]) -> None:
        raise NotImplementedError

    def state(self) -> dict:
        raise NotImplementedError

    def load_state(self, state: dict) -> None:
        raise NotImplementedError

    def dump_bytes(self) -> bytes:
        return json.dumps(self.state(), sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")

    def digest(self) -> str:
        return hashlib.sha256(self.dump_bytes()).hexdigest()

    def save(self, path) -> None:
        _fsync_write(Path(path), self.dump_bytes())

    def load(self, path) -> None:
        path = Path(path)
        if path.exists():
            self.load_state(json.loads(path.read_text(encoding="utf-8")))


class AnalyticsStore(Store):
    """Relational fact table keyed by entity."""

    kind = "analytics"

    def __init__(self):
        self.rows: dict[str, list[dict]] = {}

    def replace(self, entity, facts):
        if facts:
            self.rows[entity] = facts
        else:
            self.rows.pop(entity, None)

    def state(self):
        return {"rows": self.rows}

    def load_state(self, state):
        self.rows = dict(state["rows"])


class KvStore(Store):
    """Entity document store: predicate -> list of objects."""

    kind = "kv"

    def __init__(self):
        self.docs: dict[str, dict] = {}

    def replace(self, entity, facts):
        if not facts:
            self.docs.pop(entity, None)
            return
        doc: dict = {}
        for f in facts:
            name = f"{f['predicate']}.{f['r_predicate']}" if f["r_id"] else f["predicate"]
            doc.setdefault(name, []).append(f["object"])
        self.docs[entity] = {k: sorted(v) for k, v in sorted(doc.items())}

    def state(self):
        return {"docs": self.docs}

    def load_state(self, state):
        self.docs = dict(state["docs"])


class InvertedIndexStore(Store):
    """Name/alias token -> entities."""

    kind = "inverted_index"
    FIELDS = ("name", "alias")

    def __init__(self):
        self.postings: dict[str, set] = {}
        self.tokens_of: dict[str, list] = {}

    def replace(self, entity, facts):
        for tok in self.tokens_of.pop(entity, []):
            self.postings[tok].discard(entity)
            if not self.postings[tok]:
                del self.postings[tok]
        toks = sorted({tok for f in facts if f["predicate"] in self.FIELDS and f["object_kind"] == "literal"
                       for tok in normalize(f["object"]).split()})
        if toks:
            self.tokens_of[entity] = toks
            for tok in toks:
                self.postings.setdefault(tok, set()).add(entity)

    def lookup(self, token: str) -> set:
        return set(self.postings.get(normalize(token), ()))

    def state(self):
        return {"postings": {k: sorted(v) for k, v in self.postings.items()}, "tokens_of": self.tokens_of}

    def load_state(self, state):
        self.postings = {k: set(v) for k, v in state["postings"].items()}
        self.tokens_of = dict(state["tokens_of"])


class VectorStore(Store):
    """Feature-hashed fact vectors per entity (predicate and predicate=object buckets)."""

    kind = "vector"

    def __init__(self, dim: int = 32):
        self.dim = dim
        self.vectors: dict[str, list[float]] = {}

    def replace(self, entity, facts):
        if not facts:
            self.vectors.pop(entity, None)
            return
        v = np.zeros(self.dim)
        for f in facts:
            for feat in (f["predicate"], f"{f['predicate']}={f['object']}"):
                v[zlib.crc32(feat.encode("utf-8")) % self.dim] += 1.0
        v /= np.linalg.norm(v)
        self.vectors[entity] = [round(float(x), 12) for x in v]

    def put(self, entity: str, vector) -> None:
        self.vectors[entity] = [round(float(x), 12) for x in vector]

    def state(self):
        return {"dim": self.dim, "vectors": self.vectors}

    def load_state(self, state):
        self.dim = state["dim"]
        self.vectors = dict(state["vectors"])


STORE_KINDS: dict[str, Callable[[], Store]] = {
    "analytics": AnalyticsStore,
    "inverted_index": InvertedIndexStore,
    "kv": KvStore,
    "vector": VectorStore,
}


# -- agents ------------------------------------------------------------------------

def read_progress(path) -> dict[str, int]:
    path = Path(path)
    return json.loads(path.read_text()) if path.exists() else {}


def _write_progress(path: Path, store_id: str, lsn: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lock = path.with_suffix(".lock")
    with open(lock, "w") as lk:
        fcntl.flock(lk, fcntl.LOCK_EX)
        progress = read_progress(path)
        progress[store_id] = lsn
        _fsync_write(path, json.dumps(progress, sort_keys=True, indent=1).encode())
        fcntl.flock(lk, fcntl.LOCK_UN)


class StoreAgent:
    """Replays log entries into one store, strictly in LSN order.

    The store is checkpointed before progress is recorded, so a crash between
    the two re-applies one idempotent entry on resume.
    """

    def __init__(self, store_id: str, store_kind: str, state_dir: Union[str, Path, None] = None,
                 checkpoint_every: int = 1):
        if store_kind not in STORE_KINDS:
            raise LogError(f"unknown store kind {store_kind!r}")
        self.store_id = store_id
        self.store_kind = store_kind
        self.store = STORE_KINDS[store_kind]()
        self.state_dir = Path(state_dir) if state_dir is not None else None
        self.checkpoint_every = max(1, checkpoint_every)
        self.replay_lsn = 0
        if self.state_dir is not None:
            self.state_dir.mkdir(parents=True, exist_ok=True)
            self.store.load(self.state_path)
            self.replay_lsn = read_progress(self.progress_path).get(store_id, 0)

    @property
    def state_path(self) -> Path:
        return self.state_dir / f"{self.store_id}.json"

    @property
    def progress_path(self) -> Path:
        return self.state_dir / "progress.json"

    def checkpoint(self) -> None:
        if self.state_dir is None:
            return
        self.store.save(self.state_path)
        _write_progress(self.progress_path, self.store_id, self.replay_lsn)

    def replay(self, oplog: OperationLog, limit: Optional[int] = None,
               fault: Optional[Callable[[int], None]] = None) -> "StoreAgent":
        oplog.refresh()
        if self.replay_lsn > oplog.head:
            raise LogError(f"{self.store_id} at lsn {self.replay_lsn} ahead of log head {oplog.head}")
        pending = 0
        try:
            for entry in oplog.entries(self.replay_lsn, limit):
                try:
                    if fault is not None:
                        fault(entry.lsn)
                    self.store.apply(oplog.read_payload(entry))
                except Exception as exc:
                    raise ApplyFailure(entry.lsn, repr(exc)) from exc
                self.replay_lsn = entry.lsn
                pending += 1
                if pending >= self.checkpoint_every:
                    self.checkpoint()
                    pending = 0
        finally:
            if pending:
                self.checkpoint()
        return self


def agent_replay(agent: StoreAgent, oplog: OperationLog, limit: Optional[int] = None) -> StoreAgent:
    return agent.replay(oplog, limit)


def freshness(agents: Iterable[StoreAgent], required: Optional[Iterable[str]] = None) -> tuple[dict[str, int], int]:
    agents = list(agents)
    if not agents:
        raise EmptyAgentSet("no agents")
    lsns = {a.store_id: a.replay_lsn for a in agents}
    req = set(required) if required is not None else set(lsns)
    missing = req - set(lsns)
    if missing:
        raise LogError(f"unknown stores {sorted(missing)}")
    return lsns, min(lsns[s] for s in req)
