from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from kgplatform.core import KgError


class UnknownPredicate(KgError):
    pass


@dataclass(frozen=True)
class PredicateDef:
    name: str
    functional: bool = False
    # None for literal-valued predicates, otherwise the expected entity type
    range: Optional[str] = None
    volatile: bool = False


@dataclass
class Ontology:
    types: set[str] = field(default_factory=set)
    predicates: dict[str, PredicateDef] = field(default_factory=dict)

    def __contains__(self, predicate: str) -> bool:
        return predicate in self.predicates

    def require(self, predicate: str) -> PredicateDef:
        try:
            return self.predicates[predicate]
        except KeyError:
            raise UnknownPredicate(predicate) from None

    @property
    def functional_predicates(self) -> frozenset[str]:
        return frozenset(p for p, d in self.predicates.items() if d.functional)

    @classmethod
    def from_dict(cls, data: dict) -> "Ontology":
        preds = {}
        for name, spec in data.get("predicates", {}).items():
            spec = spec or {}
            preds[name] = PredicateDef(
                name,
                functional=bool(spec.get("functional", False)),
                range=spec.get("range"),
                volatile=bool(spec.get("volatile", False)),
            )
        # bookkeeping predicates are always known
        preds.setdefault("type", PredicateDef("type"))
        preds.setdefault("same_as", PredicateDef("same_as"))
        return cls(types=set(data.get("types", [])), predicates=preds)

    @classmethod
    def load(cls, path) -> "Ontology":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def permissive(cls, predicates=()) -> "Ontology":
        return cls.from_dict({"predicates": {p: {} for p in predicates}})
