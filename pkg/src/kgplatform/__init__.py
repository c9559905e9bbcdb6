"""Continuous knowledge graph construction and serving at desk scale."""
from kgplatform.core import (
    EntityId,
    ExtendedTriple,
    KgSnapshot,
    ObjectKind,
    get_entity,
    get_one_hop,
    upsert_triples,
    validate_triple,
)

__all__ = [
    "EntityId",
    "ExtendedTriple",
    "KgSnapshot",
    "ObjectKind",
    "get_entity",
    "get_one_hop",
    "upsert_triples",
    "validate_triple",
]
__version__ = "0.1.0"
