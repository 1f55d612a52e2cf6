"""Semantic operations executed against a single cut.

The embedder is a hashed bag-of-words model: each token is hashed into one of
64 buckets with a hash-derived sign. Vectors therefore carry exact integer
counts, and the cosine score of two vectors is a fixed function of three
integers, which is what makes top-k results reproducible to the last bit.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
import re
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterable, Mapping, Optional, Protocol, Sequence, Union

import numpy as np

from .errors import DuplicateVersion, EmptyLabelSet, UnknownLabel
from .kernel import CutId, Kernel, Layer, as_bytes

if TYPE_CHECKING:
    from .layers import Episode

DIMENSION = 64
_TOKEN = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class SemanticRecord:
    key: bytes
    interpretation: bytes
    transform_id: str
    transform_version: int
    sources: tuple[int, ...]
    produced_at_cut: Optional[CutId] = None  # filled in from the version on read

    def encode(self) -> bytes:
        return json.dumps(
            {
                "interpretation": self.interpretation.decode("utf-8", "surrogateescape"),
                "sources": list(self.sources),
                "transform_id": self.transform_id,
                "transform_version": self.transform_version,
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode("utf-8")

    @classmethod
    def decode(cls, key: bytes, value: bytes, produced_at_cut: Optional[CutId] = None) -> "SemanticRecord":
        obj = json.loads(value)
        return cls(
            key=key,
            interpretation=obj["interpretation"].encode("utf-8", "surrogateescape"),
            transform_id=obj["transform_id"],
            transform_version=int(obj["transform_version"]),
            sources=tuple(obj["sources"]),
            produced_at_cut=produced_at_cut,
        )

    @property
    def text(self) -> str:
        return self.interpretation.decode("utf-8", "replace")


def decode_record(key: bytes, value: bytes) -> Optional[SemanticRecord]:
    """Parse a semantic-layer value, or None if it carries no provenance."""
    try:
        rec = SemanticRecord.decode(key, value)
    except (ValueError, KeyError, TypeError):
        return None
    if not rec.transform_id or rec.transform_version < 0 or not rec.sources:
        return None
    return rec


# A transformation maps input episodes to semantic records. Provenance fields
# on the returned records are overwritten by the runner.
TransformFn = Callable[[Sequence["Episode"]], Iterable[SemanticRecord]]


@dataclass(frozen=True)
class Transformation:
    id: str
    version: int
    fn: TransformFn = field(compare=False)
    description: str = ""


class TransformRegistry:
    def __init__(self):
        self._by_id: dict[tuple[str, int], Transformation] = {}
        self._lock = threading.Lock()

    def register(self, t: Transformation) -> None:
        if not t.id or t.version < 0:
            raise ValueError("a transformation needs an id and a non-negative version")
        with self._lock:
            if (t.id, t.version) in self._by_id:
                raise DuplicateVersion(f"{t.id} v{t.version} is already registered")
            self._by_id[(t.id, t.version)] = t

    def get(self, transform_id: str, version: int) -> Optional[Transformation]:
        return self._by_id.get((transform_id, version))

    def is_registered(self, transform_id: str, version: int) -> bool:
        return (transform_id, version) in self._by_id

    def versions(self, transform_id: str) -> list[int]:
        return sorted(v for (i, v) in self._by_id if i == transform_id)


@dataclass(frozen=True)
class EmbeddingVector:
    counts: tuple[int, ...]

    @property
    def sq_norm(self) -> int:
        return sum(c * c for c in self.counts)

    @property
    def norm(self) -> float:
        return math.sqrt(self.sq_norm)

    @property
    def components(self) -> tuple[float, ...]:
        n = self.norm
        if n == 0:
            return tuple(0.0 for _ in self.counts)
        return tuple(c / n for c in self.counts)


def cosine_score(dot: int, sq_norm_a: int, sq_norm_b: int) -> float:
    """Cosine from exact integer inputs. Both the search path and its oracle
    funnel through this one scalar definition."""
    if sq_norm_a == 0 or sq_norm_b == 0:
        return 0.0
    return dot / math.sqrt(sq_norm_a * sq_norm_b)


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    return cosine_score(sum(x * y for x, y in zip(a.counts, b.counts)), a.sq_norm, b.sq_norm)


class Embedder(Protocol):
    dimension: int
    latency_bound_ms: int

    def embed(self, text: Union[bytes, str]) -> EmbeddingVector: ...


@lru_cache(maxsize=65536)
def _hashed_counts(text: bytes, dimension: int) -> tuple[int, ...]:
    counts = [0] * dimension
    for token in _TOKEN.findall(text.decode("utf-8", "replace").lower()):
        h = int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8).digest(), "big")
        counts[h % dimension] += 1 if (h >> 6) & 1 == 0 else -1
    return tuple(counts)


class HashEmbedder:
    """Deterministic token-hash embedder; costs no logical time."""

    latency_bound_ms = 0

    def __init__(self, dimension: int = DIMENSION):
        self.dimension = dimension

    def embed(self, text: Union[bytes, str]) -> EmbeddingVector:
        return EmbeddingVector(_hashed_counts(as_bytes(text), self.dimension))


def nearest_label(embedder: Embedder, text: Union[bytes, str], prototypes: Mapping[str, str]) -> str:
    """Label whose prototype is closest to ``text``; earlier labels win ties."""
    if not prototypes:
        raise EmptyLabelSet("classify needs at least one label")
    v = embedder.embed(text)
    best, best_score = None, -math.inf
    for label, proto in prototypes.items():
        score = cosine(v, embedder.embed(proto))
        if score > best_score:
            best, best_score = label, score
    return best


class SemanticEngine:
    """Transformation registry, embedder and cut-pure semantic retrieval."""

    def __init__(self, kernel: Kernel, registry: Optional[TransformRegistry] = None,
                 embedder: Optional[Embedder] = None):
        self.kernel = kernel
        self.registry = registry if registry is not None else TransformRegistry()
        self.embedder = embedder if embedder is not None else HashEmbedder()
        self._prototypes: dict[str, str] = {}

    def register_transformation(self, t: Transformation) -> None:
        self.registry.register(t)

    def embed(self, text: Union[bytes, str]) -> EmbeddingVector:
        return self.embedder.embed(text)

    def records(self, cut: CutId) -> list[SemanticRecord]:
        out = []
        for key, value in self.kernel.scan(cut, Layer.SEMANTIC):
            rec = decode_record(key, value)
            if rec is not None:
                out.append(rec)
        return out

    def similarity_search(self, cut: CutId, query: EmbeddingVector, k: int) -> list[tuple[bytes, float]]:
        """Top-k semantic records at ``cut`` by cosine; ties by ascending key."""
        if k < 1:
            raise ValueError("k must be >= 1")
        recs = self.records(cut)  # raises UnknownCut
        if not recs:
            return []
        mat = np.array([self.embed(r.interpretation).counts for r in recs], dtype=np.int64)
        q = np.array(query.counts, dtype=np.int64)
        dots = mat @ q
        sq = np.einsum("ij,ij->i", mat, mat)
        q_sq = int(q @ q)
        scored = [
            (-cosine_score(int(d), int(s), q_sq), r.key)
            for d, s, r in zip(dots.tolist(), sq.tolist(), recs)
        ]
        return [(key, -neg) for neg, key in heapq.nsmallest(k, scored)]

    # -- classification ----------------------------------------------------

    def register_prototype(self, label: str, text: str) -> None:
        self._prototypes[label] = text

    def load_prototypes(self, source: Union[Mapping[str, str], str, Path]) -> None:
        """Load ``{label: prototype text}`` from a mapping or a JSON file.

        A JSON file may also hold the mapping under a ``"prototypes"`` key.
        """
        if not isinstance(source, Mapping):
            data = json.loads(Path(source).read_text(encoding="utf-8"))
            source = data.get("prototypes", data)
        for label, text in source.items():
            self.register_prototype(label, text)

    @property
    def prototypes(self) -> dict[str, str]:
        return dict(self._prototypes)

    def classify(self, cut: CutId, text: Union[bytes, str], labels: Sequence[str]) -> str:
        if not labels:
            raise EmptyLabelSet("classify needs at least one label")
        self.kernel._check_cut(cut)
        missing = [label for label in labels if label not in self._prototypes]
        if missing:
            raise UnknownLabel(f"no prototype registered for {missing}")
        return nearest_label(self.embedder, text, {label: self._prototypes[label] for label in labels})
