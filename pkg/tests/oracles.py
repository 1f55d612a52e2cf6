"""Reference implementations the real modules are checked against.

Nothing here imports the code under test except for plain data types, so a
bug in the package cannot hide inside its own oracle.
"""

from __future__ import annotations

import hashlib
import itertools
import math
import re

TOKEN = re.compile(r"[a-z0-9]+")


class ReplayStore:
    """Naive store: keeps the list of commits and replays them for every read."""

    def __init__(self):
        self.commits: list[dict] = []  # each: {(layer, key): value or None}

    def commit(self, writes: dict) -> int:
        self.commits.append(dict(writes))
        return len(self.commits)

    def state_at(self, cut: int) -> dict:
        state: dict = {}
        for writes in self.commits[:cut]:
            state.update(writes)
        return {k: v for k, v in state.items() if v is not None}

    def read(self, cut: int, layer, key):
        return self.state_at(cut).get((layer, key))


def embed_counts(text: str, dim: int = 64) -> list[int]:
    counts = [0] * dim
    for tok in TOKEN.findall(text.lower()):
        h = int.from_bytes(hashlib.blake2b(tok.encode(), digest_size=8).digest(), "big")
        counts[h % dim] += -1 if (h >> 6) & 1 else 1
    return counts


def cosine_counts(a: list[int], b: list[int]) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na, nb = sum(x * x for x in a), sum(x * x for x in b)
    if na == 0 or nb == 0:
        return 0.0
    return dot / math.sqrt(na * nb)


def brute_force_top_k(corpus: dict[bytes, str], query: str, k: int) -> list[tuple[bytes, float]]:
    """Score every record, sort the whole list by (-score, key), cut at k."""
    q = embed_counts(query)
    scored = [(key, cosine_counts(embed_counts(text), q)) for key, text in corpus.items()]
    scored.sort(key=lambda kv: (-kv[1], kv[0]))
    return scored[:k]


def serial_outcomes(txs: list[dict]) -> list[dict]:
    """Final state of every serial order of ``txs`` (dicts of key -> value)."""
    outs = []
    for order in itertools.permutations(txs):
        state: dict = {}
        for writes in order:
            state.update(writes)
        outs.append({k: v for k, v in state.items() if v is not None})
    return outs
