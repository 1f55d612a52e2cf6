"""Mock independently advancing subsystems over a hidden ground-truth kernel.

Each subsystem exposes one layer of the kernel through its own visibility
policy and has no prepare/commit hooks. The only thing that differs from
reading the kernel directly is *which cut* a read is served from:

=============  =============================================================
replica_lag    the cut as of ``now - lag``
index_refresh  the cut as of the last refresh tick ``<= now``
batch_refresh  at each tick, publishes the cut as of the previous tick
cache_ttl      per key: the cut at fetch time, until ``ttl`` elapses
=============  =============================================================

A parameter of 0 degenerates every policy to "latest cut at ``now``".
"""

from __future__ import annotations

import base64
import enum
import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

from .errors import InvalidConfig, UnknownSubsystem
from .kernel import CutId, Kernel, Layer, as_bytes


class LagKind(str, enum.Enum):
    REPLICA_LAG = "replica_lag"
    INDEX_REFRESH = "index_refresh"
    CACHE_TTL = "cache_ttl"
    BATCH_REFRESH = "batch_refresh"


@dataclass(frozen=True)
class LagPolicy:
    kind: LagKind
    parameter_ms: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", LagKind(self.kind))
        if not isinstance(self.parameter_ms, int) or self.parameter_ms < 0:
            raise InvalidConfig(f"lag parameter must be a non-negative integer, got {self.parameter_ms!r}")


@dataclass
class Subsystem:
    name: str
    layer: Layer
    policy: LagPolicy
    _cache: dict = field(default_factory=dict, repr=False)  # key -> (fetched_at, cut)


@dataclass(frozen=True)
class ServedRead:
    subsystem: str
    key: bytes
    value: Optional[bytes]
    cut: CutId


class ComposedView:
    def __init__(self, kernel: Kernel, subsystems: Mapping[str, tuple[Union[Layer, str], LagPolicy]]):
        self.kernel = kernel
        self.subsystems = {
            name: Subsystem(name, Layer(layer), policy) for name, (layer, policy) in subsystems.items()
        }

    def _get(self, name: str) -> Subsystem:
        try:
            return self.subsystems[name]
        except KeyError:
            raise UnknownSubsystem(f"no subsystem named {name!r}") from None

    def visible_cut(self, subsystem: str, now: int, key: Optional[bytes] = None) -> CutId:
        sub = self._get(subsystem)
        p = sub.policy.parameter_ms
        cut_at = self.kernel.cut_at
        if p == 0:
            return cut_at(now)
        kind = sub.policy.kind
        if kind is LagKind.REPLICA_LAG:
            return cut_at(now - p)
        if kind is LagKind.INDEX_REFRESH:
            return cut_at(now // p * p)
        if kind is LagKind.BATCH_REFRESH:
            return cut_at(now // p * p - p)
        # cache_ttl: one entry per key (or per scan prefix)
        entry = sub._cache.get(key)
        if entry is None or now - entry[0] >= p:
            entry = (now, cut_at(now))
            sub._cache[key] = entry
        return entry[1]

    def serve(self, subsystem: str, key, now: int) -> ServedRead:
        key = as_bytes(key)
        sub = self._get(subsystem)
        cut = self.visible_cut(subsystem, now, key)
        return ServedRead(subsystem, key, self.kernel.read(cut, sub.layer, key), cut)

    def composed_read(self, subsystem: str, key, now: int) -> Optional[bytes]:
        return self.serve(subsystem, key, now).value

    def scan(self, subsystem: str, prefix, now: int) -> tuple[CutId, list[tuple[bytes, bytes]]]:
        prefix = as_bytes(prefix)
        sub = self._get(subsystem)
        cut = self.visible_cut(subsystem, now, b"\x00scan:" + prefix)
        return cut, self.kernel.scan(cut, sub.layer, prefix=prefix)


class EventTimeView:
    """Coherent reads "as of" a shared event time.

    Demonstrates the read-time alternative: every mutation must first exist
    as an immutable, event-timed fact (a ``state_transition`` episode) and
    state is folded outside the stores. It is coherent only because mutation
    has been turned into an append-only log.
    """

    def __init__(self, kernel: Kernel):
        self.kernel = kernel

    def state_as_of(self, event_time: int) -> dict[bytes, bytes]:
        cut = self.kernel.latest
        state: dict[bytes, Optional[bytes]] = {}
        for _, value in self.kernel.scan(cut, Layer.EPISODIC, prefix=b"ep:"):
            ep = json.loads(value)
            if ep.get("kind") != "state_transition" or ep["observed_at"] > event_time:
                continue
            change = json.loads(base64.b64decode(ep["payload_b64"]))
            v = change["value_b64"]
            state[change["key"].encode("utf-8", "surrogateescape")] = base64.b64decode(v) if v is not None else None
        return {k: v for k, v in state.items() if v is not None}

    def read(self, key, event_time: int) -> Optional[bytes]:
        return self.state_as_of(event_time).get(as_bytes(key))
