"""Concurrency envelope (fail-fast admission control) and envelope metrics."""

from __future__ import annotations

import copy
import itertools
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

from .errors import InvalidConfig, OverEnvelope


@dataclass(frozen=True)
class EnvelopeConfig:
    delta_ms: int
    max_concurrent: int

    def __post_init__(self):
        if not isinstance(self.delta_ms, int) or self.delta_ms < 1:
            raise InvalidConfig(f"delta_ms must be an integer >= 1, got {self.delta_ms!r}")
        if not isinstance(self.max_concurrent, int) or self.max_concurrent < 1:
            raise InvalidConfig(f"max_concurrent must be an integer >= 1, got {self.max_concurrent!r}")

    def to_dict(self) -> dict:
        return {"delta_ms": self.delta_ms, "max_concurrent": self.max_concurrent}


@dataclass(frozen=True)
class Slot:
    slot_id: int
    agent_id: str


@dataclass
class EnvelopeMetrics:
    decisions: int = 0
    admitted: int = 0
    premise_ages: list = field(default_factory=list)
    retrieval_latencies: list = field(default_factory=list)
    rejections: dict = field(default_factory=dict)  # violation code -> count
    over_envelope: int = 0
    peak_in_flight: int = 0

    def to_dict(self) -> dict:
        return {
            "decisions": self.decisions,
            "admitted": self.admitted,
            "max_premise_age_ms": max(self.premise_ages, default=0),
            "premise_ages_ms": list(self.premise_ages),
            "retrieval_latencies_ms": list(self.retrieval_latencies),
            "rejections": dict(sorted(self.rejections.items())),
            "over_envelope": self.over_envelope,
            "peak_in_flight": self.peak_in_flight,
        }


class EnvelopeControl:
    """Tracks in-flight decisions against C and records envelope metrics.

    With ``admission=False`` slots are still counted (so peak in-flight is
    observable) but never refused.
    """

    def __init__(self, config: EnvelopeConfig, *, admission: bool = True):
        self.config = config
        self.admission = admission
        self._lock = threading.Lock()
        self._ids = itertools.count(1)
        self._outstanding: dict[int, Slot] = {}
        self._m = EnvelopeMetrics()

    @property
    def in_flight(self) -> int:
        return len(self._outstanding)

    def acquire_slot(self, agent_id: str) -> Slot:
        with self._lock:
            if self.admission and len(self._outstanding) >= self.config.max_concurrent:
                self._m.over_envelope += 1
                raise OverEnvelope(
                    f"{agent_id}: {len(self._outstanding)} decisions in flight (C={self.config.max_concurrent})"
                )
            slot = Slot(next(self._ids), agent_id)
            self._outstanding[slot.slot_id] = slot
            self._m.peak_in_flight = max(self._m.peak_in_flight, len(self._outstanding))
            return slot

    def release_slot(self, slot: Slot) -> None:
        with self._lock:
            if self._outstanding.pop(slot.slot_id, None) is None:
                raise ValueError(f"slot {slot.slot_id} is not outstanding")

    def record_retrieval(self, latency_ms: int) -> None:
        with self._lock:
            self._m.retrieval_latencies.append(latency_ms)

    def record_decision(self, premise_ages: Iterable[int], violations: Iterable[str]) -> None:
        violations = list(violations)
        with self._lock:
            self._m.decisions += 1
            self._m.premise_ages.extend(premise_ages)
            if violations:
                counts = Counter(self._m.rejections)
                counts.update(str(v) for v in violations)
                self._m.rejections = dict(counts)
            else:
                self._m.admitted += 1

    def snapshot_metrics(self) -> EnvelopeMetrics:
        with self._lock:
            return copy.deepcopy(self._m)
