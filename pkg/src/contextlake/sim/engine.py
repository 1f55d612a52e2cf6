"""Discrete-event scheduler and the agent-facing runtime.

Agents never touch the kernel directly. They open a :class:`Session`, read
premises through it (which records a retrieval event and a premise ref),
and finish with :meth:`Session.decide`, which records the decision and its
verdict and then either commits the effects or aborts them.

How a session picks the cut for each read is the knob the scenarios turn:

``snapshot``  every read uses the cut taken when the session opened
``pinned``    every read uses a fixed, possibly old, cut
``fresh``     every read uses whatever cut is latest at that moment
composed      each read is served by a lagging subsystem (see ``composed``)
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

from ..admissibility import (
    AdmissibilityGate,
    DecisionRecord,
    Effect,
    PremiseKind,
    PremiseRef,
    Verdict,
    apply_effects,
    log_external_effects,
)
from ..clock import SimClock
from ..composed import ComposedView, LagPolicy
from ..config import RunConfig
from ..envelope import EnvelopeConfig, EnvelopeControl
from ..errors import OverEnvelope, TransitionRejected, WriteConflict
from ..kernel import CutId, Kernel, Layer, as_bytes
from ..layers import MemoryLayers
from ..semantic import SemanticEngine, TransformRegistry
from ..trace import EventKind, TraceRecorder, b64, key_text

log = logging.getLogger(__name__)

EPISODIC_LOG = "episodic.jsonl"
TRANSFORM_LOG = "transforms.jsonl"


@dataclass(order=True)
class ScheduledEvent:
    time_ms: int
    seq: int
    actor: str = field(compare=False)
    name: str = field(compare=False)
    action: Callable[[], None] = field(compare=False, repr=False)


class Schedule:
    """Event queue ordered by (time, insertion sequence)."""

    def __init__(self, seed: int = 0, clock: Optional[SimClock] = None):
        self.seed = seed
        self.clock = clock if clock is not None else SimClock()
        self.rng = random.Random(seed)
        self._queue: list[ScheduledEvent] = []
        self._seq = itertools.count()

    def __len__(self) -> int:
        return len(self._queue)

    def at(self, time_ms: int, actor: str, name: str, action: Callable[[], None]) -> ScheduledEvent:
        if time_ms < self.clock.now():
            raise ValueError(f"cannot schedule {name!r} at {time_ms}, clock is already at {self.clock.now()}")
        ev = ScheduledEvent(time_ms, next(self._seq), actor, name, action)
        heapq.heappush(self._queue, ev)
        return ev

    def step(self) -> Optional[ScheduledEvent]:
        """Run the next event; None when the queue is empty."""
        if not self._queue:
            return None
        ev = heapq.heappop(self._queue)
        self.clock.advance_to(ev.time_ms)
        ev.action()
        return ev

    def run(self) -> int:
        n = 0
        while self.step() is not None:
            n += 1
        return n


def step(schedule: Schedule) -> Optional[ScheduledEvent]:
    return schedule.step()


@dataclass
class DecisionOutcome:
    decision: DecisionRecord
    verdict: Verdict
    cut: Optional[CutId] = None  # commit cut if the effects became visible
    error: str = ""

    @property
    def committed(self) -> bool:
        return self.cut is not None


class Runtime:
    """Kernel, layers, gate, envelope and trace recorder wired for one run."""

    def __init__(self, config: RunConfig, *, start_ms: int = 0, workdir: Union[str, Path, None] = None,
                 subsystems: Optional[dict[str, tuple[Layer, LagPolicy]]] = None,
                 default_via: Optional[dict[Layer, str]] = None,
                 gate_delta_ms: Optional[int] = None, admission: bool = True):
        self.config = config
        self.clock = SimClock(start_ms)
        self.schedule = Schedule(config.seed, self.clock)
        self.rng = self.schedule.rng
        episodic_log = transform_log = None
        if workdir is not None:
            workdir = Path(workdir)
            workdir.mkdir(parents=True, exist_ok=True)
            episodic_log, transform_log = workdir / EPISODIC_LOG, workdir / TRANSFORM_LOG
            for p in (episodic_log, transform_log):
                p.unlink(missing_ok=True)
        self.kernel = Kernel(self.clock, episodic_log)
        self.recorder = TraceRecorder(self.clock)
        self.recorder.attach(self.kernel)
        self.registry = TransformRegistry()
        self.layers = MemoryLayers(self.kernel, self.registry)
        self.engine = SemanticEngine(self.kernel, self.registry)
        self.runner = self.layers.runner(transform_log)
        self.envelope = EnvelopeControl(EnvelopeConfig(config.delta_ms, config.max_concurrent), admission=admission)
        self.gate_env = EnvelopeConfig(gate_delta_ms or config.delta_ms, config.max_concurrent)
        self.gate = AdmissibilityGate(self.layers, self.gate_env)
        self.composed = ComposedView(self.kernel, subsystems) if subsystems is not None else None
        self.default_via = default_via or {}
        self.enforce = self.composed is None
        self.outcomes: list[DecisionOutcome] = []
        self._decision_ids = itertools.count(1)

    def open(self, agent: str, *, policy: str = "snapshot", pinned: Optional[CutId] = None) -> Optional["Session"]:
        """Start a decision; None if the concurrency envelope is full."""
        try:
            slot = self.envelope.acquire_slot(agent)
        except OverEnvelope as exc:
            log.debug("%s shed: %s", agent, exc)
            return None
        return Session(self, agent, f"{agent}#{next(self._decision_ids)}", slot, policy, pinned)

    def setup(self, actor: str, writes: dict, episodes: Sequence[str] = ()) -> list[int]:
        """Commit initial state and episodes in one transaction."""
        tx = self.kernel.begin_tx(actor=actor)
        for key, value in writes.items():
            self.layers.update_state(tx, key, value)
        for payload in episodes:
            self.layers.tx_append_episode(tx, actor, self.clock.now(), payload)
        self.kernel.commit_tx(tx)
        return list(tx.appended_seqs[: len(episodes)])


class Session:
    """One agent decision: retrievals, then a decide/act step."""

    def __init__(self, rt: Runtime, agent: str, decision_id: str, slot, policy: str, pinned: Optional[CutId]):
        if policy not in ("snapshot", "pinned", "fresh"):
            raise ValueError(f"unknown read policy {policy!r}")
        if policy == "pinned" and pinned is None:
            raise ValueError("the pinned policy needs a cut")
        self.rt = rt
        self.agent = agent
        self.decision_id = decision_id
        self.slot = slot
        self.policy = policy
        self.cut = pinned if policy == "pinned" else rt.kernel.latest
        self.premises: list[PremiseRef] = []
        self.closed = False

    def _cut_for(self, layer: Layer, key: bytes, via: Optional[str]) -> tuple[CutId, Optional[str]]:
        rt = self.rt
        if rt.composed is not None:
            via = via or rt.default_via.get(layer)
            return rt.composed.visible_cut(via, rt.clock.now(), key), via
        if self.policy == "fresh":
            return rt.kernel.latest, via
        return self.cut, via

    def _emit(self, payload: dict) -> None:
        self.rt.recorder.emit(EventKind.RETRIEVAL, self.agent, {"decision_id": self.decision_id, **payload})

    def read(self, layer: Layer, key, *, kind: PremiseKind = PremiseKind.BASE,
             via: Optional[str] = None) -> Optional[bytes]:
        layer, key = Layer(layer), as_bytes(key)
        cut, via = self._cut_for(layer, key, via)
        value = self.rt.kernel.read(cut, layer, key)
        now = self.rt.clock.now()
        self.premises.append(PremiseRef(layer, key, cut, now, PremiseKind(kind)))
        self.rt.envelope.record_retrieval(0)
        self._emit({"op": "read", "layer": layer.value, "key": key_text(key), "cut": cut,
                    "value_b64": b64(value), "kind": PremiseKind(kind).value, "via": via})
        return value

    def scan(self, layer: Layer, prefix, *, via: Optional[str] = None) -> list[tuple[bytes, bytes]]:
        """Range read used for discovery; cite what matters with :meth:`read`."""
        layer, prefix = Layer(layer), as_bytes(prefix)
        cut, via = self._cut_for(layer, b"\x00scan:" + prefix, via)
        rows = self.rt.kernel.scan(cut, layer, prefix=prefix)
        self.rt.envelope.record_retrieval(0)
        self._emit({"op": "scan", "layer": layer.value, "prefix": key_text(prefix), "cut": cut,
                    "n": len(rows), "via": via})
        return rows

    def search(self, query: str, k: int, *, via: Optional[str] = None) -> list[tuple[bytes, float]]:
        """Similarity search; every hit is cited as a semantic premise."""
        cut, via = self._cut_for(Layer.SEMANTIC, b"\x00search", via)
        hits = self.rt.engine.similarity_search(cut, self.rt.engine.embed(query), k)
        now = self.rt.clock.now()
        for key, _ in hits:
            self.premises.append(PremiseRef(Layer.SEMANTIC, key, cut, now, PremiseKind.SEMANTIC))
        self.rt.envelope.record_retrieval(self.rt.engine.embedder.latency_bound_ms)
        self._emit({"op": "search", "layer": Layer.SEMANTIC.value, "query": query, "k": k, "cut": cut,
                    "hits": [key_text(key) for key, _ in hits], "via": via})
        return hits

    def cite(self, premise: PremiseRef) -> None:
        """Cite a premise the session did not retrieve itself."""
        self.premises.append(premise)

    def close(self) -> None:
        if not self.closed:
            self.rt.envelope.release_slot(self.slot)
            self.closed = True

    def decide(self, effects: Sequence[Effect], *, opaque: bool = False, shared_effects: bool = True,
               rationale: str = "") -> DecisionOutcome:
        rt = self.rt
        now = rt.clock.now()
        d = DecisionRecord(self.decision_id, self.agent, tuple(self.premises), now, tuple(effects),
                           opaque_context_declared=opaque, shared_effects=shared_effects, rationale=rationale)
        rt.recorder.emit(EventKind.DECISION, self.agent,
                         {"decision": d.to_dict(), "envelope": rt.gate_env.to_dict()})
        verdict = rt.gate.check_decision(d)
        rt.recorder.emit(EventKind.VERDICT, self.agent,
                         {"decision_id": d.decision_id, **verdict.to_dict(), "enforced": rt.enforce})
        rt.envelope.record_decision([now - p.retrieved_at for p in d.premises], verdict.violations)
        outcome = DecisionOutcome(d, verdict)
        # A snapshot session writes at its own snapshot so that first-committer
        # wins protects what it read; the other policies write blind.
        snapshot = self.cut if self.policy == "snapshot" and rt.composed is None else None
        tx = rt.kernel.begin_tx(actor=self.agent, decision_id=d.decision_id, snapshot=snapshot)
        try:
            apply_effects(rt.layers, tx, d)
            if rt.enforce:
                result = rt.gate.admit_and_commit(d, tx, verdict)
                outcome.cut = result if isinstance(result, int) else None
            else:
                log_external_effects(rt.layers, tx, d)
                outcome.cut = rt.kernel.commit_tx(tx)
        except (WriteConflict, TransitionRejected) as exc:
            if tx.status.value == "open":
                rt.kernel.abort(tx, type(exc).__name__)
            outcome.error = type(exc).__name__
        finally:
            self.close()
        if outcome.committed:
            for e in d.effects:
                if e.kind == "external":
                    rt.recorder.emit(EventKind.EXTERNAL_ACTION, self.agent,
                                     {"decision_id": d.decision_id, "detail": e.detail, "cut": outcome.cut})
        rt.outcomes.append(outcome)
        return outcome


@dataclass
class Trace:
    """Result of one simulator run."""

    config: RunConfig
    events: list
    metrics: dict
    outcomes: dict
    runtime: Optional[Runtime] = field(default=None, repr=False, compare=False)

    def to_jsonl(self) -> str:
        return "".join(ev.to_json() + "\n" for ev in self.events)

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    def summary(self) -> dict:
        return {"config": self.config.to_dict(), "metrics": self.metrics, "outcomes": self.outcomes}

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2)
