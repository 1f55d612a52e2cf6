"""Trace events and their JSONL encoding.

One JSON object per line::

    {"actor": ..., "kind": ..., "payload": {...}, "seq": n, "time_ms": t}

Keys are sorted and separators compact so that identical runs produce
byte-identical files.
"""

from __future__ import annotations

import base64
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

from .errors import ParseError
from .kernel import Kernel, Layer, Transaction, episode_key


class EventKind(str, enum.Enum):
    RETRIEVAL = "retrieval"
    DECISION = "decision"
    VERDICT = "verdict"
    PREPARE = "prepare"
    COMMIT = "commit"
    ABORT = "abort"
    EXTERNAL_ACTION = "external_action"


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    kind: EventKind
    time_ms: int
    actor: str
    payload: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"seq": self.seq, "kind": self.kind.value, "time_ms": self.time_ms,
             "actor": self.actor, "payload": self.payload},
            sort_keys=True,
            separators=(",", ":"),
        )


def b64(value: Optional[bytes]) -> Optional[str]:
    return base64.b64encode(value).decode("ascii") if value is not None else None


def unb64(text: Optional[str]) -> Optional[bytes]:
    return base64.b64decode(text) if text is not None else None


def key_text(key: bytes) -> str:
    return key.decode("utf-8", "surrogateescape")


class TraceRecorder:
    """Collects trace events; subscribe it to a kernel to capture tx events."""

    def __init__(self, clock):
        self.clock = clock
        self.events: list[TraceEvent] = []

    def emit(self, kind: EventKind, actor: str, payload: dict) -> TraceEvent:
        ev = TraceEvent(len(self.events) + 1, EventKind(kind), self.clock.now(), actor, payload)
        self.events.append(ev)
        return ev

    def attach(self, kernel: Kernel) -> None:
        kernel.subscribe(self._on_tx)

    def _on_tx(self, event: str, tx: Transaction) -> None:
        actor = tx.actor or "kernel"
        base = {"tx_id": tx.tx_id, "snapshot": tx.snapshot, "decision_id": tx.decision_id}
        if event == "prepare":
            self.emit(EventKind.PREPARE, actor, {**base, "n_writes": len(tx.write_set) + len(tx.appends)})
        elif event == "abort":
            self.emit(EventKind.ABORT, actor, {**base, "reason": tx.abort_reason})
        elif event == "commit":
            writes = [
                {"layer": layer.value, "key": key_text(key), "value_b64": b64(value)}
                for (layer, key), value in tx.write_set.items()
            ]
            writes += [
                {"layer": Layer.EPISODIC.value, "key": key_text(episode_key(seq)), "value_b64": b64(value)}
                for seq, value in zip(tx.appended_seqs, tx.appends)
            ]
            self.emit(EventKind.COMMIT, actor, {**base, "cut": tx.commit_cut, "writes": writes})

    def to_jsonl(self) -> str:
        return "".join(ev.to_json() + "\n" for ev in self.events)


def parse_event(line: str, lineno: int) -> TraceEvent:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object", lineno)
    try:
        kind = EventKind(obj["kind"])
        ev = TraceEvent(int(obj["seq"]), kind, int(obj["time_ms"]), str(obj["actor"]), obj.get("payload") or {})
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"malformed event ({exc})", lineno) from None
    if not isinstance(ev.payload, dict):
        raise ParseError("payload must be an object", lineno)
    return ev


def load_trace(source: Union[str, Path, Iterable[str]]) -> list[TraceEvent]:
    """Parse a trace from a path or an iterable of lines."""
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    else:
        lines = list(source)
    return [parse_event(line, i) for i, line in enumerate(lines, 1) if line.strip()]
