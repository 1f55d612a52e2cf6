"""Episodic, semantic and state memory on top of the kernel.

* Episodic memory is append-only. A correction is a new episode that names
  the sequence number it corrects.
* Semantic memory is written only by registered, versioned transformations.
  The kernel refuses semantic writes that do not carry the authority token,
  and that token is only handed to :class:`TransformationRunner`.
* State memory changes through transactional transitions. Every committed
  state write is mirrored into the episodic layer as a ``state_transition``
  episode in the same commit, so replaying the episodic log rebuilds state.
"""

from __future__ import annotations

import base64
import json
import logging
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

from .errors import (
    TransitionRejected,
    UnauthorizedWrite,
    UnknownSourceEpisode,
    UnregisteredTransform,
)
from .kernel import (
    Bytesish,
    CutId,
    Kernel,
    Layer,
    Transaction,
    as_bytes,
    episode_key,
    episode_seq,
    read_episodic_log,
)
from .semantic import SemanticRecord, TransformRegistry, decode_record

log = logging.getLogger(__name__)

OBSERVATION = "observation"
CORRECTION = "correction"
STATE_TRANSITION = "state_transition"
EXTERNAL_ACTION = "external_action"

_ABSENT = object()


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass(frozen=True)
class Episode:
    seq: int
    observed_at: int
    source: str
    payload: bytes
    kind: str = OBSERVATION
    corrects: Optional[int] = None
    decision_id: Optional[str] = None

    def encode(self) -> bytes:
        """Stored form; the sequence number lives in the key, not the value."""
        obj = {
            "kind": self.kind,
            "observed_at": self.observed_at,
            "payload_b64": base64.b64encode(self.payload).decode("ascii"),
            "source": self.source,
        }
        if self.corrects is not None:
            obj["corrects"] = self.corrects
        if self.decision_id is not None:
            obj["decision_id"] = self.decision_id
        return _dumps(obj)

    @classmethod
    def decode(cls, seq: int, value: bytes) -> "Episode":
        obj = json.loads(value)
        return cls(
            seq=seq,
            observed_at=int(obj["observed_at"]),
            source=obj["source"],
            payload=base64.b64decode(obj["payload_b64"]),
            kind=obj.get("kind", OBSERVATION),
            corrects=obj.get("corrects"),
            decision_id=obj.get("decision_id"),
        )

    @property
    def text(self) -> str:
        return self.payload.decode("utf-8", "replace")


@dataclass(frozen=True)
class StateEntry:
    key: bytes
    value: bytes
    updated_at_cut: CutId


@dataclass(frozen=True)
class TransformLogEntry:
    transform_id: str
    version: int
    input_seqs: tuple[int, ...]
    output_keys: tuple[bytes, ...]
    committed_cut: CutId

    def to_json(self) -> str:
        return json.dumps(
            {
                "committed_cut": self.committed_cut,
                "input_seqs": list(self.input_seqs),
                "output_keys": [k.decode("utf-8", "surrogateescape") for k in self.output_keys],
                "transform_id": self.transform_id,
                "version": self.version,
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "TransformLogEntry":
        obj = json.loads(line)
        return cls(
            transform_id=obj["transform_id"],
            version=int(obj["version"]),
            input_seqs=tuple(obj["input_seqs"]),
            output_keys=tuple(k.encode("utf-8", "surrogateescape") for k in obj["output_keys"]),
            committed_cut=int(obj["committed_cut"]),
        )


def read_transform_log(path: Union[str, Path]) -> list[TransformLogEntry]:
    with open(path, encoding="utf-8") as fh:
        return [TransformLogEntry.from_json(line) for line in fh if line.strip()]


# (key, old value or None, new value or None) -> allowed?
Validator = Callable[[bytes, Optional[bytes], Optional[bytes]], bool]


class MemoryLayers:
    def __init__(self, kernel: Kernel, registry: TransformRegistry, *, record_transitions: bool = True):
        self.kernel = kernel
        self.registry = registry
        self._authority = object()
        self._validators: list[tuple[bytes, Validator, str]] = []
        kernel.require_authority(Layer.SEMANTIC, self._authority)
        kernel.add_commit_validator(self._validate_at_commit)
        if record_transitions:
            kernel.add_prepare_hook(self._record_transitions)

    # -- episodic -------------------------------------------------------------

    def append_episode(self, source: str, observed_at: int, payload: Bytesish, *,
                       kind: str = OBSERVATION, corrects: Optional[int] = None,
                       actor: Optional[str] = None) -> int:
        """Append and commit one episode; returns its sequence number."""
        tx = self.kernel.begin_tx(actor=actor or source)
        self.tx_append_episode(tx, source, observed_at, payload, kind=kind, corrects=corrects)
        self.kernel.commit_tx(tx)
        return tx.appended_seqs[0]

    def tx_append_episode(self, tx: Transaction, source: str, observed_at: int, payload: Bytesish, *,
                          kind: str = OBSERVATION, corrects: Optional[int] = None) -> int:
        if corrects is not None and self.kernel.read(tx.snapshot, Layer.EPISODIC, episode_key(corrects)) is None:
            raise UnknownSourceEpisode(f"corrected episode {corrects} does not exist at cut {tx.snapshot}")
        if corrects is not None and kind == OBSERVATION:
            kind = CORRECTION
        ep = Episode(0, observed_at, source, as_bytes(payload), kind, corrects, tx.decision_id)
        return self.kernel.tx_append(tx, ep.encode())

    def read_episode(self, cut: CutId, seq: int) -> Optional[Episode]:
        value = self.kernel.read(cut, Layer.EPISODIC, episode_key(seq))
        return Episode.decode(seq, value) if value is not None else None

    def episodes(self, cut: CutId, *, after: int = 0, kind: Optional[str] = None) -> list[Episode]:
        out = []
        start = episode_key(after + 1)
        for key, value in self.kernel.scan(cut, Layer.EPISODIC, prefix=b"ep:", start=start):
            seq = episode_seq(key)
            if seq is None:
                continue
            ep = Episode.decode(seq, value)
            if kind is None or ep.kind == kind:
                out.append(ep)
        return out

    def corrections_of(self, cut: CutId, seq: int) -> list[Episode]:
        return [ep for ep in self.episodes(cut) if ep.corrects == seq]

    # -- semantic ---------------------------------------------------------------

    def write_semantic(self, tx: Transaction, record: SemanticRecord, *, authority: object) -> None:
        if authority is not self._authority:
            raise UnauthorizedWrite("semantic memory is written only by the transformation runner")
        if not self.registry.is_registered(record.transform_id, record.transform_version):
            raise UnregisteredTransform(f"{record.transform_id} v{record.transform_version} is not registered")
        if not record.sources:
            raise UnknownSourceEpisode("a semantic record must cite at least one source episode")
        for seq in record.sources:
            if self.kernel.read(tx.snapshot, Layer.EPISODIC, episode_key(seq)) is None:
                raise UnknownSourceEpisode(f"source episode {seq} does not exist at cut {tx.snapshot}")
        self.kernel.tx_write(tx, Layer.SEMANTIC, record.key, record.encode(), authority=self._authority)

    def read_semantic(self, cut: CutId, key: Bytesish) -> Optional[SemanticRecord]:
        v = self.kernel.read_version(cut, Layer.SEMANTIC, key)
        if v is None or v.value is None:
            return None
        rec = decode_record(v.key, v.value)
        return replace(rec, produced_at_cut=v.valid_from) if rec is not None else None

    def runner(self, transform_log: Union[str, Path, None] = None) -> "TransformationRunner":
        return TransformationRunner(self, self._authority, transform_log)

    # -- state --------------------------------------------------------------------

    def register_validator(self, prefix: Bytesish, fn: Validator, name: str = "") -> None:
        self._validators.append((as_bytes(prefix), fn, name or getattr(fn, "__name__", "validator")))

    def _check_validators(self, key: bytes, old: Optional[bytes], new: Optional[bytes]) -> None:
        for prefix, fn, name in self._validators:
            if key.startswith(prefix) and not fn(key, old, new):
                raise TransitionRejected(f"{name} rejected {key!r}: {old!r} -> {new!r}")

    def update_state(self, tx: Transaction, key: Bytesish, value: Optional[Bytesish], *,
                     expect=_ABSENT) -> None:
        """Buffer a state transition.

        ``expect`` is either a predicate over the current value or the exact
        value the key must hold in the transaction's view (None = absent).
        """
        key = as_bytes(key)
        new = as_bytes(value) if value is not None else None
        current = self.kernel.tx_read(tx, Layer.STATE, key)
        if expect is not _ABSENT:
            ok = expect(current) if callable(expect) else current == (as_bytes(expect) if expect is not None else None)
            if not ok:
                raise TransitionRejected(f"precondition failed for {key!r} (current {current!r})")
        self._check_validators(key, current, new)
        self.kernel.tx_write(tx, Layer.STATE, key, new)

    def read_state(self, cut: CutId, key: Bytesish) -> Optional[StateEntry]:
        v = self.kernel.read_version(cut, Layer.STATE, key)
        if v is None or v.value is None:
            return None
        return StateEntry(v.key, v.value, v.valid_from)

    # -- kernel hooks -------------------------------------------------------------

    def _record_transitions(self, kernel: Kernel, tx: Transaction) -> None:
        for (layer, key), value in list(tx.write_set.items()):
            if layer is not Layer.STATE:
                continue
            payload = _dumps({
                "key": key.decode("utf-8", "surrogateescape"),
                "value_b64": base64.b64encode(value).decode("ascii") if value is not None else None,
            })
            ep = Episode(0, kernel.clock.now(), tx.actor or "kernel", payload, STATE_TRANSITION,
                         None, tx.decision_id)
            kernel.tx_append(tx, ep.encode())

    def _validate_at_commit(self, kernel: Kernel, tx: Transaction) -> None:
        if not self._validators:
            return
        latest = kernel.latest
        for (layer, key), value in tx.write_set.items():
            if layer is Layer.STATE:
                self._check_validators(key, kernel.read(latest, Layer.STATE, key), value)


@dataclass(frozen=True)
class TransformResult:
    cut: CutId
    records: tuple[SemanticRecord, ...]
    tx: Transaction


class TransformationRunner:
    """Runs registered transformations as ordinary transactions."""

    def __init__(self, layers: MemoryLayers, authority: object, transform_log: Union[str, Path, None] = None):
        self.layers = layers
        self._authority = authority
        self._log_path = Path(transform_log) if transform_log is not None else None
        self._log_lock = threading.Lock()
        if self._log_path is not None:
            self._log_path.touch()

    def run(self, transform_id: str, version: int, input_seqs: Iterable[int], *,
            actor: Optional[str] = None, record_log: bool = True) -> TransformResult:
        layers = self.layers
        t = layers.registry.get(transform_id, version)
        if t is None:
            raise UnregisteredTransform(f"{transform_id} v{version} is not registered")
        input_seqs = tuple(input_seqs)
        tx = layers.kernel.begin_tx(actor=actor or f"transform:{transform_id}")
        episodes = []
        for seq in input_seqs:
            ep = layers.read_episode(tx.snapshot, seq)
            if ep is None:
                layers.kernel.abort(tx, "unknown_source")
                raise UnknownSourceEpisode(f"input episode {seq} does not exist at cut {tx.snapshot}")
            episodes.append(ep)
        records = []
        for rec in t.fn(episodes):
            rec = replace(
                rec,
                key=as_bytes(rec.key),
                transform_id=t.id,
                transform_version=t.version,
                sources=tuple(rec.sources) or input_seqs,
                produced_at_cut=None,
            )
            try:
                layers.write_semantic(tx, rec, authority=self._authority)
            except Exception:
                layers.kernel.abort(tx, "rejected_record")
                raise
            records.append(rec)
        cut = layers.kernel.commit_tx(tx)
        if record_log and self._log_path is not None:
            entry = TransformLogEntry(t.id, t.version, input_seqs, tuple(r.key for r in records), cut)
            with self._log_lock, open(self._log_path, "a", encoding="utf-8") as fh:
                fh.write(entry.to_json() + "\n")
        log.debug("transform %s v%d committed %d record(s) at cut %d", t.id, t.version, len(records), cut)
        return TransformResult(cut, tuple(records), tx)


def rebuild(episodic_log: Union[str, Path], transform_log: Union[str, Path],
            registry: TransformRegistry) -> MemoryLayers:
    """Reconstruct all three layers from the episodic and transformation logs."""
    kernel = Kernel()
    kernel.restore_episodes(read_episodic_log(episodic_log))
    layers = MemoryLayers(kernel, registry, record_transitions=False)
    tx = kernel.begin_tx(actor="rebuild")
    for ep in layers.episodes(kernel.latest, kind=STATE_TRANSITION):
        obj = json.loads(ep.payload)
        value = base64.b64decode(obj["value_b64"]) if obj["value_b64"] is not None else None
        kernel.tx_write(tx, Layer.STATE, obj["key"].encode("utf-8", "surrogateescape"), value)
    kernel.commit_tx(tx)
    runner = layers.runner()
    for entry in read_transform_log(transform_log):
        runner.run(entry.transform_id, entry.version, entry.input_seqs, actor="rebuild", record_log=False)
    return layers
