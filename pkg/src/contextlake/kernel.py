"""Multi-version context store.

Every commit produces a new cut id; cut ``k`` contains exactly the effects of
commits ``1..k``. Reads address a cut and never block. Transactions buffer
their writes invisibly, are staged by :meth:`Kernel.prepare` and become
visible all at once in :meth:`Kernel.commit`, which is the single
linearization point of the store. Write-write conflicts are resolved
first-committer-wins (snapshot isolation).

Keys and values are byte strings. By convention keys are UTF-8 text with a
layer-local namespace prefix, e.g. ``b"inv:SKU1"``.
"""

from __future__ import annotations

import base64
import enum
import itertools
import json
import threading
from bisect import bisect_left, bisect_right, insort
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Union

from .clock import Clock, SimClock
from .errors import (
    ContextLakeError,
    EpisodicRevision,
    TxClosed,
    UnauthorizedWrite,
    UnknownCut,
    WriteConflict,
)

CutId = int
Bytesish = Union[bytes, str]

EPISODE_PREFIX = b"ep:"


class Layer(str, enum.Enum):
    EPISODIC = "episodic"
    SEMANTIC = "semantic"
    STATE = "state"


class TxStatus(str, enum.Enum):
    OPEN = "open"
    PREPARED = "prepared"
    COMMITTED = "committed"
    ABORTED = "aborted"


def as_bytes(x: Bytesish) -> bytes:
    if isinstance(x, bytes):
        return x
    if isinstance(x, str):
        return x.encode("utf-8")
    raise TypeError(f"expected bytes or str, got {type(x).__name__}")


def episode_key(seq: int) -> bytes:
    """Key under which episode ``seq`` is stored; sorts in sequence order."""
    return EPISODE_PREFIX + b"%020d" % seq


def episode_seq(key: bytes) -> Optional[int]:
    if key.startswith(EPISODE_PREFIX) and key[3:].isdigit():
        return int(key[3:])
    return None


@dataclass(frozen=True)
class VersionedEntry:
    key: bytes
    value: Optional[bytes]  # None is a tombstone
    layer: Layer
    valid_from: CutId
    valid_to: Optional[CutId] = None

    @property
    def deleted(self) -> bool:
        return self.value is None


@dataclass(eq=False)
class Transaction:
    tx_id: int
    snapshot: CutId
    actor: Optional[str] = None
    decision_id: Optional[str] = None
    read_set: set = field(default_factory=set)
    # (layer, key) -> value or None (tombstone); insertion ordered
    write_set: dict = field(default_factory=dict)
    # episodic values whose sequence number is assigned at commit
    appends: list = field(default_factory=list)
    status: TxStatus = TxStatus.OPEN
    commit_cut: Optional[CutId] = None
    appended_seqs: list = field(default_factory=list)
    abort_reason: Optional[str] = None

    def writes(self) -> list[tuple[Layer, bytes, Optional[bytes]]]:
        return [(layer, key, value) for (layer, key), value in self.write_set.items()]


@dataclass(frozen=True)
class PrepareToken:
    tx: Transaction


@dataclass(frozen=True)
class EpisodicRecord:
    """One line of the episodic JSONL log."""

    seq: int
    time_ms: int
    key: bytes
    value: bytes

    def to_json(self) -> str:
        return json.dumps(
            {
                "seq": self.seq,
                "time_ms": self.time_ms,
                "key": self.key.decode("utf-8", "surrogateescape"),
                "value_b64": base64.b64encode(self.value).decode("ascii"),
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "EpisodicRecord":
        obj = json.loads(line)
        return cls(
            seq=int(obj["seq"]),
            time_ms=int(obj["time_ms"]),
            key=obj["key"].encode("utf-8", "surrogateescape"),
            value=base64.b64decode(obj["value_b64"], validate=True),
        )


def read_episodic_log(path: Union[str, Path]) -> list[EpisodicRecord]:
    with open(path, encoding="utf-8") as fh:
        return [EpisodicRecord.from_json(line) for line in fh if line.strip()]


# (event, transaction) where event is "prepare", "commit" or "abort"
Listener = Callable[[str, Transaction], None]
PrepareHook = Callable[["Kernel", Transaction], None]
CommitValidator = Callable[["Kernel", Transaction], None]


class Kernel:
    """In-memory multi-version store with an optional file-backed episodic log."""

    def __init__(self, clock: Optional[Clock] = None, episodic_log: Union[str, Path, None] = None):
        self.clock = clock if clock is not None else SimClock()
        self._lock = threading.Lock()
        self._latest: CutId = 0
        self._commit_times: list[int] = []  # index i holds the commit time of cut i + 1
        # (layer, key) -> list of (valid_from, value); only ever appended to
        self._chains: dict[tuple[Layer, bytes], list[tuple[int, Optional[bytes]]]] = {}
        self._keys: dict[Layer, list[bytes]] = {layer: [] for layer in Layer}
        self._episodic_seq = 0
        self._tx_ids = itertools.count(1)
        self._prepared: dict[int, Transaction] = {}
        self._listeners: list[Listener] = []
        self._prepare_hooks: list[PrepareHook] = []
        self._validators: list[CommitValidator] = []
        self._authorities: dict[Layer, object] = {}
        self._log_path = Path(episodic_log) if episodic_log is not None else None
        if self._log_path is not None:
            self._log_path.touch()

    # -- configuration ---------------------------------------------------

    def subscribe(self, listener: Listener) -> None:
        self._listeners.append(listener)

    def add_prepare_hook(self, hook: PrepareHook) -> None:
        self._prepare_hooks.append(hook)

    def add_commit_validator(self, validator: CommitValidator) -> None:
        """Register a check run at the commit point; raising aborts the tx."""
        self._validators.append(validator)

    def require_authority(self, layer: Layer, token: object) -> None:
        """After this, writes to ``layer`` must present ``token``."""
        if layer is Layer.EPISODIC:
            raise ValueError("the episodic layer is append-only and takes no authority")
        self._authorities[layer] = token

    # -- snapshots and reads --------------------------------------------

    @property
    def latest(self) -> CutId:
        return self._latest

    def begin_snapshot(self) -> CutId:
        return self._latest

    def commit_time(self, cut: CutId) -> Optional[int]:
        if cut <= 0 or cut > len(self._commit_times):
            return None
        return self._commit_times[cut - 1]

    def cut_at(self, time_ms: int) -> CutId:
        """Latest cut whose commit time is <= ``time_ms`` (0 if none)."""
        times = self._commit_times[: self._latest]
        return bisect_right(times, time_ms)

    def _check_cut(self, cut: CutId) -> None:
        if not isinstance(cut, int) or cut < 0 or cut > self._latest:
            raise UnknownCut(f"cut {cut} is not committed (latest is {self._latest})")

    def _version_at(self, layer: Layer, key: bytes, cut: CutId):
        chain = self._chains.get((layer, key))
        if not chain:
            return None
        i = bisect_right(chain, cut, key=lambda v: v[0]) - 1
        if i < 0:
            return None
        return i, chain

    def read(self, cut: CutId, layer: Layer, key: Bytesish) -> Optional[bytes]:
        self._check_cut(cut)
        found = self._version_at(Layer(layer), as_bytes(key), cut)
        if found is None:
            return None
        i, chain = found
        return chain[i][1]

    def read_version(self, cut: CutId, layer: Layer, key: Bytesish) -> Optional[VersionedEntry]:
        """The version visible at ``cut`` (tombstones included), or None."""
        self._check_cut(cut)
        layer, key = Layer(layer), as_bytes(key)
        found = self._version_at(layer, key, cut)
        if found is None:
            return None
        i, chain = found
        valid_from, value = chain[i]
        valid_to = chain[i + 1][0] if i + 1 < len(chain) and chain[i + 1][0] <= self._latest else None
        return VersionedEntry(key, value, layer, valid_from, valid_to)

    def history(self, layer: Layer, key: Bytesish) -> list[VersionedEntry]:
        layer, key = Layer(layer), as_bytes(key)
        latest = self._latest
        chain = [v for v in self._chains.get((layer, key), []) if v[0] <= latest]
        out = []
        for i, (start, value) in enumerate(chain):
            end = chain[i + 1][0] if i + 1 < len(chain) else None
            out.append(VersionedEntry(key, value, layer, start, end))
        return out

    def scan(
        self,
        cut: CutId,
        layer: Layer,
        prefix: Bytesish = b"",
        start: Optional[Bytesish] = None,
        end: Optional[Bytesish] = None,
        predicate: Optional[Callable[[bytes, bytes], bool]] = None,
    ) -> list[tuple[bytes, bytes]]:
        """Live (key, value) pairs at ``cut`` in key order.

        ``start`` is inclusive and ``end`` exclusive; ``predicate`` sees the
        value as of ``cut``.
        """
        self._check_cut(cut)
        layer = Layer(layer)
        prefix = as_bytes(prefix)
        lo = as_bytes(start) if start is not None else prefix
        hi = as_bytes(end) if end is not None else None
        keys = list(self._keys[layer])  # list() of a list is atomic under the GIL
        out = []
        for key in keys[bisect_left(keys, lo):]:
            if hi is not None and key >= hi:
                break
            if not key.startswith(prefix):
                if key > prefix:
                    break
                continue
            value = self.read(cut, layer, key)
            if value is None:
                continue
            if predicate is not None and not predicate(key, value):
                continue
            out.append((key, value))
        return out

    def keys(self, layer: Layer) -> list[bytes]:
        return list(self._keys[Layer(layer)])

    def layer_snapshot(self, cut: CutId, layer: Layer) -> dict[bytes, bytes]:
        return dict(self.scan(cut, layer))

    # -- transactions -----------------------------------------------------

    def begin_tx(self, actor: Optional[str] = None, decision_id: Optional[str] = None,
                 snapshot: Optional[CutId] = None) -> Transaction:
        if snapshot is None:
            snapshot = self._latest
        else:
            self._check_cut(snapshot)
        return Transaction(tx_id=next(self._tx_ids), snapshot=snapshot, actor=actor, decision_id=decision_id)

    @staticmethod
    def _require_open(tx: Transaction) -> None:
        if tx.status is not TxStatus.OPEN:
            raise TxClosed(f"transaction {tx.tx_id} is {tx.status.value}")

    def tx_read(self, tx: Transaction, layer: Layer, key: Bytesish) -> Optional[bytes]:
        self._require_open(tx)
        layer, key = Layer(layer), as_bytes(key)
        tx.read_set.add((layer, key))
        if (layer, key) in tx.write_set:
            return tx.write_set[(layer, key)]
        return self.read(tx.snapshot, layer, key)

    def tx_write(self, tx: Transaction, layer: Layer, key: Bytesish, value: Optional[Bytesish],
                 *, authority: object = None) -> None:
        """Buffer a write; ``value=None`` is a tombstone."""
        self._require_open(tx)
        layer, key = Layer(layer), as_bytes(key)
        if value is not None:
            value = as_bytes(value)
        if layer is Layer.EPISODIC:
            if value is None:
                raise EpisodicRevision(f"episodic entry {key!r} cannot be deleted")
            if (layer, key) in tx.write_set or self._chains.get((layer, key)):
                raise EpisodicRevision(f"episodic entry {key!r} already exists")
            if key.startswith(EPISODE_PREFIX):
                raise ValueError("the ep: namespace is reserved for appended episodes; use tx_append")
        else:
            required = self._authorities.get(layer)
            if required is not None and authority is not required:
                raise UnauthorizedWrite(f"writes to the {layer.value} layer require its authority token")
        tx.write_set[(layer, key)] = value

    def tx_delete(self, tx: Transaction, layer: Layer, key: Bytesish, *, authority: object = None) -> None:
        self.tx_write(tx, layer, key, None, authority=authority)

    def tx_append(self, tx: Transaction, value: Bytesish) -> int:
        """Buffer a new episode; its sequence number is assigned at commit.

        Returns the index of the append within the transaction, which maps
        to ``tx.appended_seqs[index]`` after commit.
        """
        self._require_open(tx)
        tx.appends.append(as_bytes(value))
        return len(tx.appends) - 1

    def prepare(self, tx: Transaction) -> PrepareToken:
        self._require_open(tx)
        for hook in self._prepare_hooks:
            hook(self, tx)
        with self._lock:
            self._require_open(tx)
            tx.status = TxStatus.PREPARED
            self._prepared[tx.tx_id] = tx
            self._notify("prepare", tx)
        return PrepareToken(tx)

    def commit(self, token: PrepareToken) -> CutId:
        tx = token.tx
        with self._lock:
            if tx.status is not TxStatus.PREPARED:
                raise TxClosed(f"transaction {tx.tx_id} is {tx.status.value}, not prepared")
            conflicts = [
                (layer, key)
                for (layer, key) in tx.write_set
                if layer is not Layer.EPISODIC and self._last_start(layer, key) > tx.snapshot
            ]
            if conflicts:
                self._abort_locked(tx, "write_conflict")
                raise WriteConflict(
                    f"transaction {tx.tx_id}: {len(conflicts)} key(s) committed since snapshot {tx.snapshot}",
                    conflicts,
                )
            for (layer, key) in tx.write_set:
                if layer is Layer.EPISODIC and self._chains.get((layer, key)):
                    self._abort_locked(tx, "episodic_revision")
                    raise EpisodicRevision(f"episodic entry {key!r} already exists")
            for validator in self._validators:
                try:
                    validator(self, tx)
                except ContextLakeError as exc:
                    self._abort_locked(tx, type(exc).__name__)
                    raise
            cut = self._latest + 1
            now = self.clock.now()
            records = []
            for (layer, key), value in tx.write_set.items():
                self._install(layer, key, value, cut)
                if layer is Layer.EPISODIC:
                    self._episodic_seq += 1
                    records.append(EpisodicRecord(self._episodic_seq, now, key, value))
            tx.appended_seqs = []
            for value in tx.appends:
                self._episodic_seq += 1
                key = episode_key(self._episodic_seq)
                self._install(Layer.EPISODIC, key, value, cut)
                tx.appended_seqs.append(self._episodic_seq)
                records.append(EpisodicRecord(self._episodic_seq, now, key, value))
            self._commit_times.append(now)
            self._latest = cut  # publish: readers may now address the new cut
            tx.status = TxStatus.COMMITTED
            tx.commit_cut = cut
            self._prepared.pop(tx.tx_id, None)
            if records and self._log_path is not None:
                with open(self._log_path, "a", encoding="utf-8") as fh:
                    fh.writelines(r.to_json() + "\n" for r in records)
            self._notify("commit", tx)
            return cut

    def abort(self, target: Union[PrepareToken, Transaction], reason: str = "aborted") -> None:
        tx = target.tx if isinstance(target, PrepareToken) else target
        with self._lock:
            if tx.status in (TxStatus.COMMITTED, TxStatus.ABORTED):
                raise TxClosed(f"transaction {tx.tx_id} is {tx.status.value}")
            self._abort_locked(tx, reason)

    def commit_tx(self, tx: Transaction) -> CutId:
        """prepare + commit in one call."""
        return self.commit(self.prepare(tx))

    def prepared(self) -> list[Transaction]:
        return list(self._prepared.values())

    def _abort_locked(self, tx: Transaction, reason: str) -> None:
        tx.status = TxStatus.ABORTED
        tx.abort_reason = reason
        self._prepared.pop(tx.tx_id, None)
        self._notify("abort", tx)

    def _last_start(self, layer: Layer, key: bytes) -> CutId:
        chain = self._chains.get((layer, key))
        return chain[-1][0] if chain else 0

    def _install(self, layer: Layer, key: bytes, value: Optional[bytes], cut: CutId) -> None:
        chain = self._chains.get((layer, key))
        if chain is None:
            self._chains[(layer, key)] = [(cut, value)]
            insort(self._keys[layer], key)
        else:
            chain.append((cut, value))

    def _notify(self, event: str, tx: Transaction) -> None:
        for listener in self._listeners:
            listener(event, tx)

    # -- episodic log -------------------------------------------------------

    def restore_episodes(self, records: Iterable[EpisodicRecord]) -> CutId:
        """Install logged episodes verbatim in one commit (used for rebuilds)."""
        records = sorted(records, key=lambda r: r.seq)
        with self._lock:
            cut = self._latest + 1
            for r in records:
                if self._chains.get((Layer.EPISODIC, r.key)):
                    raise EpisodicRevision(f"episodic entry {r.key!r} already exists")
                self._install(Layer.EPISODIC, r.key, r.value, cut)
                self._episodic_seq = max(self._episodic_seq, r.seq)
            self._commit_times.append(self.clock.now())
            self._latest = cut
            return cut

    def episodic_records(self) -> Iterator[tuple[bytes, bytes]]:
        cut = self._latest
        yield from self.scan(cut, Layer.EPISODIC)
