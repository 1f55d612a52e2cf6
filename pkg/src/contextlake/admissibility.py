"""Decision admissibility: private premises, mixed cuts, stale premises and
implicit semantics.

:func:`evaluate` is the pure core; it is shared by the runtime gate and, with
a different ``lookup``, by the offline trace analyzer.
"""

from __future__ import annotations

import base64
import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from .envelope import EnvelopeConfig
from .kernel import CutId, Kernel, Layer, Transaction, as_bytes
from .layers import EXTERNAL_ACTION, MemoryLayers
from .semantic import TransformRegistry, decode_record


class Violation(str, enum.Enum):
    PRIVATE_PREMISE = "PrivatePremise"
    MIXED_CUT = "MixedCut"
    STALE_PREMISE = "StalePremise"
    IMPLICIT_SEMANTICS = "ImplicitSemantics"

    def __str__(self) -> str:
        return self.value


_ORDER = {v: i for i, v in enumerate(Violation)}


class PremiseKind(str, enum.Enum):
    BASE = "base"
    SEMANTIC = "semantic"


def _b64(b: Optional[bytes]) -> Optional[str]:
    return base64.b64encode(b).decode("ascii") if b is not None else None


def _unb64(s: Optional[str]) -> Optional[bytes]:
    return base64.b64decode(s) if s is not None else None


@dataclass(frozen=True)
class PremiseRef:
    """A store reference cited by a decision. ``layer=None`` marks context
    that lives only inside the agent."""

    layer: Optional[Layer]
    key: bytes
    cut: CutId
    retrieved_at: int
    kind: PremiseKind = PremiseKind.BASE

    def to_dict(self) -> dict:
        return {
            "layer": self.layer.value if self.layer is not None else None,
            "key": self.key.decode("utf-8", "surrogateescape"),
            "cut": self.cut,
            "retrieved_at": self.retrieved_at,
            "kind": self.kind.value,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PremiseRef":
        return cls(
            layer=Layer(obj["layer"]) if obj["layer"] is not None else None,
            key=obj["key"].encode("utf-8", "surrogateescape"),
            cut=int(obj["cut"]),
            retrieved_at=int(obj["retrieved_at"]),
            kind=PremiseKind(obj.get("kind", "base")),
        )


@dataclass(frozen=True)
class Effect:
    """An intended effect: a state write, an episode, or an external action."""

    kind: str  # "state" | "episode" | "external"
    key: Optional[bytes] = None
    value: Optional[bytes] = None
    detail: str = ""
    corrects: Optional[int] = None

    @classmethod
    def state(cls, key, value) -> "Effect":
        return cls("state", as_bytes(key), as_bytes(value) if value is not None else None)

    @classmethod
    def episode(cls, payload, corrects: Optional[int] = None) -> "Effect":
        return cls("episode", value=as_bytes(payload), corrects=corrects)

    @classmethod
    def external(cls, detail: str) -> "Effect":
        return cls("external", detail=detail)

    def to_dict(self) -> dict:
        obj: dict = {"kind": self.kind}
        if self.key is not None:
            obj["key"] = self.key.decode("utf-8", "surrogateescape")
        if self.kind != "external":
            obj["value_b64"] = _b64(self.value)
        if self.detail:
            obj["detail"] = self.detail
        if self.corrects is not None:
            obj["corrects"] = self.corrects
        return obj

    @classmethod
    def from_dict(cls, obj: dict) -> "Effect":
        key = obj.get("key")
        return cls(
            kind=obj["kind"],
            key=key.encode("utf-8", "surrogateescape") if key is not None else None,
            value=_unb64(obj.get("value_b64")),
            detail=obj.get("detail", ""),
            corrects=obj.get("corrects"),
        )


@dataclass(frozen=True)
class DecisionRecord:
    decision_id: str
    agent_id: str
    premises: tuple[PremiseRef, ...]
    decided_at: int
    effects: tuple[Effect, ...]
    opaque_context_declared: bool = False
    shared_effects: bool = True
    rationale: str = ""

    def __post_init__(self):
        object.__setattr__(self, "premises", tuple(self.premises))
        object.__setattr__(self, "effects", tuple(self.effects))
        if not self.effects:
            raise ValueError(f"decision {self.decision_id} has no effects")
        late = [p for p in self.premises if p.retrieved_at > self.decided_at]
        if late:
            raise ValueError(f"decision {self.decision_id} cites a premise retrieved after it was made")

    def to_dict(self) -> dict:
        return {
            "decision_id": self.decision_id,
            "agent_id": self.agent_id,
            "premises": [p.to_dict() for p in self.premises],
            "decided_at": self.decided_at,
            "effects": [e.to_dict() for e in self.effects],
            "opaque_context_declared": self.opaque_context_declared,
            "shared_effects": self.shared_effects,
            "rationale": self.rationale,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DecisionRecord":
        return cls(
            decision_id=obj["decision_id"],
            agent_id=obj["agent_id"],
            premises=tuple(PremiseRef.from_dict(p) for p in obj["premises"]),
            decided_at=int(obj["decided_at"]),
            effects=tuple(Effect.from_dict(e) for e in obj["effects"]),
            opaque_context_declared=bool(obj.get("opaque_context_declared", False)),
            shared_effects=bool(obj.get("shared_effects", True)),
            rationale=obj.get("rationale", ""),
        )


@dataclass(frozen=True)
class Verdict:
    admitted: bool
    violations: tuple[Violation, ...] = field(default=())

    @classmethod
    def of(cls, violations) -> "Verdict":
        vs = tuple(sorted(set(violations), key=_ORDER.__getitem__))
        return cls(admitted=not vs, violations=vs)

    def to_dict(self) -> dict:
        return {"admitted": self.admitted, "violations": [v.value for v in self.violations]}


# (layer, key, cut) -> value at that cut or None
Lookup = Callable[[Layer, bytes, CutId], Optional[bytes]]


def evaluate(d: DecisionRecord, env: EnvelopeConfig, latest: CutId, lookup: Lookup,
             is_registered: Optional[Callable[[str, int], bool]] = None) -> Verdict:
    """Compute the verdict for ``d``. Pure given ``lookup``.

    A premise is resolvable when it names a store layer and a committed cut;
    an absent key at a valid cut is a legitimate (negative) premise. A
    semantic premise must point into the semantic layer, and if a value is
    present there it must carry transform provenance (registered, when
    ``is_registered`` is supplied).
    """
    found = set()

    def resolvable(p: PremiseRef) -> bool:
        return p.layer is not None and 0 <= p.cut <= latest

    if d.shared_effects and (d.opaque_context_declared or not all(resolvable(p) for p in d.premises)):
        found.add(Violation.PRIVATE_PREMISE)
    if len({p.cut for p in d.premises}) >= 2:
        found.add(Violation.MIXED_CUT)
    if any(d.decided_at - p.retrieved_at >= env.delta_ms for p in d.premises):
        found.add(Violation.STALE_PREMISE)
    for p in d.premises:
        if p.kind is not PremiseKind.SEMANTIC:
            continue
        if p.layer is not Layer.SEMANTIC or not resolvable(p):
            found.add(Violation.IMPLICIT_SEMANTICS)
            continue
        value = lookup(p.layer, p.key, p.cut)
        if value is None:
            continue
        rec = decode_record(p.key, value)
        if rec is None or (is_registered is not None and not is_registered(rec.transform_id, rec.transform_version)):
            found.add(Violation.IMPLICIT_SEMANTICS)
    return Verdict.of(found)


class AdmissibilityGate:
    """Runtime gate in front of the kernel commit point."""

    def __init__(self, layers: MemoryLayers, env: EnvelopeConfig):
        self.layers = layers
        self.kernel: Kernel = layers.kernel
        self.registry: TransformRegistry = layers.registry
        self.env = env

    def check_decision(self, d: DecisionRecord, env: Optional[EnvelopeConfig] = None,
                       latest: Optional[CutId] = None) -> Verdict:
        env = env or self.env
        latest = self.kernel.latest if latest is None else latest
        lookup = lambda layer, key, cut: self.kernel.read(cut, layer, key)  # noqa: E731
        return evaluate(d, env, latest, lookup, self.registry.is_registered)

    def admit_and_commit(self, d: DecisionRecord, tx: Transaction,
                         verdict: Optional[Verdict] = None) -> Union[CutId, Verdict]:
        """Commit ``tx`` if ``d`` is admissible, else abort it and return the
        verdict. External-world effects are logged as episodes in the same
        commit. WriteConflict propagates from the kernel."""
        verdict = verdict or self.check_decision(d)
        if not verdict.admitted:
            self.kernel.abort(tx, "inadmissible")
            return verdict
        log_external_effects(self.layers, tx, d)
        return self.kernel.commit_tx(tx)


def log_external_effects(layers: MemoryLayers, tx: Transaction, d: DecisionRecord) -> None:
    for e in d.effects:
        if e.kind == "external":
            layers.tx_append_episode(tx, d.agent_id, d.decided_at, e.detail, kind=EXTERNAL_ACTION)


def apply_effects(layers: MemoryLayers, tx: Transaction, d: DecisionRecord) -> None:
    """Buffer the store effects of ``d`` (state writes and episodes) in ``tx``."""
    for e in d.effects:
        if e.kind == "state":
            layers.update_state(tx, e.key, e.value)
        elif e.kind == "episode":
            layers.tx_append_episode(tx, d.agent_id, d.decided_at, e.value, corrects=e.corrects)
        elif e.kind != "external":
            raise ValueError(f"unknown effect kind {e.kind!r}")
