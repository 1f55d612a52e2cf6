"""Offline trace checker.

Rebuilds the version history from commit events alone, recomputes every
decision verdict, and audits the history itself:

* gate integrity: recomputed verdict vs. the verdict recorded at runtime
* outcome audit (``InvalidOutcome``): a decision took effect although one of
  its premises no longer held in the store when its commit landed
* history anomalies: a transaction visible at more than one cut
  (non-atomic visibility), reads that disagree with the history,
  non-monotone cuts, revised episodes, first-committer-wins violations,
  external actions without a committed effect episode, and (for small
  histories) failure of brute-force serial equivalence
"""

from __future__ import annotations

import itertools
import json
from bisect import bisect_right
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

from .admissibility import DecisionRecord, Verdict, Violation, evaluate
from .envelope import EnvelopeConfig
from .errors import ParseError, TooManyTransactions
from .kernel import Layer
from .trace import EventKind, TraceEvent, load_trace, unb64

INVALID_OUTCOME = "InvalidOutcome"
CODES = [v.value for v in Violation] + [INVALID_OUTCOME]
MAX_SERIAL_TX = 6

TraceSource = Union[str, Path, Iterable[str], list[TraceEvent]]


@dataclass
class DecisionFinding:
    decision_id: str
    agent_id: str
    violations: list[str]
    runtime_violations: Optional[list[str]] = None
    took_effect: bool = False

    def to_dict(self) -> dict:
        return {
            "decision_id": self.decision_id,
            "agent_id": self.agent_id,
            "violations": list(self.violations),
            "runtime_violations": self.runtime_violations,
            "took_effect": self.took_effect,
        }


@dataclass
class ViolationReport:
    decisions: list[DecisionFinding] = field(default_factory=list)
    history_anomalies: list[dict] = field(default_factory=list)
    gate_mismatches: list[dict] = field(default_factory=list)

    @property
    def violations_by_code(self) -> dict[str, int]:
        counts = {code: 0 for code in CODES}
        for f in self.decisions:
            for v in f.violations:
                counts[v] += 1
        return counts

    @property
    def total_violations(self) -> int:
        return sum(self.violations_by_code.values()) + len(self.history_anomalies) + len(self.gate_mismatches)

    @property
    def clean(self) -> bool:
        return self.total_violations == 0

    def summary(self) -> dict:
        return {
            "decisions": len(self.decisions),
            "admitted": sum(1 for f in self.decisions if not _admission_codes(f.violations)),
            "violations_by_code": self.violations_by_code,
            "history_anomalies": len(self.history_anomalies),
            "gate_mismatches": len(self.gate_mismatches),
            "total_violations": self.total_violations,
        }

    def to_dict(self) -> dict:
        return {
            "summary": self.summary(),
            "details": [f.to_dict() for f in self.decisions if f.violations],
            "history_anomalies": list(self.history_anomalies),
            "gate_mismatches": list(self.gate_mismatches),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _admission_codes(violations: list[str]) -> list[str]:
    return [v for v in violations if v != INVALID_OUTCOME]


class _History:
    """Version history reconstructed from commit events."""

    def __init__(self):
        self.chains: dict[tuple[Layer, bytes], list[tuple[int, Optional[bytes]]]] = defaultdict(list)
        self.latest = 0

    def apply(self, cut: int, layer: Layer, key: bytes, value: Optional[bytes]) -> None:
        chain = self.chains[(layer, key)]
        chain.append((cut, value))
        if len(chain) > 1 and chain[-2][0] > cut:
            chain.sort(key=lambda v: v[0])
        self.latest = max(self.latest, cut)

    def read(self, layer: Layer, key: bytes, cut: int) -> Optional[bytes]:
        chain = self.chains.get((layer, key))
        if not chain:
            return None
        i = bisect_right([c for c, _ in chain], cut) - 1
        return chain[i][1] if i >= 0 else None


def _events(source: TraceSource) -> list[TraceEvent]:
    if isinstance(source, list) and (not source or isinstance(source[0], TraceEvent)):
        return source
    return load_trace(source)


def _writes(ev: TraceEvent) -> list[tuple[Layer, bytes, Optional[bytes]]]:
    try:
        return [
            (Layer(w["layer"]), w["key"].encode("utf-8", "surrogateescape"), unb64(w["value_b64"]))
            for w in ev.payload["writes"]
        ]
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"malformed commit payload ({exc})", ev.seq) from None


def analyze(source: TraceSource) -> ViolationReport:
    events = _events(source)
    report = ViolationReport()
    hist = _History()
    findings: dict[str, DecisionFinding] = {}
    decisions: dict[str, DecisionRecord] = {}
    recomputed: dict[str, Verdict] = {}
    tx_cut: dict[int, int] = {}
    committed_decisions: dict[str, int] = {}
    effect_episodes: dict[str, int] = defaultdict(int)
    tx_meta: list[tuple[int, int, int, set]] = []  # (tx_id, snapshot, cut, keys)

    def anomaly(kind: str, ev: TraceEvent, **detail) -> None:
        report.history_anomalies.append({"anomaly": kind, "seq": ev.seq, **detail})

    for ev in events:
        p = ev.payload
        if ev.kind is EventKind.COMMIT:
            cut, tx_id = p.get("cut"), p.get("tx_id")
            if not isinstance(cut, int):
                raise ParseError("commit without an integer cut", ev.seq)
            if tx_id in tx_cut and tx_cut[tx_id] != cut:
                anomaly("non-atomic visibility", ev, tx_id=tx_id, cuts=sorted({tx_cut[tx_id], cut}))
            elif cut <= hist.latest:
                anomaly("non-monotone cut", ev, tx_id=tx_id, cut=cut, latest=hist.latest)
            tx_cut.setdefault(tx_id, cut)
            keys = set()
            for layer, key, value in _writes(ev):
                if layer is Layer.EPISODIC and hist.chains.get((layer, key)):
                    anomaly("episodic revision", ev, key=key.decode("utf-8", "replace"))
                if layer is Layer.EPISODIC and value is not None and p.get("decision_id"):
                    try:
                        if json.loads(value).get("kind") == "external_action":
                            effect_episodes[p["decision_id"]] += 1
                    except ValueError:
                        pass
                hist.apply(cut, layer, key, value)
                if layer is not Layer.EPISODIC:
                    keys.add((layer, key))
            tx_meta.append((tx_id, p.get("snapshot", cut - 1), cut, keys))
            did = p.get("decision_id")
            if did is not None and did in decisions:
                committed_decisions[did] = cut
                f = findings[did]
                f.took_effect = True
                d = decisions[did]
                for prem in d.premises:
                    if prem.layer is None:
                        continue
                    if hist.read(prem.layer, prem.key, prem.cut) != hist.read(prem.layer, prem.key, cut - 1):
                        f.violations.append(INVALID_OUTCOME)
                        break
        elif ev.kind is EventKind.RETRIEVAL and p.get("op", "read") == "read":
            try:
                layer = Layer(p["layer"])
                key = p["key"].encode("utf-8", "surrogateescape")
                cut = int(p["cut"])
            except (KeyError, ValueError, TypeError) as exc:
                raise ParseError(f"malformed retrieval payload ({exc})", ev.seq) from None
            if cut > hist.latest:
                anomaly("read of uncommitted cut", ev, key=p["key"], cut=cut)
            elif unb64(p.get("value_b64")) != hist.read(layer, key, cut):
                anomaly("inconsistent read", ev, key=p["key"], cut=cut)
        elif ev.kind is EventKind.DECISION:
            try:
                d = DecisionRecord.from_dict(p["decision"])
                env = EnvelopeConfig(**p["envelope"])
            except (KeyError, ValueError, TypeError) as exc:
                raise ParseError(f"malformed decision payload ({exc})", ev.seq) from None
            v = evaluate(d, env, hist.latest, lambda layer, key, cut: hist.read(layer, key, cut))
            decisions[d.decision_id] = d
            recomputed[d.decision_id] = v
            findings[d.decision_id] = DecisionFinding(d.decision_id, d.agent_id, [x.value for x in v.violations])
        elif ev.kind is EventKind.VERDICT:
            did = p.get("decision_id")
            runtime = list(p.get("violations", []))
            if did not in findings:
                report.gate_mismatches.append({"decision_id": did, "seq": ev.seq, "reason": "verdict without decision"})
                continue
            findings[did].runtime_violations = runtime
            if sorted(runtime) != sorted(x.value for x in recomputed[did].violations):
                report.gate_mismatches.append({
                    "decision_id": did,
                    "seq": ev.seq,
                    "runtime": runtime,
                    "recomputed": [x.value for x in recomputed[did].violations],
                })
        elif ev.kind is EventKind.EXTERNAL_ACTION:
            did = p.get("decision_id")
            if did not in committed_decisions or effect_episodes[did] == 0:
                anomaly("external action without committed effect", ev, decision_id=did)
            else:
                effect_episodes[did] -= 1

    # first-committer-wins: no two committed writers of a key may overlap
    last_writer: dict[tuple, tuple[int, int]] = {}
    for tx_id, snapshot, cut, keys in sorted(tx_meta, key=lambda m: m[2]):
        for k in keys:
            prev = last_writer.get(k)
            if prev is not None and prev[1] > snapshot and prev[0] != tx_id:
                report.history_anomalies.append({
                    "anomaly": "lost update", "tx_id": tx_id, "other_tx_id": prev[0],
                    "key": k[1].decode("utf-8", "replace"),
                })
            last_writer[k] = (tx_id, cut)

    try:
        if not check_serializable(events):
            report.history_anomalies.append({"anomaly": "non-serializable"})
    except TooManyTransactions:
        pass  # only the structural checks above apply to larger histories

    report.decisions = list(findings.values())
    return report


def _state_transactions(events: list[TraceEvent]):
    """Committed state-layer transactions as {tx_id: {key: value}}, plus the
    final state obtained by applying every commit event in cut order."""
    per_tx: dict[int, dict[bytes, Optional[bytes]]] = {}
    applied = []
    for ev in events:
        if ev.kind is not EventKind.COMMIT:
            continue
        for layer, key, value in _writes(ev):
            if layer is Layer.STATE:
                per_tx.setdefault(ev.payload["tx_id"], {})[key] = value
                applied.append((ev.payload["cut"], ev.seq, key, value))
    final: dict[bytes, Optional[bytes]] = {}
    for _, _, key, value in sorted(applied, key=lambda a: (a[0], a[1])):
        final[key] = value
    return per_tx, {k: v for k, v in final.items() if v is not None}


def check_serializable(trace: TraceSource, max_tx: int = MAX_SERIAL_TX) -> bool:
    """True iff the final state layer equals the result of running the
    committed state-layer transactions one at a time in some order."""
    if max_tx > MAX_SERIAL_TX:
        raise ValueError(f"max_tx is capped at {MAX_SERIAL_TX}")
    per_tx, final = _state_transactions(_events(trace))
    if len(per_tx) > max_tx:
        raise TooManyTransactions(f"{len(per_tx)} state-layer transactions exceed the limit of {max_tx}")
    txs = list(per_tx.values())
    for order in itertools.permutations(txs):
        state: dict[bytes, Optional[bytes]] = {}
        for writes in order:
            state.update(writes)
        if {k: v for k, v in state.items() if v is not None} == final:
            return True
    return not txs and not final
