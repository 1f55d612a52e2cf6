from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contextlake.admissibility import (
    AdmissibilityGate,
    DecisionRecord,
    Effect,
    PremiseKind,
    PremiseRef,
    Verdict,
    Violation,
    apply_effects,
    evaluate,
)
from contextlake.clock import SimClock
from contextlake.envelope import EnvelopeConfig
from contextlake.errors import WriteConflict
from contextlake.kernel import Kernel, Layer
from contextlake.layers import MemoryLayers
from contextlake.semantic import SemanticRecord, Transformation, TransformRegistry

ENV = EnvelopeConfig(delta_ms=100, max_concurrent=4)
SHIP = (Effect.external("ship O1"),)


def premise(cut=1, at=0, layer=Layer.STATE, key=b"inv:SKU1", kind=PremiseKind.BASE):
    return PremiseRef(layer, key, cut, at, kind)


def decision(*premises, at=0, **kw):
    return DecisionRecord("d1", "shipping", premises, at, kw.pop("effects", SHIP), **kw)


def no_lookup(layer, key, cut):
    return None


def codes(d, latest=5, lookup=no_lookup, env=ENV, registered=None):
    return set(evaluate(d, env, latest, lookup, registered).violations)


def test_clean_decision_is_admitted():
    assert evaluate(decision(premise(), premise(key=b"order:O1")), ENV, 5, no_lookup) == Verdict(True, ())


def test_staleness_boundary():
    assert codes(decision(premise(at=0), at=99)) == set()
    assert codes(decision(premise(at=0), at=100)) == {Violation.STALE_PREMISE}


def test_premises_from_two_cuts_are_mixed():
    d = decision(premise(cut=4), premise(cut=5, key=b"order:O1"))
    assert codes(d) == {Violation.MIXED_CUT}


def test_private_premises():
    assert codes(decision(premise(), opaque_context_declared=True)) == {Violation.PRIVATE_PREMISE}
    assert codes(decision(premise(layer=None))) == {Violation.PRIVATE_PREMISE}
    assert codes(decision(premise(cut=9))) == {Violation.PRIVATE_PREMISE}
    # private reasoning is fine when nothing is shared
    assert codes(decision(premise(), opaque_context_declared=True, shared_effects=False)) == set()


def test_implicit_semantics():
    raw = premise(layer=Layer.EPISODIC, key=b"ep:1", kind=PremiseKind.SEMANTIC)
    assert codes(decision(raw)) == {Violation.IMPLICIT_SEMANTICS}
    rec = SemanticRecord(b"behavior:A42", b"x", "behavior_patterns", 1, (1,)).encode()
    sem = premise(layer=Layer.SEMANTIC, key=b"behavior:A42", kind=PremiseKind.SEMANTIC)
    assert codes(decision(sem), lookup=lambda *a: rec, registered=lambda t, v: True) == set()
    assert codes(decision(sem), lookup=lambda *a: rec, registered=lambda t, v: v == 2) == {
        Violation.IMPLICIT_SEMANTICS}
    assert codes(decision(sem), lookup=lambda *a: b"no provenance") == {Violation.IMPLICIT_SEMANTICS}
    # nothing at that key yet: a legitimate negative premise
    assert codes(decision(sem)) == set()


def test_verdict_order_is_canonical():
    d = decision(premise(cut=4, at=0, layer=None), premise(cut=5, at=0), at=500)
    assert evaluate(d, ENV, 5, no_lookup).violations == (
        Violation.PRIVATE_PREMISE, Violation.MIXED_CUT, Violation.STALE_PREMISE)


def test_decision_round_trips_through_dict():
    d = decision(premise(kind=PremiseKind.SEMANTIC, layer=Layer.SEMANTIC),
                 effects=(Effect.state("inv:SKU1", "1"), Effect.episode(b"\xffraw", corrects=3), Effect.external("x")),
                 rationale="because")
    assert DecisionRecord.from_dict(d.to_dict()) == d
    with pytest.raises(ValueError):
        decision(premise(at=10), at=5)
    with pytest.raises(ValueError):
        decision(premise(), effects=())


premise_st = st.builds(PremiseRef, st.sampled_from([Layer.STATE, Layer.SEMANTIC, Layer.EPISODIC, None]),
                       st.sampled_from([b"a", b"b"]), st.integers(0, 7), st.integers(0, 500),
                       st.sampled_from(list(PremiseKind)))


@settings(max_examples=200, deadline=None)
@given(st.lists(premise_st, max_size=4), st.integers(500, 900), st.integers(1, 600), st.integers(1, 600),
       st.booleans(), st.booleans())
def test_gate_is_pure_and_monotone_in_delta(premises, at, d1, d2, opaque, shared):
    d = DecisionRecord("d", "a", premises, at, SHIP, opaque_context_declared=opaque, shared_effects=shared)
    lo, hi = sorted((d1, d2))
    tight = evaluate(d, EnvelopeConfig(lo, 4), 5, no_lookup)
    loose = evaluate(d, EnvelopeConfig(hi, 4), 5, no_lookup)
    assert tight == evaluate(d, EnvelopeConfig(lo, 4), 5, no_lookup)
    assert loose.admitted or not tight.admitted
    assert set(loose.violations) <= set(tight.violations)


@pytest.fixture
def gate():
    clock = SimClock(0)
    kernel = Kernel(clock)
    registry = TransformRegistry()
    registry.register(Transformation("t", 1, lambda eps: []))
    layers = MemoryLayers(kernel, registry)
    tx = kernel.begin_tx()
    layers.update_state(tx, "inv:SKU1", "2")
    kernel.commit_tx(tx)
    return AdmissibilityGate(layers, ENV), clock


def test_rejected_decision_leaves_store_untouched(gate):
    g, clock = gate
    k = g.kernel
    before = (k.latest, {layer: k.layer_snapshot(k.latest, layer) for layer in Layer})
    clock.advance_to(200)
    d = DecisionRecord("d", "shipping", (premise(cut=1, at=0),), 200, (Effect.state("inv:SKU1", "1"),) + SHIP)
    tx = k.begin_tx()
    apply_effects(g.layers, tx, d)
    verdict = g.admit_and_commit(d, tx)
    assert verdict == Verdict(False, (Violation.STALE_PREMISE,))
    assert (k.latest, {layer: k.layer_snapshot(k.latest, layer) for layer in Layer}) == before
    assert g.check_decision(d) == verdict  # no side effects from checking


def test_admitted_decision_commits_effects_and_logs_action(gate):
    g, clock = gate
    k = g.kernel
    clock.advance_to(50)
    d = DecisionRecord("d", "shipping", (premise(cut=1, at=40),), 50, (Effect.state("inv:SKU1", "1"),) + SHIP)
    tx = k.begin_tx(snapshot=1)
    apply_effects(g.layers, tx, d)
    cut = g.admit_and_commit(d, tx)
    assert cut == k.latest and k.read(cut, Layer.STATE, "inv:SKU1") == b"1"
    assert [ep.payload for ep in g.layers.episodes(cut, kind="external_action")] == [b"ship O1"]


def test_admitted_decisions_still_race_on_commit(gate):
    g, _ = gate
    k = g.kernel
    txs = []
    for v in ("1", "0"):
        d = DecisionRecord("d" + v, "a", (premise(cut=1),), 0, (Effect.state("inv:SKU1", v),))
        tx = k.begin_tx(snapshot=1)
        apply_effects(g.layers, tx, d)
        txs.append((d, tx))
    assert isinstance(g.admit_and_commit(*txs[0]), int)
    with pytest.raises(WriteConflict):
        g.admit_and_commit(*txs[1])
    assert k.read(k.latest, Layer.STATE, "inv:SKU1") == b"1"
