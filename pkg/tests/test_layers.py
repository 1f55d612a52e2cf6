from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contextlake.clock import SimClock
from contextlake.errors import (
    TransitionRejected,
    UnauthorizedWrite,
    UnknownSourceEpisode,
    UnregisteredTransform,
    WriteConflict,
)
from contextlake.kernel import Kernel, Layer
from contextlake.layers import (
    CORRECTION,
    STATE_TRANSITION,
    MemoryLayers,
    read_transform_log,
    rebuild,
)
from contextlake.semantic import SemanticRecord, Transformation, TransformRegistry


def upper(episodes):
    return [SemanticRecord(f"sem:{ep.seq}".encode(), ep.payload.upper(), "", 0, (ep.seq,)) for ep in episodes]


def lower_v2(episodes):
    return [SemanticRecord(f"sem:{ep.seq}".encode(), b"v2 " + ep.payload.lower(), "", 0, (ep.seq,)) for ep in episodes]


@pytest.fixture
def lake(tmp_path):
    clock = SimClock(1_000)
    kernel = Kernel(clock, episodic_log=tmp_path / "episodic.jsonl")
    registry = TransformRegistry()
    registry.register(Transformation("case", 1, upper))
    layers = MemoryLayers(kernel, registry)
    return layers, layers.runner(tmp_path / "transforms.jsonl"), tmp_path


def test_append_episode_assigns_consecutive_seqs(lake):
    layers, _, _ = lake
    assert layers.append_episode("feed", 1, b"a") == 1
    assert layers.append_episode("feed", 2, b"b") == 2
    ep = layers.read_episode(layers.kernel.latest, 2)
    assert (ep.seq, ep.source, ep.observed_at, ep.payload) == (2, "feed", 2, b"b")


def test_corrections_are_new_episodes(lake):
    layers, _, _ = lake
    k = layers.kernel
    seq = layers.append_episode("restocking", 300, b"return SKU1 restocked")
    cut_before = k.latest
    fix = layers.append_episode("restocking", 310, b"return SKU1 defective", corrects=seq)
    assert layers.read_episode(k.latest, fix).kind == CORRECTION
    assert [ep.seq for ep in layers.corrections_of(k.latest, seq)] == [fix]
    for cut in range(cut_before, k.latest + 1):
        assert layers.read_episode(cut, seq).payload == b"return SKU1 restocked"
    with pytest.raises(UnknownSourceEpisode):
        layers.append_episode("x", 0, b"?", corrects=999)


def test_semantic_layer_requires_authority_and_registration(lake):
    layers, runner, _ = lake
    k = layers.kernel
    seq = layers.append_episode("feed", 1, b"hello")
    rec = SemanticRecord(b"sem:x", b"HELLO", "case", 1, (seq,))
    tx = k.begin_tx()
    with pytest.raises(UnauthorizedWrite):
        k.tx_write(tx, Layer.SEMANTIC, "sem:x", rec.encode())
    with pytest.raises(UnauthorizedWrite):
        layers.write_semantic(tx, rec, authority=object())
    with pytest.raises(UnregisteredTransform):
        runner.run("adhoc", 1, [seq])
    with pytest.raises(UnknownSourceEpisode):
        runner.run("case", 1, [seq, 42])
    assert k.scan(k.latest, Layer.SEMANTIC) == []


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["direct", "forged", "bad-sources", "no-sources", "unregistered"]), st.binary(max_size=8))
def test_every_bypass_of_the_runner_is_rejected(path, payload):
    kernel = Kernel()
    registry = TransformRegistry()
    registry.register(Transformation("case", 1, upper))
    layers = MemoryLayers(kernel, registry)
    seq = layers.append_episode("feed", 0, b"x")
    tx = kernel.begin_tx()
    rec = SemanticRecord(b"sem:1", payload, "case", 1, (seq,))
    with pytest.raises((UnauthorizedWrite, UnknownSourceEpisode, UnregisteredTransform)):
        if path == "direct":
            kernel.tx_write(tx, Layer.SEMANTIC, b"sem:1", payload)
        elif path == "forged":
            layers.write_semantic(tx, rec, authority=None)
        elif path == "bad-sources":
            layers.runner().run("case", 1, [seq + 5])
        elif path == "no-sources":
            layers.write_semantic(tx, SemanticRecord(b"sem:1", payload, "case", 1, ()), authority=layers._authority)
        else:
            layers.write_semantic(tx, SemanticRecord(b"sem:1", payload, "nope", 1, (seq,)), authority=layers._authority)
    assert kernel.scan(kernel.latest, Layer.SEMANTIC) == []


def test_runner_writes_provenance_and_logs(lake):
    layers, runner, tmp = lake
    seqs = [layers.append_episode("feed", i, f"item {i}".encode()) for i in range(2)]
    result = runner.run("case", 1, seqs)
    rec = layers.read_semantic(layers.kernel.latest, "sem:1")
    assert (rec.interpretation, rec.transform_id, rec.transform_version, rec.sources) == (b"ITEM 0", "case", 1, (1,))
    assert rec.produced_at_cut == result.cut
    (entry,) = read_transform_log(tmp / "transforms.jsonl")
    assert (entry.transform_id, entry.version, entry.input_seqs, entry.committed_cut) == ("case", 1, (1, 2), result.cut)
    assert json.loads((tmp / "transforms.jsonl").read_text()).keys() == {
        "transform_id", "version", "input_seqs", "output_keys", "committed_cut"}


def test_new_version_supersedes_without_touching_episodes(lake):
    layers, runner, _ = lake
    k = layers.kernel
    seq = layers.append_episode("feed", 0, b"Mixed Case")
    v1 = runner.run("case", 1, [seq]).cut
    episodes_before = k.layer_snapshot(k.latest, Layer.EPISODIC)
    layers.registry.register(Transformation("case", 2, lower_v2))
    v2 = runner.run("case", 2, [seq]).cut
    assert layers.read_semantic(v1, "sem:1").transform_version == 1
    assert layers.read_semantic(v2, "sem:1").interpretation == b"v2 mixed case"
    after = k.layer_snapshot(k.latest, Layer.EPISODIC)
    assert {key: v for key, v in after.items() if key in episodes_before} == episodes_before


def test_update_state_transitions_and_validation(lake):
    layers, _, _ = lake
    k = layers.kernel
    layers.register_validator("inv:", lambda key, old, new: new is None or int(new) >= 0, "no negative")
    tx = k.begin_tx()
    layers.update_state(tx, "inv:SKU1", "2")
    k.commit_tx(tx)
    tx = k.begin_tx()
    layers.update_state(tx, "inv:SKU1", "1", expect="2")
    k.commit_tx(tx)
    assert layers.read_state(k.latest, "inv:SKU1").value == b"1"
    tx = k.begin_tx()
    with pytest.raises(TransitionRejected):
        layers.update_state(tx, "inv:SKU1", "-1", expect=lambda v: int(v) >= 2)
    with pytest.raises(TransitionRejected):
        layers.update_state(tx, "inv:SKU1", "-1")


def test_racing_state_transitions_keep_the_first():
    k = Kernel()
    layers = MemoryLayers(k, TransformRegistry())
    layers.register_validator("inv:", lambda key, old, new: new is None or int(new) >= 0)
    layers.register_validator("inv:", lambda key, old, new: old is None or new is None or int(new) <= int(old))
    tx = k.begin_tx()
    layers.update_state(tx, "inv:A", "5")
    k.commit_tx(tx)
    slow = k.begin_tx()
    layers.update_state(slow, "inv:A", "4")  # 5 -> 4 is fine at its snapshot
    fast = k.begin_tx()
    layers.update_state(fast, "inv:A", "3")
    k.commit_tx(fast)
    with pytest.raises(WriteConflict):
        k.commit_tx(slow)
    assert layers.read_state(k.latest, "inv:A").value == b"3"


def test_state_writes_leave_transition_episodes(lake):
    layers, _, _ = lake
    k = layers.kernel
    tx = k.begin_tx(actor="agent")
    layers.update_state(tx, "a", "1")
    k.commit_tx(tx)
    (ep,) = layers.episodes(k.latest, kind=STATE_TRANSITION)
    assert json.loads(ep.payload) == {"key": "a", "value_b64": "MQ=="}


def test_rebuild_reproduces_semantic_and_state(lake):
    layers, runner, tmp = lake
    k = layers.kernel
    seqs = [layers.append_episode("feed", i, f"obs {i}".encode()) for i in range(3)]
    runner.run("case", 1, seqs[:2])
    for i, v in enumerate(["1", "2", None]):
        tx = k.begin_tx()
        layers.update_state(tx, f"s:{i % 2}", v)
        k.commit_tx(tx)
    layers.registry.register(Transformation("case", 2, lower_v2))
    runner.run("case", 2, seqs[1:])
    rebuilt = rebuild(tmp / "episodic.jsonl", tmp / "transforms.jsonl", layers.registry)
    rk = rebuilt.kernel
    for layer in Layer:
        assert rk.layer_snapshot(rk.latest, layer) == k.layer_snapshot(k.latest, layer)
