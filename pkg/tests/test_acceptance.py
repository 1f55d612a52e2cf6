"""Acceptance criteria, one test each. Each prints a PASS/FAIL line, which is
also repeated in the pytest terminal summary."""

from __future__ import annotations

import random
import threading
import time

from contextlake.admissibility import Effect
from contextlake.analyzer import analyze, check_serializable
from contextlake.comparison import run_comparison
from contextlake.config import RunConfig
from contextlake.errors import TooManyTransactions, WriteConflict
from contextlake.kernel import Kernel, Layer
from contextlake.layers import MemoryLayers, rebuild
from contextlake.semantic import SemanticEngine, SemanticRecord, Transformation, TransformRegistry
from contextlake.sim import MATRIX_SYMPTOMS, Runtime, run_scenario, scenario_registry

from oracles import cosine_counts, embed_counts

S, E = Layer.STATE, Layer.EPISODIC
SEEDS = range(100)
LAG_GRID = list(range(0, 121, 20))


def test_warehouse_timeline_reproduced(criterion):
    expected = {"correction_visible_at": "14:23:18.310", "shipping_read_at": "14:23:18.350",
                "shipping_read_units": 1, "shipping_action": "escalate", "shipping_committed_at": "14:23:18.400"}
    off_timeline, invalid = [], 0
    for seed in SEEDS:
        out = run_scenario("warehouse", seed=seed).outcomes
        if any(out[k] != v for k, v in expected.items()):
            off_timeline.append(seed)
        invalid += out["invalid_commitments"]
    criterion(1, not off_timeline and invalid == 0,
              f"timeline .310/.350 (1 unit)/.400 on {len(SEEDS) - len(off_timeline)}/{len(SEEDS)} seeds, "
              f"{invalid} invalid commitments")


def test_composition_failure_witness(criterion):
    def failing_runs():
        return [s for s in SEEDS
                if run_scenario("warehouse", {"mode": "composed", "lags": {"replica": 60}}, seed=s)
                .outcomes["invalid_commitments"]]

    first, second = failing_runs(), failing_runs()
    report = run_comparison("warehouse", LAG_GRID, seeds=range(20))
    composed = report.totals("composed")
    series = [composed[lag] for lag in LAG_GRID]
    monotone = all(a <= b for a, b in zip(series, series[1:]))
    criterion(2, len(first) >= 1 and first == second and monotone and series[0] == 0,
              f"lag 60 invalid in {len(first)}/{len(SEEDS)} runs (repeatable: {first == second}); "
              f"violations over lag {LAG_GRID}: {series}")


def test_agent_silo_reproduced(criterion):
    silo = run_scenario("checkout", {"mode": "composed"}, seed=0)
    lake = run_scenario("checkout", seed=0)
    (d,) = [o.decision for o in lake.runtime.outcomes if o.decision.agent_id == "checkout"]
    cited = [p for p in d.premises if p.layer is Layer.SEMANTIC and p.key == b"behavior:A42" and p.kind.value == "semantic"]
    ok = (silo.outcomes["flagged_purchase_shipped"] and lake.outcomes["action"] == "hold" and bool(cited)
          and lake.runtime.outcomes[-1].committed)
    criterion(3, ok, f"composed -> {silo.outcomes['action']}, contextlake -> {lake.outcomes['action']} "
                     f"citing {[p.key.decode() for p in cited]}")


def test_failure_matrix(criterion):
    wrong = {}
    for degrade in ["none", *MATRIX_SYMPTOMS]:
        want = [MATRIX_SYMPTOMS[degrade]] if degrade != "none" else []
        bad = [s for s in range(20)
               if run_scenario("failure_matrix", {"params": {"degrade": degrade}}, seed=s).outcomes["symptoms"] != want]
        if bad:
            wrong[degrade] = bad
    criterion(4, not wrong, "each degraded configuration shows only its symptom, full shows none, 20 seeds each"
              if not wrong else f"mismatching seeds: {wrong}")


def _atomic_fuzz(n_tx: int, seed: int) -> tuple[list[str], int]:
    """Random 2-5 key transactions, several open at once, committed in random order."""
    rng = random.Random(seed)
    k = Kernel()
    keys = [f"k{i:03d}".encode() for i in range(200)]
    failures: list[str] = []
    committed: list[tuple[int, bytes, list[bytes]]] = []
    open_txs = []
    made = 0
    while made < n_tx or open_txs:
        if made < n_tx and (not open_txs or (len(open_txs) < 4 and rng.random() < 0.5)):
            tx = k.begin_tx()
            tag = str(made).encode()
            ks = rng.sample(keys, rng.randint(2, 5))
            for key in ks:
                k.tx_write(tx, S, key, tag)
            k.tx_append(tx, tag)
            open_txs.append((tx, tag, ks))
            made += 1
            continue
        tx, tag, ks = open_txs.pop(rng.randrange(len(open_txs)))
        before = k.latest
        try:
            cut = k.commit_tx(tx)
        except WriteConflict:
            if k.latest != before:
                failures.append(f"aborted tx {tag!r} moved the cut")
            continue
        if cut != before + 1:
            failures.append(f"cut {cut} after {before}")
        committed.append((cut, tag, ks))
    for cut, tag, ks in committed:
        at, prior = [k.read(cut, S, key) for key in ks], [k.read(cut - 1, S, key) for key in ks]
        if any(v != tag for v in at) or any(v == tag for v in prior):
            failures.append(f"partial visibility of {tag!r} at cut {cut}")
    for key in k.keys(E):
        if len(k.history(E, key)) != 1:
            failures.append(f"episodic {key!r} revised")
    return failures, len(committed)


def _thread_stress(workers: int, target: int) -> tuple[list[str], int]:
    k = Kernel()
    keys = [f"t{i:02d}".encode() for i in range(32)]
    lock = threading.Lock()
    done: list[tuple[int, bytes, list[bytes]]] = []
    failures: list[str] = []
    stop = threading.Event()

    def writer(wid: int):
        rng = random.Random(wid)
        i = 0
        while not stop.is_set():
            tag = f"{wid}:{i}".encode()
            i += 1
            tx = k.begin_tx()
            ks = rng.sample(keys, rng.randint(2, 5))
            for key in ks:
                k.tx_write(tx, S, key, tag)
            k.tx_append(tx, tag)
            try:
                cut = k.commit_tx(tx)
            except WriteConflict:
                continue
            with lock:
                done.append((cut, tag, ks))
                if len(done) >= target:
                    stop.set()

    def reader():
        rng = random.Random(99)
        while not stop.is_set():
            cut = k.latest
            ks = rng.sample(keys, 8)
            first = [k.read(cut, S, key) for key in ks]
            time.sleep(0)
            if [k.read(cut, S, key) for key in ks] != first:
                with lock:
                    failures.append(f"snapshot {cut} changed under a reader")

    threads = [threading.Thread(target=writer, args=(w,)) for w in range(workers)]
    threads += [threading.Thread(target=reader) for _ in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    cuts = sorted(c for c, _, _ in done)
    if cuts != list(range(1, len(cuts) + 1)):
        failures.append("commit cuts are not 1..N without gaps or repeats")
    for cut, tag, ks in done:
        if any(k.read(cut, S, key) != tag for key in ks) or any(k.read(cut - 1, S, key) == tag for key in ks):
            failures.append(f"partial visibility of {tag!r} at cut {cut}")
    for key in k.keys(E):
        if len(k.history(E, key)) != 1:
            failures.append(f"episodic {key!r} revised")
    return failures, len(done)


def test_kernel_invariants(criterion):
    # snapshot repeatability across later commits
    k = Kernel()
    tx = k.begin_tx()
    k.tx_write(tx, S, "a", "1")
    cut = k.commit_tx(tx)
    seen = k.scan(cut, S)
    for v in range(5):
        tx = k.begin_tx()
        k.tx_write(tx, S, "a", str(v))
        k.commit_tx(tx)
    repeatable = k.scan(cut, S) == seen
    sim_failures, sim_commits = _atomic_fuzz(10_000, seed=1)
    thread_failures, thread_commits = _thread_stress(workers=8, target=10_000)
    failures = sim_failures + thread_failures
    criterion(5, repeatable and not failures and thread_commits >= 10_000,
              f"simulated: 10000 txs ({sim_commits} committed), threaded: 8 workers, {thread_commits} commits, "
              f"{len(failures)} invariant failures")


def test_serializability_oracle(criterion):
    checked = failed = 0
    configs = [("warehouse", {}), ("warehouse", {"mode": "composed"}), ("checkout", {}),
               ("checkout", {"mode": "composed"}),
               ("load_sweep", {"max_concurrent": 1, "params": {"rounds": 2}}),
               ("load_sweep", {"max_concurrent": 2, "params": {"rounds": 1}})]
    for name, cfg in configs:
        for seed in range(30):
            try:
                ok = check_serializable(run_scenario(name, cfg, seed=seed).events)
            except TooManyTransactions:
                continue
            checked += 1
            failed += not ok
    criterion(6, checked > 0 and failed == 0, f"{checked} traces with <= 6 state commits, {failed} not serializable")


def test_envelope_boundaries(criterion):
    delta = 100
    verdicts = []
    for age in (delta - 1, delta):
        rt = Runtime(RunConfig("load_sweep", delta_ms=delta))
        rt.setup("t", {"a": "1"})
        s = rt.open("agent")
        s.read(S, "a")
        rt.clock.advance(age)
        verdicts.append(s.decide([Effect.state("b", "1")]).verdict)
    boundary = verdicts[0].admitted and [v.value for v in verdicts[1].violations] == ["StalePremise"]
    worst_peak, bad_admits = 0, 0
    for c in (1, 2, 4, 8):
        for seed in range(5):
            trace = run_scenario("load_sweep", {"max_concurrent": c}, seed=seed)
            worst_peak = max(worst_peak, trace.metrics["peak_in_flight"] - c)
            bad_admits += sum(1 for f in analyze(trace.events).decisions
                              if f.runtime_violations == [] and f.violations)
            bad_admits += trace.outcomes["admitted_with_violations"]
    criterion(7, boundary and worst_peak <= 0 and bad_admits == 0,
              f"age {delta - 1} admitted={verdicts[0].admitted}, age {delta} -> {[str(v) for v in verdicts[1].violations]}; "
              f"peak - C <= {worst_peak}, {bad_admits} admitted decisions with violations at 2C load")


def _corpus_engine(texts):
    k = Kernel()
    reg = TransformRegistry()
    reg.register(Transformation("identity", 1, lambda eps: [
        SemanticRecord(f"doc:{ep.seq:05d}".encode(), ep.payload, "", 0, (ep.seq,)) for ep in eps]))
    layers = MemoryLayers(k, reg, record_transitions=False)
    tx = k.begin_tx()
    for t in texts:
        layers.tx_append_episode(tx, "corpus", 0, t)
    k.commit_tx(tx)
    layers.runner().run("identity", 1, tx.appended_seqs)
    return SemanticEngine(k, reg)


def test_semantic_search_oracle(criterion):
    rng = random.Random(8)
    vocab = [f"w{i}" for i in range(40)]
    mismatches = ties = queries = 0
    for corpus_no in range(2):
        texts = [" ".join(rng.choices(vocab, k=rng.randint(1, 6))) for _ in range(1000)]
        engine = _corpus_engine(texts)
        vecs = [(f"doc:{i + 1:05d}".encode(), embed_counts(t)) for i, t in enumerate(texts)]
        for _ in range(100):
            query, k = " ".join(rng.choices(vocab, k=rng.randint(1, 3))), rng.choice([1, 5, 10, 50])
            q = embed_counts(query)
            scored = sorted(((key, cosine_counts(v, q)) for key, v in vecs), key=lambda kv: (-kv[1], kv[0]))
            got = engine.similarity_search(engine.kernel.latest, engine.embed(query), k)
            queries += 1
            mismatches += got != scored[:k]
            ties += len({s for _, s in scored[:k]}) < k
    criterion(8, mismatches == 0 and queries == 200,
              f"{queries} queries over two 1000-record corpora, {mismatches} mismatches, {ties} with tied scores in top-k")


def test_determinism(criterion, tmp_path):
    differing = []
    runs = [("warehouse", {}), ("warehouse", {"mode": "composed"}), ("checkout", {}),
            ("checkout", {"mode": "composed"}), ("load_sweep", {}),
            *[("failure_matrix", {"params": {"degrade": d}}) for d in ["none", *MATRIX_SYMPTOMS]]]
    for name, cfg in runs:
        for seed in (0, 7, 12345):
            blobs = []
            for attempt in range(2):
                d = tmp_path / f"{name}-{seed}-{attempt}"
                trace = run_scenario(name, cfg, seed=seed, workdir=d)
                trace.write(d / "trace.jsonl")
                blobs.append(tuple((d / f).read_bytes() for f in ("trace.jsonl", "episodic.jsonl", "transforms.jsonl")))
            if blobs[0] != blobs[1]:
                differing.append((name, cfg, seed))
    criterion(9, not differing, f"{len(runs) * 3} (scenario, config, seed) pairs run twice, "
                                f"{len(differing)} with differing trace or log bytes")


def test_rebuild_equivalence(criterion, tmp_path):
    differing = []
    runs = [("warehouse", {}), ("warehouse", {"mode": "composed"}), ("checkout", {}), ("load_sweep", {}),
            *[("failure_matrix", {"params": {"degrade": d}}) for d in ["none", *MATRIX_SYMPTOMS]]]
    for name, cfg in runs:
        d = tmp_path / name / str(len(differing))
        trace = run_scenario(name, cfg, seed=3, workdir=d)
        live = trace.runtime.kernel
        rebuilt = rebuild(d / "episodic.jsonl", d / "transforms.jsonl", scenario_registry(trace.config)).kernel
        for layer in (Layer.SEMANTIC, Layer.STATE):
            if rebuilt.layer_snapshot(rebuilt.latest, layer) != live.layer_snapshot(live.latest, layer):
                differing.append((name, cfg, layer.value))
    criterion(10, not differing, f"{len(runs)} runs rebuilt from episodic + transformation logs, "
                                 f"{len(differing)} layer mismatches")
