"""Scripted scenarios.

warehouse       restocking, inventory and shipping agents around one
                defective return (all times relative to 14:23:18.000)
checkout        a behavior agent interprets a clickstream; the checkout agent
                holds the order if a risk pattern is visible to it
load_sweep      bursts of synthetic deciders against the concurrency envelope
failure_matrix  the same quoting workload with one guarantee removed at a time

Agent thresholds and think times other than the warehouse order quantity
are constructions of this simulator, not measured values.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Callable, Optional, Union

from ..admissibility import Effect, PremiseKind, Violation
from ..analyzer import INVALID_OUTCOME, analyze
from ..composed import LagKind, LagPolicy
from ..config import RunConfig
from ..errors import InvalidConfig
from ..kernel import Layer, episode_key, episode_seq
from ..layers import CORRECTION, Episode
from ..semantic import HashEmbedder, SemanticRecord, Transformation, TransformRegistry, nearest_label
from .engine import Runtime, Session, Trace

STATE, SEMANTIC, EPISODIC = Layer.STATE, Layer.SEMANTIC, Layer.EPISODIC

WAREHOUSE_T0 = 51_798_000  # 14:23:18.000 as milliseconds since midnight

CHECKOUT_PROTOTYPES = {
    "direct-arrival-no-browse": "direct arrival on checkout url purchase without browsing product pages",
    "browse-then-buy": "browsed many product pages compared items then added to cart and purchased",
    "returning-customer-search": "returning customer searched catalog by keyword and reordered previous item",
}
RISK_LABELS = ("direct-arrival-no-browse",)
INTENT_PROTOTYPES = {
    "bulk-purchase": "customer wants a quote for a bulk purchase of many units",
    "price-check": "customer is only checking the current price",
}

# default lag (ms) for the subsystem each sweep varies
DEFAULT_LAGS = {"warehouse": {"replica": 60}, "checkout": {"lakehouse": 60_000}}
SWEEP_KEY = {"warehouse": "replica", "checkout": "lakehouse"}


def clock_text(ms: int) -> str:
    """Milliseconds since midnight as ``HH:MM:SS.mmm``."""
    s, milli = divmod(ms, 1000)
    m, s = divmod(s, 60)
    h, m = divmod(m, 60)
    return f"{h:02d}:{m:02d}:{s:02d}.{milli:03d}"


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _non_negative(key: bytes, old: Optional[bytes], new: Optional[bytes]) -> bool:
    return new is None or int(new) >= 0


def _subsystems(cfg: RunConfig, layout: dict[str, tuple[Layer, LagKind, int]]):
    unknown = sorted(set(cfg.lags) - set(layout))
    if unknown:
        raise InvalidConfig(f"unknown subsystem(s) in lags: {', '.join(unknown)} (have {', '.join(sorted(layout))})")
    return {
        name: (layer, LagPolicy(kind, cfg.lags.get(name, default)))
        for name, (layer, kind, default) in layout.items()
    }


def _param_int(cfg: RunConfig, name: str, default: int, minimum: int = 0) -> int:
    try:
        v = int(cfg.params.get(name, default))
    except (TypeError, ValueError):
        raise InvalidConfig(f"param {name!r} must be an integer") from None
    if v < minimum:
        raise InvalidConfig(f"param {name!r} must be >= {minimum}")
    return v


def _burst_think(in_flight: int, cfg: RunConfig) -> int:
    """Think time grows with load: in-flight n takes n*delta/(C+1) ms, which
    stays inside the window for n <= C and reaches it at n = 2C."""
    return in_flight * cfg.delta_ms // (cfg.max_concurrent + 1)


# -- warehouse ----------------------------------------------------------------------


def _warehouse(cfg: RunConfig, workdir) -> Trace:
    t0 = WAREHOUSE_T0
    composed = cfg.mode == "composed"
    subsystems = _subsystems(cfg, {
        "primary": (STATE, LagKind.REPLICA_LAG, 0),
        "replica": (STATE, LagKind.REPLICA_LAG, DEFAULT_LAGS["warehouse"]["replica"]),
        "events": (EPISODIC, LagKind.REPLICA_LAG, 0),
    })
    rt = Runtime(cfg, start_ms=t0, workdir=workdir,
                 subsystems=subsystems if composed else None,
                 default_via={STATE: "primary", EPISODIC: "events"})
    rt.layers.register_validator("inv:", _non_negative, "no negative inventory")
    qty = _param_int(cfg, "order_qty", 2, 1)
    stock = _param_int(cfg, "initial_stock", 2)
    order = {"order": "O1", "qty": qty, "sku": "SKU1", "status": "pending"}
    (return_seq,) = rt.setup("warehouse", {"inv:SKU1": str(stock), "order:O1": _dumps(order)},
                             ["return received SKU1 1 unit restocked"])
    sched, rng = rt.schedule, rt.rng

    # unrelated sensor readings before the incident window
    for _ in range(rng.randint(0, 3)):
        t, reading = t0 + rng.randint(1, 290), f"aisle 4 temperature {rng.randint(15, 25)}"
        sched.at(t, "sensor", "reading", lambda r=reading: rt.layers.append_episode("sensor", rt.clock.now(), r))

    def restocking():
        s = rt.open("restocking")
        if s is None:
            return
        s.read(STATE, "inv:SKU1")
        s.read(EPISODIC, episode_key(return_seq))
        s.decide([Effect.episode("return unit defective SKU1 not sellable", corrects=return_seq)],
                 rationale="returned unit failed inspection")

    def inventory():
        s = rt.open("inventory")
        if s is None:
            return
        found = [
            Episode.decode(episode_seq(k), v) for k, v in s.scan(EPISODIC, "ep:")
            if episode_seq(k) is not None
        ]
        corrections = [ep for ep in found if ep.kind == CORRECTION and b"SKU1" in ep.payload]
        if not corrections:
            s.close()
            return
        for ep in corrections:
            s.read(EPISODIC, episode_key(ep.seq))
        units = int(s.read(STATE, "inv:SKU1"))
        s.decide([Effect.state("inv:SKU1", str(units - len(corrections)))],
                 rationale=f"{len(corrections)} restocked unit(s) found defective")

    ship: dict = {}

    def shipping_read():
        s = rt.open("shipping")
        if s is None:
            return
        ship["session"] = s
        ship["order"] = json.loads(s.read(STATE, "order:O1"))
        ship["available"] = int(s.read(STATE, "inv:SKU1", via="replica") or 0)
        ship["read_at"] = rt.clock.now()

    def shipping_decide():
        s: Optional[Session] = ship.get("session")
        if s is None:
            return
        o, available = ship["order"], ship["available"]
        if available < o["qty"]:
            ship["action"] = "escalate"
            effects = [
                Effect.state("escalation:O1", _dumps({"available": available, "needed": o["qty"], "order": "O1"})),
                Effect.state("order:O1", _dumps({**o, "status": "escalated"})),
                Effect.external(f"escalate O1 for split shipment approval ({available}/{o['qty']} units)"),
            ]
        else:
            ship["action"] = "ship"
            effects = [
                Effect.state("inv:SKU1", str(available - o["qty"])),
                Effect.state("order:O1", _dumps({**o, "status": "committed"})),
                Effect.external(f"ship O1 ({o['qty']} x SKU1)"),
            ]
        ship["outcome"] = s.decide(effects, rationale=f"{available} unit(s) available")

    sched.at(t0 + 300, "restocking", "inspect return", restocking)
    sched.at(t0 + 310, "inventory", "apply corrections", inventory)
    sched.at(t0 + 350, "shipping", "read order", shipping_read)
    sched.at(t0 + 400, "shipping", "decide", shipping_decide)
    sched.run()

    k = rt.kernel
    invalid = 0
    for out in rt.outcomes:
        if out.committed and out.decision.agent_id == "shipping" and ship.get("action") == "ship":
            if int(k.read(out.cut - 1, STATE, "inv:SKU1")) < qty:
                invalid += 1
    inv_out = next((o for o in rt.outcomes if o.decision.agent_id == "inventory"), None)
    ship_out = ship.get("outcome")
    outcomes = {
        "decisions": len(rt.outcomes),
        "invalid_commitments": invalid,
        "shipping_action": ship.get("action"),
        "shipping_read_units": ship.get("available"),
        "shipping_read_at": clock_text(ship["read_at"]) if "read_at" in ship else None,
        "correction_visible_at": clock_text(k.commit_time(inv_out.cut)) if inv_out and inv_out.committed else None,
        "shipping_committed_at": clock_text(k.commit_time(ship_out.cut)) if ship_out and ship_out.committed else None,
        "final_inventory": dict(sorted((key.decode(), v.decode()) for key, v in k.scan(k.latest, STATE, prefix=b"inv:"))),
    }
    return _finish(rt, outcomes)


# -- checkout -----------------------------------------------------------------------


def behavior_transform(prototypes: dict[str, str], version: int = 1) -> Transformation:
    """Summarise each account's clickstream and label it with the nearest pattern."""
    embedder = HashEmbedder()
    prototypes = dict(prototypes)

    def fn(episodes: list[Episode]) -> list[SemanticRecord]:
        by_account: dict[str, list[Episode]] = {}
        for ep in episodes:
            by_account.setdefault(json.loads(ep.payload)["account"], []).append(ep)
        out = []
        for account in sorted(by_account):
            eps = by_account[account]
            summary = " ".join(json.loads(ep.payload)["event"] for ep in eps)
            label = nearest_label(embedder, summary, prototypes)
            out.append(SemanticRecord(f"behavior:{account}".encode(), f"{label}: {summary}".encode(),
                                      "behavior_patterns", version, tuple(ep.seq for ep in eps)))
        return out

    return Transformation("behavior_patterns", version, fn, "clickstream -> behavior pattern family")


NOISE_CLICKS = [
    ["browsed many product pages", "compared items", "added to cart and purchased"],
    ["returning customer searched catalog by keyword", "reordered previous item"],
]


def _checkout(cfg: RunConfig, workdir) -> Trace:
    composed = cfg.mode == "composed"
    subsystems = _subsystems(cfg, {
        "operational": (STATE, LagKind.REPLICA_LAG, 0),
        "lakehouse": (SEMANTIC, LagKind.BATCH_REFRESH, DEFAULT_LAGS["checkout"]["lakehouse"]),
        "events": (EPISODIC, LagKind.REPLICA_LAG, 0),
    })
    rt = Runtime(cfg, start_ms=0, workdir=workdir, subsystems=subsystems if composed else None,
                 default_via={STATE: "operational", SEMANTIC: "lakehouse", EPISODIC: "events"})
    prototypes = cfg.params.get("prototypes", CHECKOUT_PROTOTYPES)
    if not isinstance(prototypes, dict) or not prototypes:
        raise InvalidConfig("param 'prototypes' must be a non-empty object")
    rt.engine.load_prototypes(prototypes)
    registry_add(rt.registry, "checkout", cfg)
    order = {"account": "A42", "item": "laptop", "order": "C1", "status": "pending"}
    rt.setup("checkout", {"account:A42": _dumps({"account": "A42", "since": "2023"}), "order:C1": _dumps(order)})
    sched, rng = rt.schedule, rt.rng
    seqs: list[int] = []

    def click(account: str, event: str):
        def go():
            seqs.append(rt.layers.append_episode("clickstream", rt.clock.now(),
                                                 _dumps({"account": account, "event": event})))
        return go

    sched.at(10, "clickstream", "click", click("A42", "session arrived directly at checkout url"))
    sched.at(20, "clickstream", "click", click("A42", "no product page views purchase completed without browsing"))
    for i in range(rng.randint(1, 3)):
        account, pattern = f"B{rng.randint(100, 999)}{i}", rng.choice(NOISE_CLICKS)
        for event in pattern:
            sched.at(rng.randint(1, 25), "clickstream", "click", click(account, event))

    sched.at(30, "behavior", "interpret", lambda: rt.runner.run("behavior_patterns", 1, sorted(seqs),
                                                                 actor="behavior"))
    checkout: dict = {}

    def checkout_read():
        s = rt.open("checkout")
        if s is None:
            return
        checkout["session"] = s
        s.read(STATE, "account:A42")
        checkout["order"] = json.loads(s.read(STATE, "order:C1"))
        checkout["behavior"] = s.read(SEMANTIC, "behavior:A42", kind=PremiseKind.SEMANTIC)

    def checkout_decide():
        s = checkout.get("session")
        if s is None:
            return
        o, raw = checkout["order"], checkout["behavior"]
        label = json.loads(raw)["interpretation"].split(":", 1)[0] if raw is not None else None
        checkout["label"] = label
        if label in RISK_LABELS:
            checkout["action"] = "hold"
            effects = [Effect.state("order:C1", _dumps({**o, "status": "held_for_review"})),
                       Effect.external("hold C1 for manual review")]
        else:
            checkout["action"] = "ship"
            effects = [Effect.state("order:C1", _dumps({**o, "status": "shipped"})),
                       Effect.external("ship C1 (laptop)")]
        checkout["outcome"] = s.decide(effects, rationale=f"behavior pattern: {label or 'none visible'}")

    sched.at(50, "checkout", "read", checkout_read)
    sched.at(60, "checkout", "decide", checkout_decide)
    sched.run()

    out = checkout.get("outcome")
    cited = bool(out) and any(
        p.key == b"behavior:A42" and p.kind is PremiseKind.SEMANTIC for p in out.decision.premises
    ) and checkout.get("behavior") is not None
    truth = rt.layers.read_semantic(rt.kernel.latest, "behavior:A42")
    outcomes = {
        "decisions": len(rt.outcomes),
        "action": checkout.get("action"),
        "label_seen": checkout.get("label"),
        "label_in_store": truth.text.split(":", 1)[0] if truth else None,
        "behavior_premise_cited": cited,
        "flagged_purchase_shipped": checkout.get("action") == "ship" and truth is not None
        and truth.text.split(":", 1)[0] in RISK_LABELS and bool(out and out.committed),
    }
    return _finish(rt, outcomes)


# -- load sweep ---------------------------------------------------------------------


def _load_sweep(cfg: RunConfig, workdir) -> Trace:
    rt = Runtime(cfg, start_ms=0, workdir=workdir)
    offered = _param_int(cfg, "offered", 2 * cfg.max_concurrent, 1)
    rounds = _param_int(cfg, "rounds", 5, 1)
    rt.setup("load", {"cfg:limit": "100"})
    sched, rng = rt.schedule, rt.rng
    spacing = 2 * cfg.delta_ms + 10

    def agent(name: str, r: int):
        def go():
            s = rt.open(name)
            if s is None:
                return
            limit = s.read(STATE, "cfg:limit")
            think = _burst_think(rt.envelope.in_flight, cfg)
            sched.at(rt.clock.now() + think, name, "decide",
                     lambda: s.decide([Effect.state(f"load:{name}:{r}", limit)]))
        return go

    for r in range(rounds):
        names = [f"load{i:03d}" for i in range(offered)]
        rng.shuffle(names)
        for name in names:
            sched.at(100 + r * spacing, name, "open", agent(name, r))
    sched.run()
    m = rt.envelope.snapshot_metrics()
    attempts = m.decisions + m.over_envelope
    outcomes = {
        "attempts": attempts,
        "shed": m.over_envelope,
        "rejection_rate": m.over_envelope / attempts if attempts else 0.0,
        "admitted_with_violations": m.decisions - m.admitted,
    }
    return _finish(rt, outcomes)


# -- failure matrix -------------------------------------------------------------------


def intent_transform(version: int = 1) -> Transformation:
    embedder = HashEmbedder()

    def fn(episodes: list[Episode]) -> list[SemanticRecord]:
        text = " ".join(ep.text for ep in episodes)
        label = nearest_label(embedder, text, INTENT_PROTOTYPES)
        return [SemanticRecord(b"intent:A", f"{label}: {text}".encode(), "intent", version,
                               tuple(ep.seq for ep in episodes))]

    return Transformation("intent", version, fn, "customer message -> purchase intent")


# degraded configuration -> the symptom it is expected to show
MATRIX_SYMPTOMS = {
    "no_temporal": "stale_reality",
    "no_concurrency": "missed_window",
    "no_consistency": "divergent_versions",
    "no_semantic": "incompatible_interpretations",
}


def matrix_symptoms(events: list, max_concurrent: int, peak_in_flight: int) -> list[str]:
    """Symptoms visible in a trace, judged offline by the analyzer.

    stale_reality                 the gate admitted a decision whose premises had
                                  already been superseded when it took effect
    missed_window                 more than C decisions in flight and some
                                  premise aged past the temporal envelope
    divergent_versions            one decision drew premises from several cuts
    incompatible_interpretations  meaning was cited without a governed record
    """
    report = analyze(events)
    found = set()
    for f in report.decisions:
        if INVALID_OUTCOME in f.violations and f.took_effect and not f.runtime_violations:
            found.add("stale_reality")
        if Violation.STALE_PREMISE.value in f.violations and peak_in_flight > max_concurrent:
            found.add("missed_window")
        if Violation.MIXED_CUT.value in f.violations:
            found.add("divergent_versions")
        if Violation.IMPLICIT_SEMANTICS.value in f.violations:
            found.add("incompatible_interpretations")
    return sorted(found)


def _failure_matrix(cfg: RunConfig, workdir) -> Trace:
    degrade = cfg.params.get("degrade", "none")
    delta, c = cfg.delta_ms, cfg.max_concurrent
    rt = Runtime(cfg, start_ms=0, workdir=workdir,
                 gate_delta_ms=10**9 if degrade == "no_temporal" else None,
                 admission=degrade != "no_concurrency")
    registry_add(rt.registry, "failure_matrix", cfg)
    (msg_seq,) = rt.setup("matrix", {"stock:A": "100", "price:A": "10"},
                          ["customer wants a quote for a bulk purchase of many units of A"])
    sched, rng = rt.schedule, rt.rng
    pinned: dict = {}

    def interpret():
        pinned["cut"] = rt.runner.run("intent", 1, [msg_seq], actor="interpreter").cut

    sched.at(5, "interpreter", "interpret", interpret)

    def update():
        tx = rt.kernel.begin_tx(actor="updater")
        stock = int(rt.kernel.tx_read(tx, STATE, b"stock:A"))
        price = int(rt.kernel.tx_read(tx, STATE, b"price:A"))
        rt.layers.update_state(tx, "stock:A", str(stock - rng.randint(1, 5)))
        rt.layers.update_state(tx, "price:A", str(price + rng.randint(1, 3)))
        rt.kernel.commit_tx(tx)

    for t in range(20, 401, 20):
        sched.at(t, "updater", "update", update)

    def read_intent(s: Session) -> str:
        if degrade == "no_semantic":
            # private interpretation of the raw message, cited as if it were shared meaning
            raw = s.read(EPISODIC, episode_key(msg_seq), kind=PremiseKind.SEMANTIC)
            return "bulk-purchase" if b"bulk" in Episode.decode(msg_seq, raw).payload else "price-check"
        raw = s.read(SEMANTIC, "intent:A", kind=PremiseKind.SEMANTIC)
        return json.loads(raw)["interpretation"].split(":", 1)[0]

    def quote(s: Session, facts: dict):
        s.decide([Effect.state(f"quote:{s.agent}", _dumps(facts)), Effect.external(f"send quote to customer ({s.agent})")],
                 rationale="quote from current stock and price")

    def open_session(name: str) -> Optional[Session]:
        if degrade == "no_temporal":
            return rt.open(name, policy="pinned", pinned=pinned["cut"])
        return rt.open(name, policy="fresh" if degrade == "no_consistency" else "snapshot")

    def quoter(name: str):
        def go():
            s = open_session(name)
            if s is None:
                return
            facts = {"stock": int(s.read(STATE, "stock:A")), "intent": read_intent(s)}
            now = rt.clock.now()
            if degrade == "no_consistency":
                def late_price():
                    facts["price"] = int(s.read(STATE, "price:A"))
                    sched.at(rt.clock.now() + 5, name, "decide", lambda: quote(s, facts))
                sched.at(now + 20, name, "read price", late_price)
                return
            facts["price"] = int(s.read(STATE, "price:A"))
            think = 5 * delta if degrade == "no_temporal" else 10
            sched.at(now + think, name, "decide", lambda: quote(s, facts))
        return go

    for k in range(1, 5):
        sched.at(20 * k + 5, f"quoter{k}", "open", quoter(f"quoter{k}"))

    def burst(name: str):
        def go():
            s = open_session(name)
            if s is None:
                return
            facts = {"stock": int(s.read(STATE, "stock:A")), "price": int(s.read(STATE, "price:A")),
                     "intent": read_intent(s)}
            sched.at(rt.clock.now() + _burst_think(rt.envelope.in_flight, cfg), name, "decide",
                     lambda: quote(s, facts))
        return go

    names = [f"burst{i:02d}" for i in range(2 * c)]
    rng.shuffle(names)
    for name in names:
        sched.at(1000, name, "open", burst(name))
    sched.run()
    m = rt.envelope.snapshot_metrics()
    outcomes = {
        "degrade": degrade,
        "decisions": m.decisions,
        "admitted": m.admitted,
        "shed": m.over_envelope,
        "peak_in_flight": m.peak_in_flight,
        "symptoms": matrix_symptoms(rt.recorder.events, c, m.peak_in_flight),
    }
    return _finish(rt, outcomes)


# -- registry and dispatch --------------------------------------------------------------


def registry_add(registry: TransformRegistry, scenario: str, cfg: Optional[RunConfig] = None) -> TransformRegistry:
    """Register the transformations a scenario uses (also needed to rebuild its logs)."""
    if scenario == "checkout":
        prototypes = (cfg.params.get("prototypes") if cfg else None) or CHECKOUT_PROTOTYPES
        registry.register(behavior_transform(prototypes))
    elif scenario == "failure_matrix":
        registry.register(intent_transform())
    return registry


def scenario_registry(cfg: RunConfig) -> TransformRegistry:
    return registry_add(TransformRegistry(), cfg.scenario, cfg)


def _finish(rt: Runtime, outcomes: dict) -> Trace:
    return Trace(rt.config, list(rt.recorder.events), rt.envelope.snapshot_metrics().to_dict(), outcomes, rt)


SCENARIO_FUNCS: dict[str, Callable[[RunConfig, Optional[Path]], Trace]] = {
    "warehouse": _warehouse,
    "checkout": _checkout,
    "load_sweep": _load_sweep,
    "failure_matrix": _failure_matrix,
}


def run_scenario(name: str, config: Union[RunConfig, dict, None] = None, seed: Optional[int] = None, *,
                 workdir: Union[str, Path, None] = None) -> Trace:
    """Run one scenario deterministically; ``workdir`` receives the episodic
    and transformation logs."""
    if config is None:
        cfg = RunConfig(scenario=name)
    elif isinstance(config, dict):
        cfg = RunConfig.from_dict({"scenario": name, **config})
    else:
        cfg = config
    if cfg.scenario != name:
        raise InvalidConfig(f"config is for scenario {cfg.scenario!r}, not {name!r}")
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return SCENARIO_FUNCS[cfg.scenario](cfg, Path(workdir) if workdir is not None else None)
