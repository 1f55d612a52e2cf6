"""Snapshot-isolated context store with memory layers, a decision
admissibility gate, a deterministic multi-agent simulator and a trace
checker."""

from .admissibility import (
    AdmissibilityGate,
    DecisionRecord,
    Effect,
    PremiseKind,
    PremiseRef,
    Verdict,
    Violation,
    evaluate,
)
from .analyzer import ViolationReport, analyze, check_serializable
from .clock import MonotonicClock, SimClock
from .composed import ComposedView, EventTimeView, LagKind, LagPolicy
from .config import RunConfig
from .envelope import EnvelopeConfig, EnvelopeControl, EnvelopeMetrics
from .errors import (
    ContextLakeError,
    DuplicateVersion,
    EmptyLabelSet,
    EpisodicRevision,
    InvalidConfig,
    OverEnvelope,
    ParseError,
    TooManyTransactions,
    TransitionRejected,
    TxClosed,
    UnauthorizedWrite,
    UnknownCut,
    UnknownLabel,
    UnknownScenario,
    UnknownSourceEpisode,
    UnknownSubsystem,
    UnregisteredTransform,
    WriteConflict,
)
from .kernel import CutId, Kernel, Layer, Transaction, VersionedEntry
from .layers import Episode, MemoryLayers, StateEntry, rebuild
from .semantic import (
    EmbeddingVector,
    HashEmbedder,
    SemanticEngine,
    SemanticRecord,
    Transformation,
    TransformRegistry,
    cosine,
)

__version__ = "0.1.0"

__all__ = [
    "AdmissibilityGate",
    "ComposedView",
    "ContextLakeError",
    "CutId",
    "DecisionRecord",
    "DuplicateVersion",
    "Effect",
    "EmbeddingVector",
    "EmptyLabelSet",
    "EnvelopeConfig",
    "EnvelopeControl",
    "EnvelopeMetrics",
    "Episode",
    "EpisodicRevision",
    "EventTimeView",
    "HashEmbedder",
    "InvalidConfig",
    "Kernel",
    "LagKind",
    "LagPolicy",
    "Layer",
    "MemoryLayers",
    "MonotonicClock",
    "OverEnvelope",
    "ParseError",
    "PremiseKind",
    "PremiseRef",
    "RunConfig",
    "SemanticEngine",
    "SemanticRecord",
    "SimClock",
    "StateEntry",
    "TooManyTransactions",
    "Transaction",
    "TransformRegistry",
    "Transformation",
    "TransitionRejected",
    "TxClosed",
    "UnauthorizedWrite",
    "UnknownCut",
    "UnknownLabel",
    "UnknownScenario",
    "UnknownSourceEpisode",
    "UnknownSubsystem",
    "UnregisteredTransform",
    "Verdict",
    "VersionedEntry",
    "Violation",
    "ViolationReport",
    "WriteConflict",
    "analyze",
    "check_serializable",
    "cosine",
    "evaluate",
    "rebuild",
]
