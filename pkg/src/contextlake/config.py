"""Run configuration shared by the simulator and the CLI."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union

from .errors import InvalidConfig, UnknownScenario

SCENARIOS = ("warehouse", "checkout", "load_sweep", "failure_matrix")
MODES = ("contextlake", "composed")
COMPOSED_SCENARIOS = ("warehouse", "checkout")
DEGRADATIONS = ("none", "no_temporal", "no_concurrency", "no_consistency", "no_semantic")


@dataclass(frozen=True)
class RunConfig:
    """One simulator run.

    ``lags`` maps subsystem names to their lag parameter in ms and only
    matters in composed mode. ``params`` holds scenario-specific knobs
    (for example ``degrade`` for the failure matrix).
    """

    scenario: str
    mode: str = "contextlake"
    delta_ms: int = 100
    max_concurrent: int = 4
    lags: dict = field(default_factory=dict)
    seed: int = 0
    params: dict = field(default_factory=dict)
    out: Optional[str] = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise UnknownScenario(f"unknown scenario {self.scenario!r} (choose from {', '.join(SCENARIOS)})")
        if self.mode not in MODES:
            raise InvalidConfig(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "composed" and self.scenario not in COMPOSED_SCENARIOS:
            raise InvalidConfig(f"scenario {self.scenario!r} has no composed variant")
        for name in ("delta_ms", "max_concurrent"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise InvalidConfig(f"{name} must be an integer >= 1, got {v!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise InvalidConfig(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if not isinstance(self.lags, dict) or not isinstance(self.params, dict):
            raise InvalidConfig("lags and params must be objects")
        for name, lag in self.lags.items():
            if isinstance(lag, bool) or not isinstance(lag, int) or lag < 0:
                raise InvalidConfig(f"lag for {name!r} must be a non-negative integer, got {lag!r}")
        degrade = self.params.get("degrade", "none")
        if degrade not in DEGRADATIONS:
            raise InvalidConfig(f"degrade must be one of {DEGRADATIONS}, got {degrade!r}")
        if degrade != "none" and self.scenario != "failure_matrix":
            raise InvalidConfig("degrade applies only to the failure_matrix scenario")

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "RunConfig":
        if not isinstance(obj, dict):
            raise InvalidConfig("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise InvalidConfig(f"unknown config field(s): {', '.join(unknown)}")
        if "scenario" not in obj:
            raise InvalidConfig("config is missing 'scenario'")
        return cls(**obj)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.pop("out")
        return d
