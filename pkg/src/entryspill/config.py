"""Run configuration: defaults, YAML loading, and seed fan-out."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import yaml

from .errors import ValidationError

__all__ = ["RunConfig", "stage_seed"]


def stage_seed(master_seed: int, stage: str) -> int:
    """Stable per-stage seed derived from the master seed."""
    digest = hashlib.sha256(f"{master_seed}:{stage}".encode()).hexdigest()
    return int(digest, 16) % (2**63)


@dataclass
class RunConfig:
    """Pipeline configuration with the documented defaults."""

    delta: int = 2
    epsilon: float = 0.02
    slices: tuple[tuple[int, int], ...] = ((0, 4), (5, 8), (9, 16), (0, 16))
    k_folds: int = 5
    n_boot: int = 999
    n_perm: int = 999
    history_flavor: str = "any"
    min_n: int = 50
    shac_cutoff_km: float = 75.0
    rho_bar: float = 0.03
    seed: int = 0
    alpha: float = 0.05
    balanced: bool = True
    knn_k: int = 3
    outcomes: tuple[str, ...] = ("log_covered_emp", "log_total_wages_real_2020")
    inputs: dict[str, str] = field(default_factory=dict)
    dgp: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.slices = tuple(tuple(int(v) for v in s) for s in self.slices)
        self.outcomes = tuple(self.outcomes)
        if self.delta < 0:
            raise ValidationError("anticipation delta must be >= 0")
        if not 0 <= self.epsilon < 0.5:
            raise ValidationError("epsilon must lie in [0, 0.5)")
        if self.history_flavor not in ("any", "last4"):
            raise ValidationError(
                f"history flavor must be 'any' or 'last4', got {self.history_flavor!r}"
            )
        for a, b in self.slices:
            if a > b:
                raise ValidationError(f"invalid slice [{a},{b}]")

    @classmethod
    def from_yaml(cls, path: str | Path) -> "RunConfig":
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ValidationError(f"config file must hold a mapping: {path}")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["slices"] = [list(s) for s in self.slices]
        d["outcomes"] = list(self.outcomes)
        return d

    def seed_for(self, stage: str) -> int:
        return stage_seed(self.seed, stage)
