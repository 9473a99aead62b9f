from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError
from .attacks import AttackSpec, parse_attack

LEVELS = {"high": 0.3, "medium": 0.1, "low": 0.05}
IDENTITY = AttackSpec("identity")


def level_weight(level) -> float:
    if isinstance(level, str):
        try:
            return LEVELS[level]
        except KeyError:
            raise ConfigurationError(f"unknown probability level {level!r}; use {sorted(LEVELS)}") from None
    return float(level)


@dataclass
class AttackSampler:
    """Categorical draw over a pool of attacks; leftover mass selects identity."""

    pool: list[tuple[AttackSpec, float]] = field(default_factory=list)
    include_identity: bool = True

    def __post_init__(self):
        self.pool = [(spec, level_weight(level)) for spec, level in self.pool]
        if any(w < 0 for _, w in self.pool):
            raise ConfigurationError("attack weights must be non-negative")
        if self.total_mass > 1 + 1e-9:
            raise ConfigurationError(f"attack pool mass {self.total_mass:.4f} exceeds 1")
        if not self.include_identity and self.pool and abs(self.total_mass - 1) > 1e-9:
            raise ConfigurationError("without identity the pool weights must sum to 1")

    @property
    def total_mass(self) -> float:
        return float(sum(w for _, w in self.pool))

    @property
    def identity_mass(self) -> float:
        if not self.pool:
            return 1.0
        return max(0.0, 1.0 - self.total_mass) if self.include_identity else 0.0

    def outcomes(self) -> tuple[list[AttackSpec], np.ndarray]:
        specs = [spec for spec, _ in self.pool] + [IDENTITY]
        probs = np.array([w for _, w in self.pool] + [self.identity_mass], dtype=np.float64)
        return specs, probs / probs.sum()

    def sample_index(self, rng: np.random.Generator, size: int | None = None):
        specs, probs = self.outcomes()
        return rng.choice(len(specs), size=size, p=probs)

    def sample(self, rng: np.random.Generator) -> AttackSpec:
        """One attack with concrete parameters."""
        specs, _ = self.outcomes()
        return specs[int(self.sample_index(rng))].concretize(rng)

    def without(self, *kinds: str) -> "AttackSampler":
        """Ablation helper: drop the given attack kinds (their mass moves to identity)."""
        keep = [(s, w) for s, w in self.pool if s.kind not in kinds]
        return AttackSampler(keep, self.include_identity)

    def to_config(self) -> list[dict]:
        return [{"attack": spec.label(), "weight": w} for spec, w in self.pool]

    @classmethod
    def from_config(cls, entries: list[dict], include_identity: bool = True) -> "AttackSampler":
        pool = []
        for e in entries:
            pool.append((parse_attack(e["attack"]), e.get("level", e.get("weight"))))
        return cls(pool, include_identity)


def sample_attack(sampler: AttackSampler, seed: int) -> AttackSpec:
    return sampler.sample(np.random.default_rng(seed))


def default_training_sampler() -> AttackSampler:
    """Training pool: desynchronisation attacks high, common processing medium, the rest low.

    Attacks absent here (amplitude, resample, low-pass) stay unseen in training.
    """
    return AttackSampler(
        [
            (parse_attack("tsm:rate=0.8~1.2"), "high"),
            (parse_attack("pitch_scale:ratio=0.9~1.1"), "high"),
            (parse_attack("gaussian_noise:snr=20~40"), "medium"),
            (parse_attack("mp3:kbps=64/128"), "medium"),
            (parse_attack("requantize:bits=8"), "low"),
            (parse_attack("crop:fraction=0.05~0.3,position=random"), "low"),
            (parse_attack("jitter:k=100"), "low"),
        ]
    )
