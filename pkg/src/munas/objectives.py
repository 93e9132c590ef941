"""Multi-objective machinery: random scalarization, dominance, Pareto archive.

All four objectives are minimized: classification error and the three
resource counts.  A goal is a max of per-objective terms weighted by sampled
coefficients; resampling the coefficients each round walks the search across
the Pareto front, and coefficients derived from user bounds heavily penalize
candidates that exceed those bounds.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

# Guard keeping sampled 1/lambda away from zero (which would make a
# coefficient unbounded).
EPSILON_FRACTION = 1e-6


@dataclass(frozen=True)
class ObjectiveVector:
    error: float
    peak_memory_bytes: int
    model_size_bytes: int
    macs: int

    def as_tuple(self) -> tuple[float, int, int, int]:
        return (self.error, self.peak_memory_bytes, self.model_size_bytes, self.macs)


@dataclass(frozen=True)
class BoundsConfig:
    """Soft upper bounds per objective; resource objectives can be disabled."""

    error_bound: float
    peak_memory_bound: float
    model_size_bound: float
    macs_bound: float
    peak_memory_enabled: bool = True
    model_size_enabled: bool = True
    macs_enabled: bool = True

    def enabled_bounds(self) -> tuple[float | None, float | None, float | None, float | None]:
        return (
            self.error_bound,
            self.peak_memory_bound if self.peak_memory_enabled else None,
            self.model_size_bound if self.model_size_enabled else None,
            self.macs_bound if self.macs_enabled else None,
        )


@dataclass(frozen=True)
class ScalarGoal:
    lambdas: tuple[float, float, float, float]
    round_index: int = 0


def sample_goal(bounds: BoundsConfig, rng: random.Random, round_index: int = 0) -> ScalarGoal:
    """Draw coefficients so that 1/lambda_i ~ Uniform(0, b_i] per enabled objective.

    Disabled objectives get a zero coefficient and drop out of the goal.
    """
    lambdas = []
    for bound in bounds.enabled_bounds():
        if bound is None:
            lambdas.append(0.0)
            continue
        u = bound - rng.random() * bound * (1.0 - EPSILON_FRACTION)
        lambdas.append(1.0 / u)
    return ScalarGoal(lambdas=tuple(lambdas), round_index=round_index)


def reference_goal(bounds: BoundsConfig) -> ScalarGoal:
    """Deterministic goal with every enabled coefficient at 1/bound.

    A candidate within all bounds scores at most 1.0 under this goal.
    """
    lambdas = tuple(0.0 if b is None else 1.0 / b for b in bounds.enabled_bounds())
    return ScalarGoal(lambdas=lambdas, round_index=-1)


def scalarize(goal: ScalarGoal, v: ObjectiveVector) -> float:
    """Max over enabled objectives of lambda_i * v_i."""
    values = v.as_tuple()
    return max(lam * float(val) for lam, val in zip(goal.lambdas, values))


def dominates(a: ObjectiveVector, b: ObjectiveVector) -> bool:
    """True iff a is no worse everywhere and strictly better somewhere."""
    at, bt = a.as_tuple(), b.as_tuple()
    return all(x <= y for x, y in zip(at, bt)) and any(x < y for x, y in zip(at, bt))


def _weakly_dominates(a: ObjectiveVector, b: ObjectiveVector) -> bool:
    return all(x <= y for x, y in zip(a.as_tuple(), b.as_tuple()))


@dataclass(frozen=True)
class ArchiveDelta:
    accepted: bool
    evicted: tuple[int, ...] = ()


class ParetoArchive:
    """Mutually non-dominated set of (candidate id, objective vector)."""

    def __init__(self, members: list[tuple[int, ObjectiveVector]] | None = None):
        self._members: list[tuple[int, ObjectiveVector]] = list(members or [])

    def __len__(self) -> int:
        return len(self._members)

    def members(self) -> list[tuple[int, ObjectiveVector]]:
        return list(self._members)

    def insert(self, candidate_id: int, v: ObjectiveVector) -> ArchiveDelta:
        """Insert unless weakly dominated; evict members the new point dominates."""
        for _, existing in self._members:
            if _weakly_dominates(existing, v):
                return ArchiveDelta(accepted=False)
        evicted = tuple(cid for cid, existing in self._members if _weakly_dominates(v, existing))
        if evicted:
            gone = set(evicted)
            self._members = [(cid, vec) for cid, vec in self._members if cid not in gone]
        self._members.append((candidate_id, v))
        return ArchiveDelta(accepted=True, evicted=evicted)
