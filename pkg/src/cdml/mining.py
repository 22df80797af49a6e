"""Training-pair selection: moderate positives and hard negatives.

A positive candidate's difficulty is measured relative to its pool by the
moderation ratio ``(d - d_min) / (d_max - d)``: 0 for the easiest pair,
infinite for the hardest. A candidate is admissible when its ratio lies in
``[alpha, beta]``. Larger bounds admit harder positives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, NamedTuple, Sequence

import numpy as np


class MiningError(ValueError):
    pass


class Candidate(NamedTuple):
    ref: Any
    distance: float
    identity: int


@dataclass
class PositivePool:
    anchor: Any
    identity: int
    candidates: list[Candidate]

    def __post_init__(self):
        if not self.candidates:
            raise MiningError(f"empty positive pool for anchor {self.anchor!r}")
        for c in self.candidates:
            if c.identity != self.identity:
                raise MiningError(
                    f"positive candidate {c.ref!r} has identity {c.identity}, anchor has {self.identity}"
                )
            if not c.distance >= 0:
                raise MiningError(f"negative or NaN distance {c.distance} in positive pool")

    @property
    def distances(self) -> np.ndarray:
        return np.array([c.distance for c in self.candidates], dtype=np.float64)


@dataclass
class MiningConfig:
    alpha: float = 0.5
    beta: float = 2.0
    adaptive: bool = True
    positive_mining: bool = True
    negative_mining: bool = True
    negative_pool_size: int = 64
    hard_negative_count: int = 1

    def __post_init__(self):
        if not (0 <= self.alpha <= self.beta):
            raise ValueError(f"need 0 <= alpha <= beta, got alpha={self.alpha}, beta={self.beta}")
        if self.negative_pool_size < 1 or self.hard_negative_count < 1:
            raise ValueError("negative pool size and hard negative count must be positive")


def moderation_ratio(d_cand: float, d_min: float, d_max: float) -> float:
    if not (d_min <= d_cand <= d_max):
        raise MiningError(f"need d_min <= d_cand <= d_max, got {d_min}, {d_cand}, {d_max}")
    if d_max == d_min:
        return 0.0
    if d_cand == d_max:
        return math.inf
    return (d_cand - d_min) / (d_max - d_cand)


def pool_ratios(distances: Sequence[float]) -> np.ndarray:
    d = np.asarray(distances, dtype=np.float64)
    lo, hi = float(d.min()), float(d.max())
    return np.array([moderation_ratio(float(x), lo, hi) for x in d])


def median_index(distances: Sequence[float]) -> int:
    """Index of the (lower) median distance; equal distances keep pool order."""
    order = np.argsort(np.asarray(distances, dtype=np.float64), kind="stable")
    return int(order[(len(order) - 1) // 2])


def select_moderate_index(distances: Sequence[float], alpha: float, beta: float) -> tuple[int, bool]:
    """Pick a candidate index for the band ``[alpha, beta]``.

    Among admissible candidates the one whose ratio is closest to the band
    midpoint wins; with an unbounded band the smallest admissible ratio wins.
    Ties go to the lowest index. Returns ``(index, used_fallback)``; the
    fallback (no admissible candidate) is the median-distance candidate.
    """
    if len(distances) == 0:
        raise MiningError("empty positive pool")
    ratios = pool_ratios(distances)
    admissible = np.flatnonzero((ratios >= alpha) & (ratios <= beta))
    if admissible.size == 0:
        return median_index(distances), True
    if math.isinf(beta):
        key = ratios[admissible]
    else:
        key = np.abs(ratios[admissible] - 0.5 * (alpha + beta))
    return int(admissible[np.argmin(key)]), False


def adaptive_bounds(pool: PositivePool | Sequence[float]) -> tuple[float, float]:
    """Band covering the 25th to 75th percentile of the pool's distances."""
    d = pool.distances if isinstance(pool, PositivePool) else np.asarray(pool, dtype=np.float64)
    if d.size < 2:
        return 0.0, 0.0
    lo, hi = float(d.min()), float(d.max())
    if lo == hi:
        return 0.0, 0.0
    p25, p75 = np.percentile(d, [25.0, 75.0])
    alpha = max(0.0, moderation_ratio(float(p25), lo, hi))
    beta = max(alpha, moderation_ratio(float(p75), lo, hi))
    return alpha, beta


def moderate_positive_select(pool: PositivePool, cfg: MiningConfig) -> Candidate:
    alpha, beta = adaptive_bounds(pool) if cfg.adaptive else (cfg.alpha, cfg.beta)
    idx, _ = select_moderate_index(pool.distances, alpha, beta)
    return pool.candidates[idx]


def random_positive_select(pool: PositivePool, rng: np.random.Generator) -> Candidate:
    return pool.candidates[int(rng.integers(len(pool.candidates)))]


def hard_negative_select(anchor_identity: int, negatives: Sequence[Candidate], k: int) -> list[Candidate]:
    """The ``k`` negatives closest to the anchor, ascending; ties by index."""
    if not negatives:
        raise MiningError("empty negative pool")
    if not 1 <= k <= len(negatives):
        raise MiningError(f"k={k} outside [1, {len(negatives)}]")
    for c in negatives:
        if c.identity == anchor_identity:
            raise MiningError(f"negative {c.ref!r} shares the anchor identity {anchor_identity}")
    d = np.array([c.distance for c in negatives], dtype=np.float64)
    order = np.argsort(d, kind="stable")[:k]
    return [negatives[i] for i in order]
