"""Driving-image selection: size ranking followed by perceptual re-ranking."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import SelectionError
from .evaluation import BACKBONE_A, BACKBONE_V, get_backbone, perceptual_distances
from .morphometry import DEFAULT_TAU, DEFAULT_WINDOW, MorphometryProfile, measure

SIZE_EPS = 1.0


@dataclass
class PoolEntry:
    image_id: str
    image: np.ndarray
    profile: MorphometryProfile


@dataclass
class CandidatePool:
    entries: list[PoolEntry]

    def __post_init__(self):
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise SelectionError("pool image ids must be unique")
        for e in self.entries:
            if not (math.isfinite(e.profile.length) and math.isfinite(e.profile.width)):
                raise SelectionError(f"non-finite size for pool entry {e.image_id}")

    @classmethod
    def from_images(cls, images: dict, tau: float = DEFAULT_TAU, window: int = DEFAULT_WINDOW,
                    width_mode: str = "span") -> "CandidatePool":
        return cls([PoolEntry(str(k), np.asarray(v), measure(v, tau, window, width_mode))
                    for k, v in sorted(images.items())])

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class MatchResult:
    source_id: str
    top3_ids: list[str]
    chosen_id: str
    phase1_scores: list[float]
    phase2_scores: list[float] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "source_id": self.source_id,
            "top3_ids": list(self.top3_ids),
            "chosen_id": self.chosen_id,
            "phase1_scores": list(self.phase1_scores),
            "phase2_scores": list(self.phase2_scores),
        }


def size_score(source: MorphometryProfile, cand: MorphometryProfile, eps: float = SIZE_EPS) -> float:
    return (abs(cand.length - source.length) / max(source.length, eps)
            + abs(cand.width - source.width) / max(source.width, eps))


def phase1_rank(source_profile: MorphometryProfile, pool: CandidatePool, top_k: int = 3,
                eps: float = SIZE_EPS, source: np.ndarray | None = None) -> list[tuple[PoolEntry, float]]:
    """The ``top_k`` entries closest in (length, width), ascending by score.

    Ties go to the smaller length difference, then to a pixel-identical copy of
    ``source`` (when given), then to the id.  The copy rule keeps the source
    selectable when more than ``top_k`` entries share its exact size.
    """
    if len(pool) == 0:
        raise SelectionError("driving pool is empty")
    scored = [(e, size_score(source_profile, e.profile, eps)) for e in pool.entries]

    def key(es):
        e, score = es
        copy = score == 0 and source is not None and np.array_equal(e.image, source)
        return score, abs(e.profile.length - source_profile.length), not copy, e.image_id

    scored.sort(key=key)
    return scored[:min(top_k, len(scored))]


def default_perceptual(source: np.ndarray, candidates: list[np.ndarray]) -> list[float]:
    """Mean of the two backbone distances between ``source`` and each candidate."""
    src = np.repeat(np.asarray(source, dtype=np.float32)[None], len(candidates), axis=0)
    cand = np.stack([np.asarray(c, dtype=np.float32) for c in candidates])
    da = perceptual_distances(src, cand, get_backbone(BACKBONE_A))
    dv = perceptual_distances(src, cand, get_backbone(BACKBONE_V))
    return [float(v) for v in 0.5 * (da + dv)]


PerceptualMetric = Callable[[np.ndarray, list], list]


def phase2_select(source: np.ndarray, candidates: list[PoolEntry],
                  perceptual: PerceptualMetric = default_perceptual) -> tuple[PoolEntry, list[float]]:
    """Pick the perceptually closest candidate; ties go to the longer one, then to the id."""
    if not candidates:
        raise SelectionError("no candidates to choose from")
    if len(candidates) == 1:
        scores = perceptual(source, [candidates[0].image])
        return candidates[0], [float(s) for s in scores]
    scores = [float(s) for s in perceptual(source, [c.image for c in candidates])]
    best = min(range(len(candidates)),
               key=lambda i: (scores[i], -candidates[i].profile.length, candidates[i].image_id))
    return candidates[best], scores


def select_driving(source: np.ndarray, pool: CandidatePool, source_id: str = "source",
                   tau: float = DEFAULT_TAU, window: int = DEFAULT_WINDOW, width_mode: str = "span",
                   perceptual: PerceptualMetric = default_perceptual, eps: float = SIZE_EPS) -> MatchResult:
    profile = measure(source, tau, window, width_mode)
    ranked = phase1_rank(profile, pool, eps=eps, source=source)
    chosen, p2 = phase2_select(source, [e for e, _ in ranked], perceptual)
    return MatchResult(
        source_id=source_id,
        top3_ids=[e.image_id for e, _ in ranked],
        chosen_id=chosen.image_id,
        phase1_scores=[s for _, s in ranked],
        phase2_scores=p2,
    )


def select_random(pool: CandidatePool, rng: np.random.Generator, source_id: str = "source") -> MatchResult:
    """Uniform random pick, the baseline against size/perceptual matching."""
    if len(pool) == 0:
        raise SelectionError("driving pool is empty")
    entry = pool.entries[int(rng.integers(len(pool)))]
    return MatchResult(source_id, [entry.image_id], entry.image_id, [], [])
