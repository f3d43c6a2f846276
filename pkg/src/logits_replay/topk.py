"""Dynamic top-K candidate sets.

For each position the candidate set is the shortest prefix of the
probability-sorted vocabulary whose cumulative mass reaches ``tau``, capped at
``k_max`` entries, with the gold token appended when it fell outside.
Ordering is descending probability, ties broken by ascending token id, so the
result does not depend on the platform's sort.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .numerics import softmax

__all__ = [
    "SelectorConfig",
    "CandidateSet",
    "ranked_order",
    "dynamic_k",
    "select",
    "select_from_probs",
    "outside_mass",
]


@dataclass(frozen=True)
class SelectorConfig:
    tau: float = 0.98
    k_max: int = 200
    store_logits: bool = False

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValidationError(f"tau must lie in (0, 1), got {self.tau}")
        if self.k_max < 1:
            raise ValidationError(f"k_max must be >= 1, got {self.k_max}")


@dataclass(frozen=True)
class CandidateSet:
    """Restricted vocabulary for one position.

    ``token_ids`` is in selection order (most probable first), not sorted by id.
    """

    token_ids: tuple[int, ...]
    gold_id: int
    gold_appended: bool

    def __len__(self) -> int:
        return len(self.token_ids)

    def __contains__(self, token: int) -> bool:
        return token in self.token_ids

    def indices(self) -> np.ndarray:
        return np.asarray(self.token_ids, dtype=np.int64)

    def mask(self, vocab_size: int) -> np.ndarray:
        m = np.zeros(vocab_size, dtype=bool)
        m[list(self.token_ids)] = True
        return m


def ranked_order(p: np.ndarray) -> np.ndarray:
    """Token ids sorted by descending probability, then ascending id."""
    p = np.asarray(p, dtype=np.float64)
    return np.lexsort((np.arange(p.size), -p))


def _dynamic_k_sorted(p_sorted: np.ndarray, cfg: SelectorConfig) -> int:
    csum = np.cumsum(p_sorted)
    hit = np.flatnonzero(csum >= cfg.tau)
    k_star = int(hit[0]) + 1 if hit.size else p_sorted.size
    return min(k_star, cfg.k_max)


def dynamic_k(p, cfg: SelectorConfig) -> int:
    """``min(K*, k_max)`` where K* is the smallest prefix reaching mass ``tau``."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValidationError("probabilities must be a non-empty 1-D vector")
    return _dynamic_k_sorted(p[ranked_order(p)], cfg)


def select_from_probs(p, gold: int, cfg: SelectorConfig) -> CandidateSet:
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= gold < p.size:
        raise IndexError(f"gold token {gold} out of range for vocabulary of {p.size}")
    order = ranked_order(p)
    k = _dynamic_k_sorted(p[order], cfg)
    top = [int(i) for i in order[:k]]
    if gold in top:
        return CandidateSet(tuple(top), int(gold), False)
    return CandidateSet(tuple(top + [int(gold)]), int(gold), True)


def select(z, gold: int, cfg: SelectorConfig) -> CandidateSet:
    """Candidate set for logits ``z`` that always contains ``gold``."""
    z = np.asarray(z, dtype=np.float64)
    if not 0 <= gold < z.size:
        raise IndexError(f"gold token {gold} out of range for vocabulary of {z.size}")
    return select_from_probs(softmax(z), gold, cfg)


def outside_mass(p, s: CandidateSet | np.ndarray) -> float:
    """Probability mass of tokens excluded from ``s``."""
    p = np.asarray(p, dtype=np.float64)
    ids = s.indices() if isinstance(s, CandidateSet) else np.asarray(s, dtype=np.int64)
    outside = np.ones(p.size, dtype=bool)
    outside[ids] = False
    return float(p[outside].sum())
