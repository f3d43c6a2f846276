"""Seeded synthetic corpora for the two-domain forgetting experiment.

Two grammars over one shared vocabulary:

* ``progression``: noisy arithmetic progressions ``lo + (start + i*step) mod n``
  where each token is replaced by a uniform draw from the range with
  probability ``noise``.
* ``brackets``: well-nested bracket sequences with ``n_pairs`` bracket types
  (openers first, then the matching closers) and bounded depth.

Each grammar draws from its own token range, so a model fine-tuned on one
domain drifts away from the other's output rows.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .numerics import Rng

__all__ = [
    "GrammarSpec",
    "DOMAIN_A",
    "DOMAIN_B",
    "generate",
    "validate",
    "split",
    "write_corpus",
    "read_corpus",
]


@dataclass(frozen=True)
class GrammarSpec:
    name: str
    kind: str  # "progression" | "brackets"
    vocab_lo: int
    vocab_hi: int
    seed: int = 0
    noise: float = 0.1
    max_step: int = 3
    max_depth: int = 6
    p_open: float = 0.5

    def __post_init__(self):
        if self.kind not in ("progression", "brackets"):
            raise ValidationError(f"unknown grammar kind {self.kind!r}")
        if not 0 <= self.vocab_lo < self.vocab_hi:
            raise ValidationError("empty token range")
        if self.kind == "brackets" and self.n_tokens < 2:
            raise ValidationError("bracket grammar needs at least two tokens")
        if not 0.0 <= self.noise < 1.0:
            raise ValidationError("noise must lie in [0, 1)")

    @property
    def n_tokens(self) -> int:
        return self.vocab_hi - self.vocab_lo

    @property
    def n_pairs(self) -> int:
        return self.n_tokens // 2


DOMAIN_A = GrammarSpec("A", "progression", 0, 32, seed=7, noise=0.1, max_step=3)
DOMAIN_B = GrammarSpec("B", "brackets", 32, 64, seed=11, max_depth=6, p_open=0.5)


def _progression(spec: GrammarSpec, rng: Rng, seq_len: int) -> list[int]:
    n = spec.n_tokens
    start = rng.integer(n)
    step = 1 + rng.integer(spec.max_step)
    out = []
    for i in range(seq_len):
        if rng.random() < spec.noise:
            tok = rng.integer(n)
        else:
            tok = (start + i * step) % n
        out.append(spec.vocab_lo + tok)
    return out


def _brackets(spec: GrammarSpec, rng: Rng, seq_len: int) -> list[int]:
    k = spec.n_pairs
    stack: list[int] = []
    out = []
    for _ in range(seq_len):
        if not stack or (len(stack) < spec.max_depth and rng.random() < spec.p_open):
            b = rng.integer(k)
            stack.append(b)
            out.append(spec.vocab_lo + b)
        else:
            out.append(spec.vocab_lo + k + stack.pop())
    return out


def generate(spec: GrammarSpec, n_sequences: int, seq_len: int, seed: int | None = None) -> list[list[int]]:
    """``n_sequences`` sequences of length ``seq_len``; deterministic in (spec, seed)."""
    if n_sequences < 0 or seq_len < 1:
        raise ValidationError("n_sequences must be >= 0 and seq_len >= 1")
    rng = Rng(spec.seed if seed is None else seed)
    make = _progression if spec.kind == "progression" else _brackets
    return [make(spec, rng, seq_len) for _ in range(n_sequences)]


def _valid_progression(spec: GrammarSpec, seq: list[int]) -> bool:
    n = spec.n_tokens
    x = np.asarray(seq) - spec.vocab_lo
    i = np.arange(len(seq))
    for step in range(1, spec.max_step + 1):
        phase = (x - i * step) % n
        best = Counter(phase.tolist()).most_common(1)[0][1]
        if 2 * best >= len(seq):
            return True
    return False


def _valid_brackets(spec: GrammarSpec, seq: list[int]) -> bool:
    k = spec.n_pairs
    stack: list[int] = []
    for tok in seq:
        rel = tok - spec.vocab_lo
        if rel < k:
            if len(stack) >= spec.max_depth:
                return False
            stack.append(rel)
        elif rel < 2 * k:
            if not stack or stack.pop() != rel - k:
                return False
        else:
            return False
    return True


def validate(spec: GrammarSpec, seq) -> bool:
    """True when ``seq`` could have been produced by ``spec``'s grammar."""
    seq = [int(t) for t in seq]
    if not seq or any(t < spec.vocab_lo or t >= spec.vocab_hi for t in seq):
        return False
    if spec.kind == "progression":
        return _valid_progression(spec, seq)
    return _valid_brackets(spec, seq)


def split(corpus: list, fractions, seed: int) -> list[list]:
    """Shuffle with ``Rng(seed)`` and cut into consecutive parts by ``fractions``.

    The last part absorbs rounding so the parts always cover the corpus.
    """
    fractions = list(fractions)
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError("fractions must be non-negative and sum to 1")
    order = Rng(seed).permutation(len(corpus))
    parts, start = [], 0
    for i, f in enumerate(fractions):
        end = len(corpus) if i == len(fractions) - 1 else start + int(round(f * len(corpus)))
        parts.append([corpus[j] for j in order[start:end]])
        start = end
    return parts


def write_corpus(path, sequences) -> None:
    """One sequence per line, space-separated decimal token ids."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for seq in sequences:
            f.write(" ".join(str(int(t)) for t in seq) + "\n")


def read_corpus(path) -> list[list[int]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append([int(t) for t in line.split()])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
    return out
