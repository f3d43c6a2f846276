"""Full and restricted (renormalised) cross-entropy with analytic logit gradients,
plus the restricted-vs-full gradient bias analyser.

Losses are in nats. The restricted loss renormalises the softmax over a
candidate set ``S`` and has zero gradient outside ``S``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NumericError, ValidationError
from .numerics import log_sum_exp, softmax
from .topk import CandidateSet

__all__ = [
    "LossResult",
    "BiasReport",
    "full_ce",
    "restricted_ce",
    "gradient_bias",
    "param_bias_bound",
    "full_ce_batch",
    "restricted_ce_batch",
]


@dataclass(frozen=True)
class LossResult:
    value: float
    grad_logits: np.ndarray


@dataclass(frozen=True)
class BiasReport:
    rho: float
    l1_bias: float
    l2_bias: float
    tv_distance: float
    l2_closed_form: float


def _ids(s) -> np.ndarray:
    if isinstance(s, CandidateSet):
        return s.indices()
    ids = np.asarray(s, dtype=np.int64).ravel()
    if np.unique(ids).size != ids.size:
        raise ValidationError("candidate set contains duplicates")
    return ids


def _check_gold(z: np.ndarray, gold: int) -> None:
    if not 0 <= gold < z.size:
        raise IndexError(f"gold token {gold} out of range for vocabulary of {z.size}")


def full_ce(z, gold: int) -> LossResult:
    z = np.asarray(z, dtype=np.float64)
    _check_gold(z, gold)
    grad = softmax(z)
    grad[gold] -= 1.0
    return LossResult(log_sum_exp(z) - z[gold], grad)


def restricted_ce(z, s, gold: int) -> LossResult:
    """Cross-entropy of ``gold`` under the softmax renormalised over ``s``."""
    z = np.asarray(z, dtype=np.float64)
    _check_gold(z, gold)
    ids = _ids(s)
    if gold not in ids:
        raise ContractViolation(f"gold token {gold} is not in the candidate set")
    zs = z[ids]
    grad = np.zeros_like(z)
    grad[ids] = softmax(zs)
    grad[gold] -= 1.0
    return LossResult(log_sum_exp(zs) - z[gold], grad)


def gradient_bias(z, s, gold: int, *, check: bool = True, atol: float = 1e-10) -> BiasReport:
    """Compare restricted and full logit gradients elementwise.

    With ``check`` set, the measured l1 bias must equal twice the outside
    mass and the l2 bias must equal its closed form, both within ``atol``.
    """
    z = np.asarray(z, dtype=np.float64)
    ids = _ids(s)
    restricted = restricted_ce(z, ids, gold).grad_logits
    full = full_ce(z, gold).grad_logits
    delta = restricted - full

    p = softmax(z)
    inside = np.zeros(z.size, dtype=bool)
    inside[ids] = True
    rho = float(p[~inside].sum())
    p_tilde = np.zeros_like(p)
    p_tilde[ids] = softmax(z[ids])

    l1 = float(np.abs(delta).sum())
    l2 = float(np.sqrt(np.dot(delta, delta)))
    ratio = rho / (1.0 - rho)
    l2_closed = float(np.sqrt(np.sum((ratio * p[inside]) ** 2) + np.sum(p[~inside] ** 2)))
    tv = 0.5 * float(np.abs(p - p_tilde).sum())

    if check:
        if abs(l1 - 2.0 * rho) > atol:
            raise NumericError(f"l1 bias {l1!r} differs from 2*rho {2 * rho!r}")
        if abs(l2 - l2_closed) > atol:
            raise NumericError(f"l2 bias {l2!r} differs from closed form {l2_closed!r}")
    return BiasReport(rho, l1, l2, tv, l2_closed)


def param_bias_bound(jacobian_norm: float, tau: float) -> float:
    """Worst-case parameter-space gradient bias ``2 * ||J|| * (1 - tau)``."""
    if jacobian_norm < 0:
        raise ValidationError("jacobian_norm must be non-negative")
    if not 0.0 < tau < 1.0:
        raise ValidationError(f"tau must lie in (0, 1), got {tau}")
    return 2.0 * jacobian_norm * (1.0 - tau)


def _masked_ce(logits: np.ndarray, mask: np.ndarray | None, golds: np.ndarray):
    rows = np.arange(logits.shape[0])
    if mask is None:
        zmax = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - zmax)
    else:
        if not np.all(mask[rows, golds]):
            bad = int(np.flatnonzero(~mask[rows, golds])[0])
            raise ContractViolation(f"row {bad}: gold token not in candidate set")
        zmax = np.where(mask, logits, -np.inf).max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, logits, zmax) - zmax), 0.0)
    total = e.sum(axis=1, keepdims=True)
    losses = (zmax[:, 0] + np.log(total[:, 0])) - logits[rows, golds]
    grad = e / total
    grad[rows, golds] -= 1.0
    if not np.all(np.isfinite(losses)):
        raise NumericError("non-finite loss in batch")
    return losses, grad


def full_ce_batch(logits: np.ndarray, golds: np.ndarray):
    """Per-row full cross-entropy; returns ``(losses[B], grad_logits[B, V])``."""
    return _masked_ce(np.asarray(logits, dtype=np.float64), None, np.asarray(golds))


def restricted_ce_batch(logits: np.ndarray, mask: np.ndarray, golds: np.ndarray):
    """Row-wise restricted cross-entropy with a boolean candidate mask ``[B, V]``."""
    return _masked_ce(np.asarray(logits, dtype=np.float64), np.asarray(mask, dtype=bool),
                      np.asarray(golds))
