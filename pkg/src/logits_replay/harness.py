"""Training pipeline: pretraining, Stage-0 collection, Stage-1 replay fine-tuning,
full-vocabulary fine-tuning, evaluation and run metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import FingerprintMismatch, NumericError, ValidationError
from .loss import full_ce_batch, restricted_ce_batch
from .model import TinyLMParams, backward_batch, fingerprint, forward_batch, param_distance
from .numerics import Rng
from .optim import OptimizerState, apply_update, make_config
from .replay import (
    POSITION_STRATEGIES,
    ReplayFileHeader,
    ReplayRecord,
    ReplayStats,
    read_records,
    summarize,
    write_records,
)
from .topk import SelectorConfig, outside_mass, select_from_probs

log = logging.getLogger(__name__)

__all__ = [
    "PositionStrategy",
    "TrainConfig",
    "StepRecord",
    "RunMetrics",
    "TrainingAborted",
    "predictable_positions",
    "select_positions",
    "collect_stage0",
    "train_stage1",
    "train_full_sft",
    "pretrain",
    "evaluate",
    "stability_metrics",
    "FlopReport",
    "flop_accounting",
    "jacobian",
    "jacobian_spectral_norm",
]


class TrainingAborted(NumericError):
    """Raised when a training step produces a non-finite loss or gradient."""


@dataclass(frozen=True)
class PositionStrategy:
    kind: str = "all"
    fraction: float = 1.0
    n_buckets: int = 5
    confidence: str = "gold"  # "gold": p(x_t); "max": max_j p(j)

    def __post_init__(self):
        if self.kind not in POSITION_STRATEGIES:
            raise ValidationError(f"unknown position strategy {self.kind!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ValidationError("fraction must lie in (0, 1]")
        if self.kind == "bucket" and self.n_buckets < 2:
            raise ValidationError("bucket strategy needs n_buckets >= 2")
        if self.confidence not in ("gold", "max"):
            raise ValidationError("confidence must be 'gold' or 'max'")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    max_steps: int | None = None
    window: int = 100
    k_sigma: float = 4.0
    refractory: int = 10


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: float
    grad_norm: float
    clipped: bool
    softmax_units: int
    max_abs_step: float


@dataclass
class RunMetrics:
    steps: list[StepRecord] = field(default_factory=list)
    loss_variance: float = 0.0
    grad_norm_cv: float = 0.0
    spike_count: int = 0
    softmax_units: int = 0
    full_softmax_units: int = 0
    tokens: int = 0
    r_ratio: float = 1.0
    max_abs_step: float = 0.0
    wall_seconds: float = 0.0
    rel_l2_distance: float | None = None
    delta_ppl_base: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def loss_trace(self) -> np.ndarray:
        return np.array([s.loss for s in self.steps])

    @property
    def grad_norm_trace(self) -> np.ndarray:
        return np.array([s.grad_norm for s in self.steps])

    @property
    def tokens_per_sec(self) -> float:
        return self.tokens / self.wall_seconds if self.wall_seconds > 0 else float("nan")

    def summary(self) -> dict:
        """JSON-ready summary; wall-clock values live under ``timing`` only."""
        out = {
            "n_steps": len(self.steps),
            "final_loss": self.steps[-1].loss if self.steps else None,
            "loss_variance": self.loss_variance,
            "grad_norm_cv": self.grad_norm_cv,
            "spike_count": self.spike_count,
            "softmax_units": self.softmax_units,
            "full_softmax_units": self.full_softmax_units,
            "tokens": self.tokens,
            "r_ratio": self.r_ratio,
            "max_abs_step": self.max_abs_step,
            "rel_l2_distance": self.rel_l2_distance,
            "delta_ppl_base": self.delta_ppl_base,
        }
        out.update(self.extra)
        out["timing"] = {"wall_seconds": self.wall_seconds, "tokens_per_sec": self.tokens_per_sec}
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss", "grad_norm", "clipped_flag", "softmax_units"])
            for s in self.steps:
                w.writerow([s.step, repr(s.loss), repr(s.grad_norm), int(s.clipped), s.softmax_units])


def stability_metrics(loss_trace, grad_norm_trace, window: int = 100, k_sigma: float = 4.0,
                      refractory: int = 10) -> tuple[float, float, int]:
    """``(loss_variance, grad_norm_cv, spike_count)``.

    Loss variance is taken over the last ``window`` steps. A spike is a step
    whose loss exceeds the mean of the preceding ``window`` losses by more than
    ``k_sigma`` of their standard deviation; at least ``min(window, 10)``
    preceding steps are required, and after a spike the next ``refractory``
    steps are not examined.
    """
    loss = np.asarray(loss_trace, dtype=np.float64)
    gn = np.asarray(grad_norm_trace, dtype=np.float64)
    variance = float(np.var(loss[-window:])) if loss.size else 0.0
    mean_gn = float(np.mean(gn)) if gn.size else 0.0
    cv = float(np.std(gn) / mean_gn) if mean_gn > 0 else 0.0

    spikes = 0
    min_hist = min(window, 10)
    i = min_hist
    while i < loss.size:
        hist = loss[max(0, i - window):i]
        if loss[i] > hist.mean() + k_sigma * hist.std():
            spikes += 1
            i += refractory + 1
        else:
            i += 1
    return variance, cv, spikes


# -- Stage 0 --------------------------------------------------------------

def predictable_positions(corpus, context_len: int) -> list[tuple[int, int]]:
    """Every (seq_id, pos) with a full context window before ``pos``."""
    return [(s, t) for s, seq in enumerate(corpus) for t in range(context_len, len(seq))]


def _contexts(corpus, positions, context_len: int) -> tuple[np.ndarray, np.ndarray]:
    ctx = np.array([corpus[s][t - context_len:t] for s, t in positions], dtype=np.int64)
    gold = np.array([corpus[s][t] for s, t in positions], dtype=np.int64)
    return ctx.reshape(len(positions), context_len), gold


def _batched_probs(params: TinyLMParams, ctx: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = []
    for i in range(0, len(ctx), chunk):
        z, _ = forward_batch(params, ctx[i:i + chunk])
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        out.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(out) if out else np.zeros((0, params.config.vocab_size))


def _batched_logits(params: TinyLMParams, ctx: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = [forward_batch(params, ctx[i:i + chunk])[0] for i in range(0, len(ctx), chunk)]
    return np.concatenate(out) if out else np.zeros((0, params.config.vocab_size))


def select_positions(corpus, context_len: int, strategy: PositionStrategy, rng: Rng,
                     confidence: np.ndarray | None = None) -> list[tuple[int, int]]:
    """Stage-0 positions in (seq_id, pos) order.

    ``confidence`` (one value per predictable position, in
    :func:`predictable_positions` order) is required for the bucket strategy.
    """
    cand = predictable_positions(corpus, context_len)
    if strategy.kind == "all":
        return cand
    if strategy.kind == "last_token":
        return [(s, len(seq) - 1) for s, seq in enumerate(corpus) if len(seq) > context_len]
    total = int(round(strategy.fraction * len(cand)))
    if strategy.kind == "random":
        picked = rng.sample(len(cand), total)
        return [cand[i] for i in sorted(picked.tolist())]

    if confidence is None or len(confidence) != len(cand):
        raise ValidationError("bucket strategy needs one confidence value per position")
    order = np.lexsort((np.arange(len(cand)), np.asarray(confidence)))
    buckets = np.array_split(order, strategy.n_buckets)
    base, extra = divmod(total, strategy.n_buckets)
    picked = []
    for b, members in enumerate(buckets):
        want = min(base + (b < extra), len(members))
        picked.extend(members[rng.sample(len(members), want)].tolist())
    return [cand[i] for i in sorted(picked)]


def collect_stage0(params: TinyLMParams, corpus, selector: SelectorConfig,
                   strategy: PositionStrategy, out_path, seed: int = 0) -> tuple[ReplayFileHeader, ReplayStats]:
    """Record dynamic top-K candidate sets from ``params`` and write a replay file."""
    w = params.config.context_len
    rng = Rng(seed)
    confidence = None
    if strategy.kind == "bucket":
        cand = predictable_positions(corpus, w)
        ctx, gold = _contexts(corpus, cand, w)
        probs = _batched_probs(params, ctx)
        if strategy.confidence == "gold":
            confidence = probs[np.arange(len(cand)), gold]
        else:
            confidence = probs.max(axis=1)
    positions = select_positions(corpus, w, strategy, rng, confidence)

    ctx, gold = _contexts(corpus, positions, w)
    logits = _batched_logits(params, ctx)
    zmax = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - zmax)
    probs = e / e.sum(axis=1, keepdims=True)

    records = []
    for i, (s, t) in enumerate(positions):
        cs = select_from_probs(probs[i], int(gold[i]), selector)
        z = rho = None
        if selector.store_logits:
            z = tuple(logits[i, list(cs.token_ids)])
            rho = outside_mass(probs[i], cs)
        records.append(ReplayRecord(s, t, cs.gold_id, cs.token_ids, z, cs.gold_appended, rho))

    header = ReplayFileHeader(
        vocab_size=params.config.vocab_size,
        tau=selector.tau,
        k_max=selector.k_max,
        position_strategy=strategy.kind,
        model_fingerprint=fingerprint(params),
    )
    write_records(out_path, header, records)
    return header, summarize(out_path)


# -- training -------------------------------------------------------------

def _train(params: TinyLMParams, ctx: np.ndarray, gold: np.ndarray, masks: np.ndarray | None,
           optimizer: str, opt_cfg, train_cfg: TrainConfig) -> tuple[TinyLMParams, RunMetrics]:
    cfg = params.config
    n = len(ctx)
    if n == 0:
        raise ValidationError("no training examples")
    opt_cfg = opt_cfg if opt_cfg is not None else make_config(optimizer)
    tensors = {k: v.copy() for k, v in params.tensors().items()}
    state = OptimizerState.zeros(tensors)
    rng = Rng(train_cfg.seed)
    metrics = RunMetrics()
    started = time.perf_counter()
    step = 0
    done = False
    for _epoch in range(train_cfg.epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, train_cfg.batch_size):
            if train_cfg.max_steps is not None and step >= train_cfg.max_steps:
                done = True
                break
            idx = perm[lo:lo + train_cfg.batch_size]
            model = TinyLMParams.from_tensors(cfg, tensors)
            logits, cache = forward_batch(model, ctx[idx])
            try:
                if masks is None:
                    losses, dz = full_ce_batch(logits, gold[idx])
                    units = len(idx) * cfg.vocab_size
                else:
                    losses, dz = restricted_ce_batch(logits, masks[idx], gold[idx])
                    units = int(masks[idx].sum())
            except NumericError as exc:
                raise TrainingAborted(f"step {step}: {exc}") from None
            loss = float(losses.mean())
            grads = backward_batch(model, cache, dz / len(idx))
            gnorm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
            if not (math.isfinite(loss) and math.isfinite(gnorm)):
                raise TrainingAborted(f"step {step}: loss={loss} grad_norm={gnorm}")
            tensors, state, info = apply_update(optimizer, tensors, grads, state, opt_cfg)
            metrics.steps.append(StepRecord(step, loss, gnorm, info.clipped, units, info.max_abs_step))
            metrics.softmax_units += units
            metrics.full_softmax_units += len(idx) * cfg.vocab_size
            metrics.tokens += len(idx)
            metrics.max_abs_step = max(metrics.max_abs_step, info.max_abs_step)
            step += 1
        if done:
            break
    metrics.wall_seconds = time.perf_counter() - started
    metrics.loss_variance, metrics.grad_norm_cv, metrics.spike_count = stability_metrics(
        metrics.loss_trace, metrics.grad_norm_trace, train_cfg.window, train_cfg.k_sigma, train_cfg.refractory
    )
    metrics.r_ratio = metrics.softmax_units / metrics.full_softmax_units if metrics.full_softmax_units else 1.0
    metrics.extra["antiparallel_count"] = state.antiparallel_count
    return TinyLMParams.from_tensors(cfg, tensors), metrics


def train_full_sft(params: TinyLMParams, corpus, optimizer: str = "adamw", opt_cfg=None,
                   train_cfg: TrainConfig = TrainConfig()) -> tuple[TinyLMParams, RunMetrics]:
    """Full-vocabulary cross-entropy fine-tuning on every predictable position."""
    positions = predictable_positions(corpus, params.config.context_len)
    ctx, gold = _contexts(corpus, positions, params.config.context_len)
    return _train(params, ctx, gold, None, optimizer, opt_cfg, train_cfg)


def pretrain(params: TinyLMParams, corpus, optimizer: str = "adamw", opt_cfg=None,
             train_cfg: TrainConfig = TrainConfig()) -> tuple[TinyLMParams, RunMetrics]:
    """Produce a base model; identical to full-vocabulary training from ``params``."""
    return train_full_sft(params, corpus, optimizer, opt_cfg, train_cfg)


def train_stage1(params: TinyLMParams, replay_path, corpus, optimizer: str = "moclip", opt_cfg=None,
                 train_cfg: TrainConfig = TrainConfig(),
                 override_fingerprint: bool = False) -> tuple[TinyLMParams, RunMetrics]:
    """Restricted cross-entropy fine-tuning over the recorded candidate sets.

    Logits come from the live model; only the candidate ids are replayed. The
    replay file must have been produced by ``params`` unless
    ``override_fingerprint`` is set.
    """
    header, records = read_records(replay_path)
    fp = fingerprint(params)
    if header.model_fingerprint != fp:
        msg = (f"replay file was recorded from model {header.model_fingerprint:016x}, "
               f"starting model is {fp:016x}")
        if not override_fingerprint:
            raise FingerprintMismatch(msg)
        log.warning("%s (overridden)", msg)
    cfg = params.config
    if header.vocab_size != cfg.vocab_size:
        raise ValidationError("replay vocabulary size does not match the model")
    positions = [(r.seq_id, r.pos) for r in records]
    for r in records:
        if r.seq_id >= len(corpus) or not cfg.context_len <= r.pos < len(corpus[r.seq_id]):
            raise ValidationError(f"record ({r.seq_id}, {r.pos}) does not address the corpus")
        if corpus[r.seq_id][r.pos] != r.gold_id:
            raise ValidationError(f"record ({r.seq_id}, {r.pos}): gold does not match corpus token")
    ctx, gold = _contexts(corpus, positions, cfg.context_len)
    masks = np.zeros((len(records), cfg.vocab_size), dtype=bool)
    for i, r in enumerate(records):
        masks[i, list(r.candidates)] = True
    return _train(params, ctx, gold, masks, optimizer, opt_cfg, train_cfg)


def evaluate(params: TinyLMParams, corpus) -> tuple[float, float]:
    """Mean next-token negative log-likelihood (nats) and perplexity."""
    positions = predictable_positions(corpus, params.config.context_len)
    if not positions:
        raise ValidationError("corpus has no predictable positions")
    ctx, gold = _contexts(corpus, positions, params.config.context_len)
    total = 0.0
    for lo in range(0, len(ctx), 4096):
        z = _batched_logits(params, ctx[lo:lo + 4096])
        losses, _ = full_ce_batch(z, gold[lo:lo + 4096])
        total += float(losses.sum())
    mean = total / len(ctx)
    return mean, math.exp(mean)


# -- accounting -----------------------------------------------------------

@dataclass(frozen=True)
class FlopReport:
    r: float
    saving: float
    vocab_size: int
    mean_set_size: float


def flop_accounting(stats: ReplayStats | float, vocab_size: int) -> FlopReport:
    """Fraction ``r`` of softmax work kept by replay and the saving ``1 - r``."""
    mean = stats.mean_set_size if isinstance(stats, ReplayStats) else float(stats)
    if mean is None or vocab_size < 1:
        raise ValidationError("need a non-empty replay summary and positive vocab size")
    r = mean / vocab_size
    return FlopReport(r, 1.0 - r, vocab_size, mean)


def jacobian(params: TinyLMParams, context) -> np.ndarray:
    """Dense ``d logits / d theta`` as a ``[V, n_params]`` matrix."""
    v = params.config.vocab_size
    ctx = np.repeat(np.asarray(context, dtype=np.int64)[None, :], v, axis=0)
    _, cache = forward_batch(params, ctx)
    rows = []
    for k in range(v):
        dz = np.zeros((1, v))
        dz[0, k] = 1.0
        sub = (cache[0][k:k + 1], cache[1][k:k + 1], cache[2][k:k + 1], cache[3][k:k + 1])
        g = backward_batch(params, sub, dz)
        rows.append(np.concatenate([g[n].ravel() for n in params.tensors()]))
    return np.stack(rows)


def jacobian_spectral_norm(jac: np.ndarray, iters: int = 50, tol: float = 1e-6, seed: int = 0) -> float:
    """Largest singular value of ``jac`` by power iteration on ``jac @ jac.T``."""
    gram = jac @ jac.T
    x = Rng(seed).normal(gram.shape[0])
    x /= np.linalg.norm(x)
    sigma2 = 0.0
    for _ in range(iters):
        y = gram @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
        new = float(x @ gram @ x)
        if abs(new - sigma2) <= tol * max(new, 1e-300):
            sigma2 = new
            break
        sigma2 = new
    return math.sqrt(max(sigma2, 0.0))


def write_summary(path, summary: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")


def retention_metrics(tuned: TinyLMParams, base: TinyLMParams, retained_corpus) -> dict:
    """Relative L2 distance to ``base`` and the NLL change on ``retained_corpus``."""
    nll_tuned, ppl_tuned = evaluate(tuned, retained_corpus)
    nll_base, ppl_base = evaluate(base, retained_corpus)
    return {
        "rel_l2_distance": param_distance(tuned, base),
        "delta_nll": nll_tuned - nll_base,
        "delta_ppl": ppl_tuned - ppl_base,
    }


def config_dict(obj) -> dict:
    return asdict(obj)
