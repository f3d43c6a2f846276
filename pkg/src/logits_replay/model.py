"""Fixed-context feed-forward language model with hand-written gradients.

    h      = act(concat(E[x_{t-w}], ..., E[x_{t-1}]) @ W_h + b_h)
    logits = h @ W_out + b_out

Tensors, in declared (checkpoint and fingerprint) order:

    embed     [vocab_size, embed_dim]
    w_hidden  [context_len * embed_dim, hidden_dim]
    b_hidden  [hidden_dim]
    w_out     [hidden_dim, vocab_size]
    b_out     [vocab_size]
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, NumericError, ParseError, ValidationError
from .numerics import Rng

__all__ = [
    "TinyLMConfig",
    "TinyLMParams",
    "TENSOR_ORDER",
    "init_params",
    "zeros_params",
    "forward_batch",
    "backward_batch",
    "forward_logits",
    "backward",
    "param_distance",
    "fingerprint",
    "save_checkpoint",
    "load_checkpoint",
]

TENSOR_ORDER = ("embed", "w_hidden", "b_hidden", "w_out", "b_out")
CHECKPOINT_MAGIC = b"TINYLM01"
_GELU_C = float(np.sqrt(2.0 / np.pi))


@dataclass(frozen=True)
class TinyLMConfig:
    vocab_size: int = 64
    context_len: int = 8
    embed_dim: int = 32
    hidden_dim: int = 128
    activation: str = "tanh"

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValidationError("vocab_size must be >= 2")
        for name in ("context_len", "embed_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.activation not in ("tanh", "gelu"):
            raise ValidationError(f"unknown activation {self.activation!r}")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        v, w, e, h = self.vocab_size, self.context_len, self.embed_dim, self.hidden_dim
        return {
            "embed": (v, e),
            "w_hidden": (w * e, h),
            "b_hidden": (h,),
            "w_out": (h, v),
            "b_out": (v,),
        }

    @property
    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes().values()))


@dataclass
class TinyLMParams:
    config: TinyLMConfig
    embed: np.ndarray
    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    def __post_init__(self):
        for name, shape in self.config.shapes().items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {arr.shape}")
            setattr(self, name, arr)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_ORDER}

    @classmethod
    def from_tensors(cls, config: TinyLMConfig, tensors) -> "TinyLMParams":
        return cls(config, **{name: tensors[name] for name in TENSOR_ORDER})

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in TENSOR_ORDER])

    def copy(self) -> "TinyLMParams":
        return TinyLMParams.from_tensors(self.config, {k: v.copy() for k, v in self.tensors().items()})


def init_params(config: TinyLMConfig, seed: int) -> TinyLMParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases; embeddings use fan_in = 1."""
    rng = Rng(seed)
    shapes = config.shapes()
    embed = rng.uniform(-1.0, 1.0, shapes["embed"])
    fan_h = shapes["w_hidden"][0]
    w_hidden = rng.uniform(-1.0, 1.0, shapes["w_hidden"]) / np.sqrt(fan_h)
    fan_o = shapes["w_out"][0]
    w_out = rng.uniform(-1.0, 1.0, shapes["w_out"]) / np.sqrt(fan_o)
    return TinyLMParams(
        config,
        embed=embed,
        w_hidden=w_hidden,
        b_hidden=np.zeros(shapes["b_hidden"]),
        w_out=w_out,
        b_out=np.zeros(shapes["b_out"]),
    )


def zeros_params(config: TinyLMConfig) -> TinyLMParams:
    return TinyLMParams.from_tensors(config, {k: np.zeros(s) for k, s in config.shapes().items()})


def _activate(kind: str, a: np.ndarray):
    if kind == "tanh":
        h = np.tanh(a)
        return h, 1.0 - h * h
    inner = _GELU_C * (a + 0.044715 * a ** 3)
    t = np.tanh(inner)
    h = 0.5 * a * (1.0 + t)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * a * a)
    dh = 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner
    return h, dh


def _check_contexts(params: TinyLMParams, contexts) -> np.ndarray:
    ctx = np.asarray(contexts, dtype=np.int64)
    if ctx.ndim == 1:
        ctx = ctx[None, :]
    cfg = params.config
    if ctx.ndim != 2 or ctx.shape[1] != cfg.context_len:
        raise DimensionError(f"contexts must have shape [B, {cfg.context_len}], got {ctx.shape}")
    if ctx.size and (ctx.min() < 0 or ctx.max() >= cfg.vocab_size):
        raise IndexError("context token out of range")
    return ctx


def forward_batch(params: TinyLMParams, contexts):
    """Logits ``[B, V]`` for a batch of contexts, plus the cache for backward."""
    ctx = _check_contexts(params, contexts)
    x = params.embed[ctx].reshape(ctx.shape[0], -1)
    pre = x @ params.w_hidden + params.b_hidden
    h, dh = _activate(params.config.activation, pre)
    logits = h @ params.w_out + params.b_out
    return logits, (ctx, x, h, dh)


def backward_batch(params: TinyLMParams, cache, dlogits) -> dict[str, np.ndarray]:
    """Parameter gradients of ``sum(dlogits * logits)`` over the batch."""
    ctx, x, h, dh = cache
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != (ctx.shape[0], params.config.vocab_size):
        raise DimensionError(f"dlogits shape {dlogits.shape} does not match batch")
    cfg = params.config
    g_wout = h.T @ dlogits
    g_bout = dlogits.sum(axis=0)
    dpre = (dlogits @ params.w_out.T) * dh
    g_wh = x.T @ dpre
    g_bh = dpre.sum(axis=0)
    dx = (dpre @ params.w_hidden.T).reshape(ctx.shape[0], cfg.context_len, cfg.embed_dim)
    g_embed = np.zeros_like(params.embed)
    np.add.at(g_embed, ctx.ravel(), dx.reshape(-1, cfg.embed_dim))
    return {"embed": g_embed, "w_hidden": g_wh, "b_hidden": g_bh, "w_out": g_wout, "b_out": g_bout}


def forward_logits(params: TinyLMParams, context) -> np.ndarray:
    logits, _ = forward_batch(params, np.asarray(context, dtype=np.int64)[None, :])
    return logits[0]


def backward(params: TinyLMParams, context, loss_grad_logits) -> dict[str, np.ndarray]:
    g = np.asarray(loss_grad_logits, dtype=np.float64)
    if g.shape != (params.config.vocab_size,):
        raise DimensionError(f"loss gradient must have length {params.config.vocab_size}")
    _, cache = forward_batch(params, np.asarray(context, dtype=np.int64)[None, :])
    return backward_batch(params, cache, g[None, :])


def param_distance(a: TinyLMParams, base: TinyLMParams, percent: bool = False) -> float:
    """``||a - base|| / ||base||`` over all parameters."""
    fa, fb = a.flat(), base.flat()
    if fa.shape != fb.shape:
        raise DimensionError("parameter sets have different sizes")
    denom = np.linalg.norm(fb)
    if denom == 0.0:
        raise ZeroDivisionError("base parameters have zero norm")
    d = float(np.linalg.norm(fa - fb) / denom)
    return 100.0 * d if percent else d


def _config_json(config: TinyLMConfig) -> str:
    return json.dumps(asdict(config), sort_keys=True, separators=(",", ":"))


def fingerprint(params: TinyLMParams) -> int:
    """64-bit BLAKE2b digest of the config and little-endian float64 parameter bytes."""
    h = hashlib.blake2b(digest_size=8)
    h.update(_config_json(params.config).encode())
    for name in TENSOR_ORDER:
        h.update(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())
    return int.from_bytes(h.digest(), "little")


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(params: TinyLMParams, path) -> None:
    """Magic ``TINYLM01``, u32 LE header length, JSON header, then float64 LE tensors."""
    header = {
        "format": "tinylm",
        "version": 1,
        "config": asdict(params.config),
        "tensors": [[n, list(getattr(params, n).shape)] for n in TENSOR_ORDER],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(getattr(params, n), dtype="<f8").tobytes() for n in TENSOR_ORDER)
    _atomic_write(path, CHECKPOINT_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + body)


def load_checkpoint(path) -> TinyLMParams:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a TinyLM checkpoint")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n].decode())
    config = TinyLMConfig(**header["config"])
    offset = 12 + n
    tensors = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        if offset + 8 * count > len(data):
            raise ParseError(f"{path}: truncated tensor {name!r}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64)
        tensors[name] = arr.reshape(shape)
        offset += 8 * count
    if offset != len(data):
        raise ParseError(f"{path}: trailing or missing bytes")
    params = TinyLMParams.from_tensors(config, tensors)
    if not np.all(np.isfinite(params.flat())):
        raise NumericError(f"{path}: non-finite parameters")
    return params
