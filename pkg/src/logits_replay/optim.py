"""MoClip and the baseline optimizers (AdamW, TAM, MoFO).

All optimizers here are functional: ``*_apply(params, grads, state, cfg)``
returns ``(new_params, new_state, info)`` and never mutates its inputs.
``params``/``grads`` are ordered mappings from tensor name to ``np.ndarray``.

MoClip differs from AdamW in two places:

* the incoming gradient is rotated toward the previous momentum whenever the
  angle between them exceeds ``delta_max`` (norm preserved);
* the step is ``-alpha * atan2(m_hat, sqrt(v_hat))`` per coordinate, so no
  epsilon is needed and every coordinate moves at most ``alpha * pi / 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import DimensionError, NumericError, ValidationError

__all__ = [
    "MoClipConfig",
    "AdamWConfig",
    "TAMConfig",
    "MoFOConfig",
    "OptimizerState",
    "ClipDiagnostics",
    "StepInfo",
    "vector_angle",
    "angle_clip",
    "atan2_step",
    "adam_step",
    "moclip_apply",
    "adamw_apply",
    "tam_apply",
    "mofo_apply",
    "OPTIMIZERS",
    "make_config",
    "apply_update",
]

NORM_EPS = 1e-12
CLIP_SCOPES = ("per_tensor", "global")
MOMENT_SOURCES = ("clipped", "raw")
CLIP_MODES = ("rotate_preserve_norm", "shrink_perpendicular")


@dataclass(frozen=True)
class MoClipConfig:
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    delta_max: float = math.pi / 4
    weight_decay: float = 0.01
    clip_scope: str = "per_tensor"
    moment_source: str = "clipped"
    clip_mode: str = "rotate_preserve_norm"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValidationError("alpha must be positive")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValidationError(f"{name} must lie in [0, 1), got {b}")
        if not 0.0 < self.delta_max < math.pi / 2:
            raise ValidationError(f"delta_max must lie in (0, pi/2), got {self.delta_max}")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be non-negative")
        if self.clip_scope not in CLIP_SCOPES:
            raise ValidationError(f"clip_scope must be one of {CLIP_SCOPES}")
        if self.moment_source not in MOMENT_SOURCES:
            raise ValidationError(f"moment_source must be one of {MOMENT_SOURCES}")
        if self.clip_mode not in CLIP_MODES:
            raise ValidationError(f"clip_mode must be one of {CLIP_MODES}")


@dataclass(frozen=True)
class AdamWConfig:
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValidationError("alpha must be positive")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValidationError(f"{name} must lie in [0, 1), got {b}")
        if self.eps < 0 or self.weight_decay < 0:
            raise ValidationError("eps and weight_decay must be non-negative")


@dataclass(frozen=True)
class TAMConfig(AdamWConfig):
    clip_scope: str = "per_tensor"

    def __post_init__(self):
        super().__post_init__()
        if self.clip_scope not in CLIP_SCOPES:
            raise ValidationError(f"clip_scope must be one of {CLIP_SCOPES}")


@dataclass(frozen=True)
class MoFOConfig(AdamWConfig):
    fraction: float = 0.2

    def __post_init__(self):
        super().__post_init__()
        if not 0.0 <= self.fraction <= 1.0:
            raise ValidationError("fraction must lie in [0, 1]")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    antiparallel_count: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
            v={k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
        )

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.step,
            self.antiparallel_count,
        )


@dataclass(frozen=True)
class ClipDiagnostics:
    angle_before: float
    angle_after: float
    clipped: bool
    degenerate: str = "none"  # none | zero_momentum | antiparallel
    unit: str = ""


@dataclass
class StepInfo:
    diagnostics: list[ClipDiagnostics] = field(default_factory=list)
    max_abs_step: float = 0.0  # largest |delta theta| before weight decay

    @property
    def clipped(self) -> bool:
        return any(d.clipped for d in self.diagnostics)


def vector_angle(a, b) -> float:
    """Angle in radians between two vectors (nan if either is zero)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        return float("nan")
    a_hat = a / na
    par = float(np.dot(b, a_hat))
    perp = np.linalg.norm(b - par * a_hat)
    return float(math.atan2(perp, par))


def angle_clip(g, m_prev, delta_max: float, mode: str = "rotate_preserve_norm"):
    """Cap the angle between ``g`` and ``m_prev`` at ``delta_max``.

    Returns ``(g_clipped, ClipDiagnostics)``. Gradients within the cap, a zero
    momentum or zero gradient, and exactly antiparallel gradients pass through
    unchanged.
    """
    g = np.asarray(g, dtype=np.float64)
    m_prev = np.asarray(m_prev, dtype=np.float64)
    if g.shape != m_prev.shape:
        raise DimensionError(f"gradient shape {g.shape} != momentum shape {m_prev.shape}")
    if mode not in CLIP_MODES:
        raise ValidationError(f"unknown clip mode {mode!r}")

    gf, mf = g.ravel(), m_prev.ravel()
    m_norm = float(np.linalg.norm(mf))
    g_norm = float(np.linalg.norm(gf))
    if m_norm < NORM_EPS:
        return g.copy(), ClipDiagnostics(float("nan"), float("nan"), False, "zero_momentum")
    if g_norm < NORM_EPS:
        return g.copy(), ClipDiagnostics(float("nan"), float("nan"), False, "none")

    m_hat = mf / m_norm
    par = float(np.dot(gf, m_hat))
    perp = gf - par * m_hat
    perp_norm = float(np.linalg.norm(perp))
    phi = math.atan2(perp_norm, par)
    if phi <= delta_max:
        return g.copy(), ClipDiagnostics(phi, phi, False)

    if perp_norm <= NORM_EPS * g_norm:
        # antiparallel: no unique rotation plane
        return g.copy(), ClipDiagnostics(phi, phi, False, "antiparallel")
    u_hat = perp / perp_norm

    if mode == "rotate_preserve_norm":
        out = g_norm * (math.cos(delta_max) * m_hat + math.sin(delta_max) * u_hat)
    else:
        if par <= 0.0:
            return g.copy(), ClipDiagnostics(phi, phi, False, "antiparallel")
        out = par * m_hat + min(perp_norm, math.tan(delta_max) * par) * u_hat
    out = out.reshape(g.shape)
    return out, ClipDiagnostics(phi, vector_angle(mf, out), True)


def atan2_step(m_hat, v_hat, alpha: float) -> np.ndarray:
    """Per-coordinate ``-alpha * sign(m) * atan2(|m|, sqrt(v))``; zero where m is zero."""
    m_hat = np.asarray(m_hat, dtype=np.float64)
    v_hat = np.asarray(v_hat, dtype=np.float64)
    if m_hat.shape != v_hat.shape:
        raise DimensionError(f"shape mismatch {m_hat.shape} vs {v_hat.shape}")
    if np.any(v_hat < 0):
        raise NumericError("negative second-moment estimate")
    return -alpha * np.arctan2(m_hat, np.sqrt(v_hat))


def adam_step(m_hat, v_hat, alpha: float, eps: float) -> np.ndarray:
    """``-alpha * m_hat / (sqrt(v_hat) + eps)``, defined as 0 where m_hat is 0."""
    denom = np.sqrt(v_hat) + eps
    out = np.zeros_like(m_hat)
    np.divide(m_hat, denom, out=out, where=m_hat != 0)
    return -alpha * out


def _check_inputs(params, grads, state):
    if params.keys() != grads.keys():
        raise DimensionError("params and grads have different tensor names")
    for k, p in params.items():
        g = grads[k]
        if np.shape(g) != np.shape(p):
            raise DimensionError(f"{k}: grad shape {np.shape(g)} != param shape {np.shape(p)}")
        if k not in state.m or state.m[k].shape != np.shape(p):
            raise DimensionError(f"{k}: optimizer state does not match parameter")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in tensor {k!r}")


def _units(names: list[str], scope: str) -> list[list[str]]:
    return [names] if scope == "global" else [[n] for n in names]


def _flat(d: Mapping[str, np.ndarray], names: list[str]) -> np.ndarray:
    return np.concatenate([np.asarray(d[n], dtype=np.float64).ravel() for n in names])


def _unflat(vec: np.ndarray, like: Mapping[str, np.ndarray], names: list[str]) -> dict:
    out, i = {}, 0
    for n in names:
        size = like[n].size
        out[n] = vec[i:i + size].reshape(like[n].shape)
        i += size
    return out


def _moments(grads, src, state, beta1, beta2):
    t = state.step + 1
    m = {k: beta1 * state.m[k] + (1.0 - beta1) * grads[k] for k in grads}
    v = {k: beta2 * state.v[k] + (1.0 - beta2) * np.square(src[k]) for k in grads}
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    m_hat = {k: m[k] / bc1 for k in m}
    v_hat = {k: v[k] / bc2 for k in v}
    return t, m, v, m_hat, v_hat


def _finish(params, steps, alpha, weight_decay):
    new = {}
    max_step = 0.0
    for k, p in params.items():
        d = steps[k]
        if d.size:
            max_step = max(max_step, float(np.max(np.abs(d))))
        new[k] = p * (1.0 - alpha * weight_decay) + d if weight_decay else p + d
    return new, max_step


def moclip_apply(params, grads, state: OptimizerState, cfg: MoClipConfig):
    """One MoClip step."""
    _check_inputs(params, grads, state)
    names = list(params)
    clipped_g: dict[str, np.ndarray] = {}
    diags: list[ClipDiagnostics] = []
    antiparallel = 0
    for unit in _units(names, cfg.clip_scope):
        g_u, d = angle_clip(_flat(grads, unit), _flat(state.m, unit), cfg.delta_max, cfg.clip_mode)
        clipped_g.update(_unflat(g_u, params, unit))
        label = "global" if cfg.clip_scope == "global" else unit[0]
        diags.append(replace(d, unit=label))
        antiparallel += d.degenerate == "antiparallel"

    src = clipped_g if cfg.moment_source == "clipped" else grads
    t, m, v, m_hat, v_hat = _moments(clipped_g, src, state, cfg.beta1, cfg.beta2)
    steps = {k: atan2_step(m_hat[k], v_hat[k], cfg.alpha) for k in names}
    new_params, max_step = _finish(params, steps, cfg.alpha, cfg.weight_decay)
    new_state = OptimizerState(m, v, t, state.antiparallel_count + antiparallel)
    return new_params, new_state, StepInfo(diags, max_step)


def adamw_apply(params, grads, state: OptimizerState, cfg: AdamWConfig):
    """One AdamW step with decoupled weight decay."""
    _check_inputs(params, grads, state)
    grads = {k: np.asarray(g, dtype=np.float64) for k, g in grads.items()}
    t, m, v, m_hat, v_hat = _moments(grads, grads, state, cfg.beta1, cfg.beta2)
    steps = {k: adam_step(m_hat[k], v_hat[k], cfg.alpha, cfg.eps) for k in params}
    new_params, max_step = _finish(params, steps, cfg.alpha, cfg.weight_decay)
    return new_params, OptimizerState(m, v, t, state.antiparallel_count), StepInfo([], max_step)


def tam_apply(params, grads, state: OptimizerState, cfg: TAMConfig):
    """AdamW step scaled by ``max(cos(phi), 0)`` per unit, phi = angle(m_prev, g)."""
    _check_inputs(params, grads, state)
    grads = {k: np.asarray(g, dtype=np.float64) for k, g in grads.items()}
    names = list(params)
    damping: dict[str, float] = {}
    diags = []
    for unit in _units(names, cfg.clip_scope):
        phi = vector_angle(_flat(state.m, unit), _flat(grads, unit))
        factor = 1.0 if math.isnan(phi) else max(math.cos(phi), 0.0)
        for n in unit:
            damping[n] = factor
        label = "global" if cfg.clip_scope == "global" else unit[0]
        degenerate = "zero_momentum" if math.isnan(phi) else "none"
        diags.append(ClipDiagnostics(phi, phi, False, degenerate, label))
    t, m, v, m_hat, v_hat = _moments(grads, grads, state, cfg.beta1, cfg.beta2)
    steps = {k: damping[k] * adam_step(m_hat[k], v_hat[k], cfg.alpha, cfg.eps) for k in names}
    new_params, max_step = _finish(params, steps, cfg.alpha, cfg.weight_decay)
    return new_params, OptimizerState(m, v, t, state.antiparallel_count), StepInfo(diags, max_step)


def top_fraction_mask(values: np.ndarray, fraction: float) -> np.ndarray:
    """Boolean mask of the ``floor(fraction * n)`` largest |values|; ties by lower index."""
    flat = np.abs(np.asarray(values, dtype=np.float64)).ravel()
    k = int(math.floor(fraction * flat.size + 1e-9))
    mask = np.zeros(flat.size, dtype=bool)
    if k > 0:
        order = np.lexsort((np.arange(flat.size), -flat))
        mask[order[:k]] = True
    return mask.reshape(np.shape(values))


def mofo_apply(params, grads, state: OptimizerState, cfg: MoFOConfig):
    """AdamW step restricted to the top ``fraction`` of coordinates by |m_hat|, per tensor.

    Moments are updated for every coordinate; weight decay applies everywhere.
    """
    _check_inputs(params, grads, state)
    grads = {k: np.asarray(g, dtype=np.float64) for k, g in grads.items()}
    t, m, v, m_hat, v_hat = _moments(grads, grads, state, cfg.beta1, cfg.beta2)
    steps = {}
    for k in params:
        mask = top_fraction_mask(m_hat[k], cfg.fraction)
        steps[k] = np.where(mask, adam_step(m_hat[k], v_hat[k], cfg.alpha, cfg.eps), 0.0)
    new_params, max_step = _finish(params, steps, cfg.alpha, cfg.weight_decay)
    return new_params, OptimizerState(m, v, t, state.antiparallel_count), StepInfo([], max_step)


OPTIMIZERS = {
    "moclip": (moclip_apply, MoClipConfig),
    "adamw": (adamw_apply, AdamWConfig),
    "tam": (tam_apply, TAMConfig),
    "mofo": (mofo_apply, MoFOConfig),
}


def make_config(name: str, **overrides):
    """Build the config dataclass for optimizer ``name``, ignoring None overrides."""
    if name not in OPTIMIZERS:
        raise ValidationError(f"unknown optimizer {name!r}; choose from {sorted(OPTIMIZERS)}")
    cls = OPTIMIZERS[name][1]
    fields = cls.__dataclass_fields__
    unknown = [k for k in overrides if k not in fields]
    if unknown:
        raise ValidationError(f"{name}: unknown hyperparameters {unknown}")
    return cls(**{k: v for k, v in overrides.items() if v is not None})


def apply_update(name: str, params, grads, state: OptimizerState, cfg):
    return OPTIMIZERS[name][0](params, grads, state, cfg)
