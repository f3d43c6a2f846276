"""Logits replay fine-tuning and the MoClip optimizer on a tiny NumPy language model."""

from .errors import (
    ConfigError,
    ContractViolation,
    DimensionError,
    FingerprintMismatch,
    NumericError,
    ParseError,
    ReplayError,
    ValidationError,
)
from .harness import PositionStrategy, TrainConfig, collect_stage0, evaluate, train_full_sft, train_stage1
from .loss import full_ce, gradient_bias, restricted_ce
from .model import TinyLMConfig, TinyLMParams, init_params, load_checkpoint, save_checkpoint
from .numerics import Rng, log_sum_exp, softmax
from .optim import AdamWConfig, MoClipConfig, MoFOConfig, TAMConfig, make_config
from .topk import CandidateSet, SelectorConfig, select

__version__ = "0.1.0"
