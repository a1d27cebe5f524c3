"""Desk-scale hybrid Mamba / sliding-window-attention byte language model."""

import os as _os

# Small-matrix workload: a single BLAS thread avoids spin-wait contention;
# outer-level parallelism (evaluation cells) is governed by SAMBA_THREADS.
# Only effective when this package is imported before numpy initializes BLAS;
# explicit user settings win.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")
del _os, _var

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    NumericError,
    SambaError,
)
from .inference import GenerateConfig, Session, decode_step, generate, prefill
from .kernels import BACKEND as KERNEL_BACKEND
from .model import Model, ModelConfig, build, layer_pattern
from .numerics import Tape, Tensor, backward, finite_diff_grad, recording
from .training import Corpus, TrainConfig, load_checkpoint, save_checkpoint, train_loop

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "ContractError", "Corpus", "DimensionError",
    "GenerateConfig", "KERNEL_BACKEND", "Model", "ModelConfig", "NumericError",
    "SambaError", "Session", "Tape", "Tensor", "TrainConfig", "backward", "build",
    "decode_step", "finite_diff_grad", "generate", "layer_pattern", "load_checkpoint",
    "prefill", "recording", "save_checkpoint", "train_loop",
]
