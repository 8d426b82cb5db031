"""Dual-stream forecaster: architecture, parameters, forward/backward and checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .network import (
    GROUPS,
    VARIANTS,
    ArchitectureConfig,
    ConfigError,
    DualStreamParameters,
    EncodeOutput,
    Tape,
    UsageError,
    backward,
    backward_batch,
    decode,
    encode,
    forward,
    forward_batch,
    fuse,
)
