"""Energy-based self-supervised pretraining of vision transformers.

A single network scores images with a scalar energy; restoring a corrupted
image is a few steps of gradient descent on that energy w.r.t. the pixels,
and the network is trained by supervising those restoration steps.
"""

from ebm_pretrain.errors import (
    ConfigError,
    ContractViolation,
    CorruptCheckpointError,
    NumericError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractViolation",
    "CorruptCheckpointError",
    "NumericError",
    "__version__",
]
