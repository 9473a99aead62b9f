from .api import (
    count_parameters,
    discriminate,
    embed,
    extract,
    file_sha256,
    load_checkpoint,
    save_checkpoint,
)
from .blocks import DilatedGatedBlock, DilatedResidualBlock, PlainConvBlock, make_blocks
from .message import Message, fixed_pattern
from .model import ModelConfig, SyncGuardModel, broadcast, exponential_schedule

__all__ = [
    "DilatedGatedBlock",
    "DilatedResidualBlock",
    "Message",
    "ModelConfig",
    "PlainConvBlock",
    "SyncGuardModel",
    "broadcast",
    "count_parameters",
    "discriminate",
    "embed",
    "exponential_schedule",
    "extract",
    "file_sha256",
    "fixed_pattern",
    "load_checkpoint",
    "make_blocks",
    "save_checkpoint",
]
