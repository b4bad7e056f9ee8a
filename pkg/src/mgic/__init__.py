"""Multigrid-in-channels networks on a small numpy autograd engine."""

from .autograd import Parameter, Tape, Tensor, backward, finite_difference_check, no_grad
from .core import (
    BlockTemplate,
    ChannelShortcut,
    MgicBlock,
    MgicConfig,
    build_mgic_block,
    effective_group_size,
    init_transfer,
    num_levels,
)
from .cost import CostReport, activation_memory, closed_form_mgic_params, count_macs, count_params
from .checkpoint import load_checkpoint, save_checkpoint
from .models import build_model

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "no_grad",
    "finite_difference_check",
    "BlockTemplate",
    "ChannelShortcut",
    "MgicBlock",
    "MgicConfig",
    "build_mgic_block",
    "effective_group_size",
    "init_transfer",
    "num_levels",
    "CostReport",
    "activation_memory",
    "closed_form_mgic_params",
    "count_macs",
    "count_params",
    "load_checkpoint",
    "save_checkpoint",
    "build_model",
]
