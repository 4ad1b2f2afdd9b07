"""Minimal numpy tensor core and the shared network blocks."""

from planloc.neural.autograd import Tensor
from planloc.neural.checkpoint import load_checkpoint, save_checkpoint
from planloc.neural.gradcheck import finite_diff_check
from planloc.neural.layers import ParameterStore, ffnn_apply, init_ffnn
from planloc.neural.optim import AdamState, adam_step
from planloc.neural.vit import (VitConfig, embed_tokens, init_vit, patch_split_flatten,
                                transformer_encode, vit_forward)

__all__ = [
    "AdamState", "ParameterStore", "Tensor", "VitConfig", "adam_step", "embed_tokens",
    "ffnn_apply", "finite_diff_check", "init_ffnn", "init_vit", "load_checkpoint",
    "patch_split_flatten", "save_checkpoint", "transformer_encode", "vit_forward",
]
