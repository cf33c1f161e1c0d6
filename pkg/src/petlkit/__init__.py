"""Parameter-efficient transfer learning on miniature encoder backbones."""

from .backbone import ArchConfig, Backbone, Head, HeadConfig, attention, build_backbone, build_head
from .petl import (
    Adapter,
    AdaptedModel,
    BitFit,
    FullFinetune,
    Lora,
    Prefix,
    Probing,
    Prompt,
    Ssf,
    apply_method,
    bake_prefix,
    inject,
    merge_lora,
    merge_ssf,
)
from .tensor import Parameter, Registry, Tensor, backward, using_dtype

__version__ = "0.1.0"

__all__ = [
    "Adapter",
    "AdaptedModel",
    "ArchConfig",
    "Backbone",
    "BitFit",
    "FullFinetune",
    "Head",
    "HeadConfig",
    "Lora",
    "Parameter",
    "Prefix",
    "Probing",
    "Prompt",
    "Registry",
    "Ssf",
    "Tensor",
    "apply_method",
    "attention",
    "backward",
    "bake_prefix",
    "build_backbone",
    "build_head",
    "inject",
    "merge_lora",
    "merge_ssf",
    "using_dtype",
]
