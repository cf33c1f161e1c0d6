"""Miniature transformer and conformer encoders with a named-parameter registry.

Layer stacks are built from the autodiff primitives; every parameter lives in a
registry keyed by a dot-separated path (matrices end in ".weight", offset
vectors in ".bias"). Injection passes hook into the forward path through a
small context protocol (see petl module) so the encoder itself never knows
which adaptation method is active.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from fnmatch import fnmatch

import numpy as np

from .tensor import (
    ContractError,
    Parameter,
    Registry,
    Tensor,
    batch_norm,
    concat,
    depthwise_conv1d,
    derive_seed,
    dropout,
    gelu,
    get_default_dtype,
    glu,
    layer_norm,
    matmul,
    reshape,
    softmax,
    transpose,
)

TRANSFORMER = "transformer"
CONFORMER = "conformer"


class ValidationError(ValueError):
    """A configuration field violates its invariant."""

    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}")


@dataclass(frozen=True)
class ArchConfig:
    family: str
    d_model: int
    n_layers: int
    n_heads: int
    ff_mult: int = 4
    conv_kernel: int = 31
    max_seq: int = 512

    def __post_init__(self):
        if self.family not in (TRANSFORMER, CONFORMER):
            raise ValidationError("arch.family", f"must be transformer or conformer, got {self.family!r}")
        if self.n_layers < 1:
            raise ValidationError("arch.n_layers", f"must be >= 1, got {self.n_layers}")
        if self.d_model < 1:
            raise ValidationError("arch.d_model", f"must be >= 1, got {self.d_model}")
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ValidationError(
                "arch.n_heads", f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}"
            )
        if self.ff_mult < 1:
            raise ValidationError("arch.ff_mult", f"must be >= 1, got {self.ff_mult}")
        if self.conv_kernel % 2 != 1:
            raise ValidationError("arch.conv_kernel", f"must be odd, got {self.conv_kernel}")
        if self.max_seq < 1:
            raise ValidationError("arch.max_seq", f"must be >= 1, got {self.max_seq}")

    def fingerprint(self) -> str:
        """Stable shape hash; seeds excluded so deltas apply to any same-shape base."""
        canon = (
            f"family={self.family}|d_model={self.d_model}|n_layers={self.n_layers}"
            f"|n_heads={self.n_heads}|ff_mult={self.ff_mult}|conv_kernel={self.conv_kernel}"
        )
        return hashlib.sha256(canon.encode()).hexdigest()

    def label(self) -> str:
        return f"{self.family}-d{self.d_model}-L{self.n_layers}-h{self.n_heads}"


@dataclass(frozen=True)
class HeadConfig:
    n_outputs: int
    hidden_dim: int | None = None  # None -> d_model
    dropout_p: float = 0.5
    output_kind: str = "multiclass"

    def __post_init__(self):
        if self.n_outputs < 1:
            raise ValidationError("head.n_outputs", f"must be >= 1, got {self.n_outputs}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError("head.dropout_p", f"must be in [0, 1), got {self.dropout_p}")
        if self.output_kind not in ("multiclass", "multilabel"):
            raise ValidationError("head.output_kind", f"unknown kind {self.output_kind!r}")


# -- parameter initialization ------------------------------------------------


def _normal(name: str, shape: tuple[int, ...], seed: int, std: float = 0.02) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, name))
    return rng.normal(0.0, std, shape).astype(get_default_dtype())


def _add_linear(reg: Registry, name: str, d_in: int, d_out: int, seed: int) -> None:
    reg.add(Parameter(f"{name}.weight", Tensor(_normal(f"{name}.weight", (d_in, d_out), seed))))
    reg.add(Parameter(f"{name}.bias", Tensor(np.zeros(d_out, dtype=get_default_dtype()))))


def _add_norm(reg: Registry, name: str, d: int) -> None:
    dt = get_default_dtype()
    reg.add(Parameter(f"{name}.weight", Tensor(np.ones(d, dtype=dt))))
    reg.add(Parameter(f"{name}.bias", Tensor(np.zeros(d, dtype=dt))))


class Backbone:
    """An instantiated encoder stack plus its parameter registry."""

    def __init__(self, config: ArchConfig, registry: Registry, use_layers: int, seed: int):
        if use_layers < 1 or use_layers > config.n_layers:
            raise ValidationError("use_layers", f"must be in [1, {config.n_layers}], got {use_layers}")
        self.config = config
        self.registry = registry
        self.use_layers = use_layers
        self.seed = seed
        self.injected_method: str | None = None

    def param(self, name: str) -> Parameter:
        return self.registry[name]

    def _linear(self, name: str, x: Tensor, ctx) -> Tensor:
        h = matmul(x, self.registry[f"{name}.weight"].tensor) + self.registry[f"{name}.bias"].tensor
        if ctx is not None:
            h = ctx.post_linear(name, x, h)
        return h

    def _norm(self, name: str, x: Tensor, kind: str = "layer") -> Tensor:
        gamma = self.registry[f"{name}.weight"].tensor
        beta = self.registry[f"{name}.bias"].tensor
        if kind == "batch":
            return batch_norm(x, gamma, beta)
        return layer_norm(x, gamma, beta)

    def _mhsa(self, layer_idx: int, x: Tensor, ctx) -> Tensor:
        p = f"layer.{layer_idx}.attn"
        q = self._linear(f"{p}.q", x, ctx)
        k = self._linear(f"{p}.k", x, ctx)
        v = self._linear(f"{p}.v", x, ctx)
        extra_k = extra_v = None
        if ctx is not None:
            extra = ctx.prefix_kv(layer_idx)
            if extra is not None:
                extra_k, extra_v = extra
        out = attention(q, k, v, self.config.n_heads, extra_k=extra_k, extra_v=extra_v)
        return self._linear(f"{p}.o", out, ctx)

    def _transformer_layer(self, i: int, x: Tensor, ctx) -> Tensor:
        p = f"layer.{i}"
        h = x + self._mhsa(i, x, ctx)
        if ctx is not None:
            h = ctx.post_residual(i, "attn", h)
        x = self._norm(f"{p}.ln1", h)
        ff = self._linear(f"{p}.ff.out", gelu(self._linear(f"{p}.ff.in", x, ctx)), ctx)
        h = x + ff
        if ctx is not None:
            h = ctx.post_residual(i, "ff", h)
        return self._norm(f"{p}.ln2", h)

    def _conformer_layer(self, i: int, x: Tensor, ctx) -> Tensor:
        p = f"layer.{i}"
        h = self._norm(f"{p}.ln_ff1", x)
        h = self._linear(f"{p}.ff1.out", gelu(self._linear(f"{p}.ff1.in", h, ctx)), ctx)
        x = x + h * 0.5
        h = self._norm(f"{p}.ln_attn", x)
        x = x + self._mhsa(i, h, ctx)
        if ctx is not None:
            x = ctx.post_residual(i, "attn", x)
        h = self._norm(f"{p}.ln_conv", x)
        h = glu(self._linear(f"{p}.conv.pw1", h, ctx))
        h = depthwise_conv1d(
            h, self.registry[f"{p}.conv.dw.weight"].tensor, self.registry[f"{p}.conv.dw.bias"].tensor
        )
        h = self._norm(f"{p}.conv.bn", h, kind="batch")
        x = x + self._linear(f"{p}.conv.pw2", h, ctx)
        h = self._norm(f"{p}.ln_ff2", x)
        h = self._linear(f"{p}.ff2.out", gelu(self._linear(f"{p}.ff2.in", h, ctx)), ctx)
        x = x + h * 0.5
        if ctx is not None:
            x = ctx.post_residual(i, "ff", x)
        return self._norm(f"{p}.ln_final", x)

    def forward_features(self, x: Tensor, ctx=None) -> Tensor:
        """Run layers 1..use_layers; output length = input length + prompt count."""
        if x.ndim != 2 or x.shape[1] != self.config.d_model:
            raise ContractError(f"expected input [T, {self.config.d_model}], got {x.shape}")
        if x.shape[0] < 1:
            raise ContractError("sequence length must be >= 1")
        if ctx is not None:
            prompts = ctx.prompt_tokens()
            if prompts is not None and prompts.shape[0] > 0:
                x = concat([prompts, x], axis=0)
        if x.shape[0] > self.config.max_seq:
            raise ContractError(
                f"sequence length {x.shape[0]} exceeds max_seq {self.config.max_seq}"
            )
        layer_fn = (
            self._transformer_layer if self.config.family == TRANSFORMER else self._conformer_layer
        )
        for i in range(self.use_layers):
            x = layer_fn(i, x, ctx)
        return x


def build_backbone(config: ArchConfig, seed: int, use_layers: int | None = None) -> Backbone:
    """Instantiate the layer stack with deterministic per-parameter initialization."""
    if use_layers is None:
        use_layers = min(6, config.n_layers)
    reg = Registry()
    d = config.d_model
    f = config.ff_mult * d
    for i in range(config.n_layers):
        p = f"layer.{i}"
        for proj in ("q", "k", "v", "o"):
            _add_linear(reg, f"{p}.attn.{proj}", d, d, seed)
        if config.family == TRANSFORMER:
            _add_linear(reg, f"{p}.ff.in", d, f, seed)
            _add_linear(reg, f"{p}.ff.out", f, d, seed)
            _add_norm(reg, f"{p}.ln1", d)
            _add_norm(reg, f"{p}.ln2", d)
        else:
            for ff in ("ff1", "ff2"):
                _add_linear(reg, f"{p}.{ff}.in", d, f, seed)
                _add_linear(reg, f"{p}.{ff}.out", f, d, seed)
            _add_linear(reg, f"{p}.conv.pw1", d, 2 * d, seed)
            k = config.conv_kernel
            reg.add(
                Parameter(f"{p}.conv.dw.weight", Tensor(_normal(f"{p}.conv.dw.weight", (k, d), seed)))
            )
            reg.add(Parameter(f"{p}.conv.dw.bias", Tensor(np.zeros(d, dtype=get_default_dtype()))))
            _add_norm(reg, f"{p}.conv.bn", d)
            _add_linear(reg, f"{p}.conv.pw2", d, d, seed)
            for ln in ("ln_ff1", "ln_attn", "ln_conv", "ln_ff2", "ln_final"):
                _add_norm(reg, f"{p}.{ln}", d)
    return Backbone(config, reg, use_layers, seed)


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_heads: int,
    extra_k: Tensor | None = None,
    extra_v: Tensor | None = None,
) -> Tensor:
    """Scaled dot-product multi-head attention over [optional prefix; sequence].

    Prefix tokens extend only the key/value sequences; queries (and therefore
    the output length) are unchanged.
    """
    if (extra_k is None) != (extra_v is None):
        raise ContractError("extra_k and extra_v must be provided together")
    if extra_k is not None:
        if extra_k.shape[0] != extra_v.shape[0]:
            raise ContractError(
                f"prefix length mismatch: keys {extra_k.shape[0]} vs values {extra_v.shape[0]}"
            )
        if extra_k.shape[0] > 0:
            k = concat([extra_k, k], axis=0)
            v = concat([extra_v, v], axis=0)
    t, d = q.shape
    s = k.shape[0]
    hd = d // n_heads
    qh = transpose(reshape(q, (t, n_heads, hd)), (1, 0, 2))
    kh = transpose(reshape(k, (s, n_heads, hd)), (1, 2, 0))
    vh = transpose(reshape(v, (s, n_heads, hd)), (1, 0, 2))
    weights = softmax(matmul(qh, kh) * (1.0 / math.sqrt(hd)), axis=-1)
    out = matmul(weights, vh)
    return reshape(transpose(out, (1, 0, 2)), (t, d))


# -- classification head -----------------------------------------------------


class Head:
    """Task head: mean-pool, then an MLP with one hidden layer."""

    def __init__(self, d_model: int, config: HeadConfig, seed: int):
        self.d_model = d_model
        self.config = config
        hidden = config.hidden_dim if config.hidden_dim is not None else d_model
        self.hidden_dim = hidden
        self.registry = Registry()
        _add_linear(self.registry, "head.fc1", d_model, hidden, seed)
        _add_linear(self.registry, "head.fc2", hidden, config.n_outputs, seed)

    def parameter_count(self) -> int:
        return self.registry.total_size()


def build_head(d_model: int, config: HeadConfig, seed: int) -> Head:
    return Head(d_model, config, seed)


def pool_and_head(
    features: Tensor,
    head: Head,
    prompt_count: int = 0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean-pool non-prompt positions, project through the MLP, return logits."""
    if features.shape[0] <= prompt_count:
        raise ContractError(
            f"need at least one non-prompt position: T'={features.shape[0]}, prompts={prompt_count}"
        )
    content = features[prompt_count:] if prompt_count > 0 else features
    pooled = content.mean(axis=0, keepdims=True)  # [1, d]
    reg = head.registry
    h = matmul(pooled, reg["head.fc1.weight"].tensor) + reg["head.fc1.bias"].tensor
    h = gelu(h)
    h = dropout(h, head.config.dropout_p, training=training, rng=rng)
    logits = matmul(h, reg["head.fc2.weight"].tensor) + reg["head.fc2.bias"].tensor
    return reshape(logits, (head.config.n_outputs,))


# -- trainability presets -----------------------------------------------------


def mark_trainable(backbone: Backbone, pattern: str) -> int:
    """Set trainable on registry names matching a glob pattern; returns value count."""
    count = 0
    matched = False
    for name, param in backbone.registry.items():
        if fnmatch(name, pattern):
            param.trainable = True
            count += param.tensor.size
            matched = True
    if not matched:
        logging.getLogger(__name__).warning("pattern %r matched no parameters", pattern)
    return count


def apply_probing(backbone: Backbone) -> int:
    """Freeze the whole backbone (the task head alone is trained)."""
    for _, param in backbone.registry.items():
        param.trainable = False
    return 0


def apply_full_finetune(backbone: Backbone) -> int:
    """Make every used-layer parameter trainable; deeper layers stay frozen."""
    count = 0
    for name, param in backbone.registry.items():
        layer_idx = int(name.split(".")[1])
        param.trainable = layer_idx < backbone.use_layers
        if param.trainable:
            count += param.tensor.size
    return count
