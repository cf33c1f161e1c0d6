"""The six parameter-efficient methods as injection passes over a backbone.

Each method freezes the base encoder and attaches its own trainable parameters
(or, for bias-only tuning, re-marks a subset of the base). Scale/shift and
low-rank injections can later be folded back into the host weights so the
merged model is structurally identical to the base.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import ArchConfig, Backbone, Head, ValidationError, pool_and_head
from .tensor import (
    ContractError,
    Parameter,
    Registry,
    Tensor,
    derive_seed,
    gelu,
    get_default_dtype,
    matmul,
    reshape,
    transpose,
)

# -- method configurations ----------------------------------------------------


@dataclass(frozen=True)
class Adapter:
    bottleneck: int = 16

    def __post_init__(self):
        if self.bottleneck < 1:
            raise ValidationError("petl.bottleneck", f"must be >= 1, got {self.bottleneck}")


@dataclass(frozen=True)
class Prompt:
    n_prompts: int = 64

    def __post_init__(self):
        if self.n_prompts < 0:
            raise ValidationError("petl.n_prompts", f"must be >= 0, got {self.n_prompts}")


@dataclass(frozen=True)
class Prefix:
    n_prefix: int = 32
    mlp_hidden: int | None = None  # None -> d_model

    def __post_init__(self):
        if self.n_prefix < 0:
            raise ValidationError("petl.n_prefix", f"must be >= 0, got {self.n_prefix}")
        if self.mlp_hidden is not None and self.mlp_hidden < 1:
            raise ValidationError("petl.mlp_hidden", f"must be >= 1, got {self.mlp_hidden}")


@dataclass(frozen=True)
class BitFit:
    pass


@dataclass(frozen=True)
class Ssf:
    pass


@dataclass(frozen=True)
class Lora:
    rank: int = 2
    scope: str = "att"

    def __post_init__(self):
        if self.rank < 1:
            raise ValidationError("petl.rank", f"must be >= 1, got {self.rank}")
        if self.scope not in ("att", "all"):
            raise ValidationError("petl.scope", f"must be 'att' or 'all', got {self.scope!r}")


@dataclass(frozen=True)
class FullFinetune:
    pass


@dataclass(frozen=True)
class Probing:
    pass


PetlConfig = Adapter | Prompt | Prefix | BitFit | Ssf | Lora
MethodConfig = PetlConfig | FullFinetune | Probing

_METHOD_NAMES = {
    Adapter: "adapter",
    Prompt: "prompt",
    Prefix: "prefix",
    BitFit: "bitfit",
    Ssf: "ssf",
    Lora: "lora",
    FullFinetune: "ft",
    Probing: "probing",
}


def method_name(cfg: MethodConfig) -> str:
    return _METHOD_NAMES[type(cfg)]


def hyperparam_label(cfg: MethodConfig) -> str:
    if isinstance(cfg, Adapter):
        return f"bottleneck={cfg.bottleneck}"
    if isinstance(cfg, Prompt):
        return f"n_prompts={cfg.n_prompts}"
    if isinstance(cfg, Prefix):
        return f"n_prefix={cfg.n_prefix}"
    if isinstance(cfg, Lora):
        return f"rank={cfg.rank};scope={cfg.scope}"
    return ""


# -- attachment sites ---------------------------------------------------------


def attention_hosts(layer_idx: int) -> list[str]:
    return [f"layer.{layer_idx}.attn.{p}" for p in ("q", "k", "v", "o")]


def lora_hosts(arch: ArchConfig, layer_idx: int, scope: str) -> list[str]:
    hosts = attention_hosts(layer_idx)
    if scope == "all":
        p = f"layer.{layer_idx}"
        if arch.family == "transformer":
            hosts += [f"{p}.ff.in", f"{p}.ff.out"]
        else:
            hosts += [
                f"{p}.ff1.in",
                f"{p}.ff1.out",
                f"{p}.ff2.in",
                f"{p}.ff2.out",
                f"{p}.conv.pw1",
                f"{p}.conv.pw2",
            ]
    return hosts


def ssf_hosts(arch: ArchConfig, layer_idx: int) -> list[str]:
    hosts = attention_hosts(layer_idx)
    p = f"layer.{layer_idx}"
    if arch.family == "transformer":
        hosts += [f"{p}.ff.in", f"{p}.ff.out"]
    else:
        hosts += [
            f"{p}.ff1.in",
            f"{p}.ff1.out",
            f"{p}.ff2.in",
            f"{p}.ff2.out",
            f"{p}.conv.pw1",
            f"{p}.conv.pw2",
        ]
    return hosts


# -- injected parameter blocks -------------------------------------------------


class AdapterBlock:
    """Residual bottleneck: x + up(gelu(down(layer_norm(x))))."""

    def __init__(self, registry: Registry, prefix: str, d: int, bottleneck: int, seed: int):
        dt = get_default_dtype()
        rng = np.random.default_rng(derive_seed(seed, f"{prefix}.down.weight"))
        down = rng.normal(0.0, 0.02, (d, bottleneck)).astype(dt)
        self.ln_gamma = registry.add(Parameter(f"{prefix}.ln.weight", Tensor(np.ones(d, dtype=dt))))
        self.ln_beta = registry.add(Parameter(f"{prefix}.ln.bias", Tensor(np.zeros(d, dtype=dt))))
        self.w_down = registry.add(Parameter(f"{prefix}.down.weight", Tensor(down)))
        self.b_down = registry.add(Parameter(f"{prefix}.down.bias", Tensor(np.zeros(bottleneck, dtype=dt))))
        # zero up-projection makes the block the identity at initialization
        self.w_up = registry.add(Parameter(f"{prefix}.up.weight", Tensor(np.zeros((bottleneck, d), dtype=dt))))
        self.b_up = registry.add(Parameter(f"{prefix}.up.bias", Tensor(np.zeros(d, dtype=dt))))


def adapter_forward(block: AdapterBlock, x: Tensor) -> Tensor:
    from .tensor import layer_norm

    h = layer_norm(x, block.ln_gamma.tensor, block.ln_beta.tensor)
    h = gelu(matmul(h, block.w_down.tensor) + block.b_down.tensor)
    h = matmul(h, block.w_up.tensor) + block.b_up.tensor
    return x + h


class SsfPair:
    """Per-channel scale (init 1) and shift (init 0) on one linear output."""

    def __init__(self, registry: Registry, prefix: str, d_out: int):
        dt = get_default_dtype()
        self.scale = registry.add(Parameter(f"{prefix}.scale", Tensor(np.ones(d_out, dtype=dt))))
        self.shift = registry.add(Parameter(f"{prefix}.shift", Tensor(np.zeros(d_out, dtype=dt))))


def ssf_forward(pair: SsfPair, h: Tensor) -> Tensor:
    return h * pair.scale.tensor + pair.shift.tensor


class LoraPair:
    """Low-rank update for one host weight: A [d_out, r] (normal), B [r, d_in] (zero)."""

    def __init__(self, registry: Registry, prefix: str, d_in: int, d_out: int, rank: int, seed: int):
        if rank > min(d_in, d_out):
            raise ValidationError(
                "petl.rank", f"rank {rank} exceeds min dimension of host ({d_in}x{d_out})"
            )
        dt = get_default_dtype()
        rng = np.random.default_rng(derive_seed(seed, f"{prefix}.A"))
        self.a = registry.add(
            Parameter(f"{prefix}.A", Tensor(rng.normal(0.0, 0.02, (d_out, rank)).astype(dt)))
        )
        self.b = registry.add(Parameter(f"{prefix}.B", Tensor(np.zeros((rank, d_in), dtype=dt))))


def lora_forward(pair: LoraPair, x: Tensor, h: Tensor) -> Tensor:
    """h + A(Bx), factored; the rank-r product is never materialized in training."""
    low = matmul(x, transpose(pair.b.tensor, (1, 0)))
    return h + matmul(low, transpose(pair.a.tensor, (1, 0)))


class PromptBank:
    """Trainable tokens prepended once to the layer-1 input."""

    def __init__(self, registry: Registry, n_prompts: int, d: int, seed: int):
        self.n_prompts = n_prompts
        self.embeddings = None
        if n_prompts > 0:
            emb = np.random.default_rng(derive_seed(seed, "prompt.embeddings")).normal(
                0.0, 0.02, (n_prompts, d)
            ).astype(get_default_dtype())
            self.embeddings = registry.add(Parameter("prompt.embeddings", Tensor(emb)))


class PrefixBank:
    """Key/value prefix tokens, produced by a shared two-layer MLP while training.

    After training the MLP outputs can be baked into a constant [L, 2, n, d]
    block and the MLP dropped from the inference path.
    """

    def __init__(self, registry: Registry, n_prefix: int, d: int, hidden: int, use_layers: int, seed: int):
        dt = get_default_dtype()
        self.n_prefix = n_prefix
        self.d = d
        self.use_layers = use_layers
        self.baked: np.ndarray | None = None
        emb = np.random.default_rng(derive_seed(seed, "prefix.embeddings")).normal(
            0.0, 0.02, (n_prefix, d)
        ).astype(dt)
        w_in = np.random.default_rng(derive_seed(seed, "prefix.mlp.in.weight")).normal(
            0.0, 0.02, (d, hidden)
        ).astype(dt)
        out_dim = use_layers * 2 * d
        w_out = np.random.default_rng(derive_seed(seed, "prefix.mlp.out.weight")).normal(
            0.0, 0.02, (hidden, out_dim)
        ).astype(dt)
        self.embeddings = registry.add(Parameter("prefix.embeddings", Tensor(emb)))
        self.w_in = registry.add(Parameter("prefix.mlp.in.weight", Tensor(w_in)))
        self.b_in = registry.add(Parameter("prefix.mlp.in.bias", Tensor(np.zeros(hidden, dtype=dt))))
        self.w_out = registry.add(Parameter("prefix.mlp.out.weight", Tensor(w_out)))
        self.b_out = registry.add(Parameter("prefix.mlp.out.bias", Tensor(np.zeros(out_dim, dtype=dt))))

    def full_kv(self) -> Tensor:
        """All per-layer prefixes as one [use_layers, 2, n_prefix, d] tensor."""
        h = gelu(matmul(self.embeddings.tensor, self.w_in.tensor) + self.b_in.tensor)
        out = matmul(h, self.w_out.tensor) + self.b_out.tensor
        out = reshape(out, (self.n_prefix, self.use_layers, 2, self.d))
        return transpose(out, (1, 2, 0, 3))

    def layer_kv(self, layer_idx: int) -> tuple[Tensor, Tensor]:
        if self.baked is not None:
            return Tensor(self.baked[layer_idx, 0]), Tensor(self.baked[layer_idx, 1])
        full = self.full_kv()
        return full[layer_idx, 0], full[layer_idx, 1]


# -- injection ------------------------------------------------------------------


class PetlContext:
    """Hook implementation the backbone consults during a forward pass."""

    def __init__(self):
        self.lora: dict[str, LoraPair] = {}
        self.ssf: dict[str, SsfPair] = {}
        self.adapters: dict[tuple[int, str], AdapterBlock] = {}
        self.prompt_bank: PromptBank | None = None
        self.prefix_bank: PrefixBank | None = None

    def prompt_tokens(self) -> Tensor | None:
        if self.prompt_bank is None or self.prompt_bank.embeddings is None:
            return None
        return self.prompt_bank.embeddings.tensor

    def prefix_kv(self, layer_idx: int) -> tuple[Tensor, Tensor] | None:
        if self.prefix_bank is None or self.prefix_bank.n_prefix == 0:
            return None
        return self.prefix_bank.layer_kv(layer_idx)

    def post_linear(self, name: str, x: Tensor, h: Tensor) -> Tensor:
        pair = self.lora.get(name)
        if pair is not None:
            h = lora_forward(pair, x, h)
        ssf = self.ssf.get(name)
        if ssf is not None:
            h = ssf_forward(ssf, h)
        return h

    def post_residual(self, layer_idx: int, site: str, h: Tensor) -> Tensor:
        block = self.adapters.get((layer_idx, site))
        if block is not None:
            h = adapter_forward(block, h)
        return h


class AdaptedModel:
    """A frozen backbone plus one method's trainable parameters (and the task head)."""

    def __init__(
        self,
        base: Backbone,
        method: MethodConfig,
        injected: Registry,
        ctx: PetlContext,
        head: Head | None = None,
    ):
        self.base = base
        self.method = method
        self.injected = injected
        self.ctx = ctx
        self.head = head
        self.merged = False

    @property
    def prompt_count(self) -> int:
        bank = self.ctx.prompt_bank
        return bank.n_prompts if bank is not None else 0

    def forward_features(self, x: Tensor) -> Tensor:
        return self.base.forward_features(x, self.ctx)

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        if self.head is None:
            raise ContractError("model has no head attached")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=get_default_dtype()))
        feats = self.forward_features(x)
        return pool_and_head(feats, self.head, self.prompt_count, training=training, rng=rng)

    def trainable_parameters(self) -> list[Parameter]:
        params = [p for p in self.injected.values() if p.trainable]
        params += [p for _, p in self.base.registry.items() if p.trainable]
        if self.head is not None:
            params += [p for p in self.head.registry.values() if p.trainable]
        return params

    def structural_tree(self) -> dict[str, tuple[int, ...]]:
        """Backbone parameter tree plus any injected entries (empty once merged)."""
        tree = {name: p.tensor.shape for name, p in self.base.registry.items()}
        tree.update({name: p.tensor.shape for name, p in self.injected.items()})
        return tree


def inject(base: Backbone, cfg: PetlConfig, head: Head | None = None, seed: int | None = None) -> AdaptedModel:
    """Freeze the base and attach one method's parameters; only those (plus the head) train."""
    if base.injected_method is not None:
        raise ContractError(f"backbone already adapted with {base.injected_method!r}")
    if not isinstance(cfg, (Adapter, Prompt, Prefix, BitFit, Ssf, Lora)):
        raise ContractError(f"inject expects one of the six methods, got {method_name(cfg)!r}")
    if seed is None:
        seed = base.seed
    for _, param in base.registry.items():
        param.trainable = False

    injected = Registry()
    ctx = PetlContext()
    arch = base.config
    d = arch.d_model

    if isinstance(cfg, Adapter):
        for i in range(base.use_layers):
            for site in ("attn", "ff"):
                ctx.adapters[(i, site)] = AdapterBlock(
                    injected, f"layer.{i}.adapter.{site}", d, cfg.bottleneck, seed
                )
    elif isinstance(cfg, Prompt):
        ctx.prompt_bank = PromptBank(injected, cfg.n_prompts, d, seed)
    elif isinstance(cfg, Prefix):
        hidden = cfg.mlp_hidden if cfg.mlp_hidden is not None else d
        ctx.prefix_bank = PrefixBank(injected, cfg.n_prefix, d, hidden, base.use_layers, seed)
    elif isinstance(cfg, BitFit):
        for name, param in base.registry.items():
            layer_idx = int(name.split(".")[1])
            if layer_idx < base.use_layers and name.endswith(".bias"):
                param.trainable = True
    elif isinstance(cfg, Ssf):
        for i in range(base.use_layers):
            for host in ssf_hosts(arch, i):
                d_out = base.registry[f"{host}.weight"].tensor.shape[1]
                parts = host.split(".")
                prefix = f"layer.{i}.ssf." + ".".join(parts[2:])
                ctx.ssf[host] = SsfPair(injected, prefix, d_out)
    elif isinstance(cfg, Lora):
        for i in range(base.use_layers):
            for host in lora_hosts(arch, i, cfg.scope):
                d_in, d_out = base.registry[f"{host}.weight"].tensor.shape
                parts = host.split(".")
                prefix = f"layer.{i}.lora." + ".".join(parts[2:])
                ctx.lora[host] = LoraPair(injected, prefix, d_in, d_out, cfg.rank, seed)

    base.injected_method = method_name(cfg)
    return AdaptedModel(base, cfg, injected, ctx, head=head)


def apply_method(base: Backbone, cfg: MethodConfig, head: Head | None = None, seed: int | None = None) -> AdaptedModel:
    """inject() for the six methods; trainability presets for ft/probing."""
    if isinstance(cfg, (FullFinetune, Probing)):
        if base.injected_method is not None:
            raise ContractError(f"backbone already adapted with {base.injected_method!r}")
        from .backbone import apply_full_finetune, apply_probing

        if isinstance(cfg, FullFinetune):
            apply_full_finetune(base)
        else:
            apply_probing(base)
        base.injected_method = method_name(cfg)
        return AdaptedModel(base, cfg, Registry(), PetlContext(), head=head)
    return inject(base, cfg, head=head, seed=seed)


# -- reparameterization merges ----------------------------------------------------


def merge_ssf(model: AdaptedModel) -> None:
    """Fold every scale/shift pair into its host weight and bias."""
    if not isinstance(model.method, Ssf):
        raise ContractError(f"merge_ssf on a {method_name(model.method)!r} model")
    if model.merged:
        raise ContractError("model already merged")
    for host, pair in model.ctx.ssf.items():
        w = model.base.registry[f"{host}.weight"]
        b = model.base.registry[f"{host}.bias"]
        w.data[...] = w.data * pair.scale.data
        b.data[...] = pair.scale.data * b.data + pair.shift.data
        model.injected.remove(pair.scale.name)
        model.injected.remove(pair.shift.name)
    model.ctx.ssf.clear()
    model.merged = True


def merge_lora(model: AdaptedModel) -> None:
    """Add each low-rank product into its host weight."""
    if not isinstance(model.method, Lora):
        raise ContractError(f"merge_lora on a {method_name(model.method)!r} model")
    if model.merged:
        raise ContractError("model already merged")
    for host, pair in model.ctx.lora.items():
        w = model.base.registry[f"{host}.weight"]
        w.data[...] = w.data + (pair.a.data @ pair.b.data).T.astype(w.data.dtype)
        model.injected.remove(pair.a.name)
        model.injected.remove(pair.b.name)
    model.ctx.lora.clear()
    model.merged = True


def bake_prefix(model: AdaptedModel) -> None:
    """Store the MLP outputs as constant per-layer prefixes and drop the MLP."""
    bank = model.ctx.prefix_bank
    if bank is None:
        raise ContractError("bake_prefix on a model without a prefix bank")
    if bank.baked is not None:
        return
    if bank.n_prefix > 0:
        bank.baked = bank.full_kv().data.copy()
    else:
        bank.baked = np.zeros((bank.use_layers, 2, 0, bank.d), dtype=get_default_dtype())
    for param in (bank.embeddings, bank.w_in, bank.b_in, bank.w_out, bank.b_out):
        model.injected.remove(param.name)


def bitfit_mark(model: AdaptedModel) -> int:
    """Element count of the trainable bias set of a bias-only model."""
    if not isinstance(model.method, BitFit):
        raise ContractError(f"bitfit_mark on a {method_name(model.method)!r} model")
    return sum(p.tensor.size for _, p in model.base.registry.items() if p.trainable)
