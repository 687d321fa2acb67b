"""Complete networks: convolutional stem, spatial-pyramid stages of recursive
blocks, grouped conv-pooling between stages, GAP head; plus the plain-ViT
baseline, the recursive MLP-mixer, and the dual-branch mixed-depth wrapper.

Every trainable tensor lives exactly once in ``model.registry`` (shared
weights once, however many times they are applied); batch-norm running
statistics live in ``model.buffers``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .attention import PERMUTATION_MODES, AttentionParams
from .blocks import (
    BlockParams,
    FFNParams,
    MixerBlockParams,
    NLLParams,
    NormParams,
    RecursiveBlockSpec,
    ResidualGains,
    block_forward,
    hidden_dim,
    mixer_block_forward,
    nll_forward,
    recursive_block_forward,
)
from .tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    add,
    conv2d_grouped,
    div,
    layer_norm,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sqrt,
    sub,
    transpose,
    unfold_patches,
)

VARIANTS = ("sret", "deit_baseline", "mixer")


@dataclass
class GroupSchedule:
    """Per-stage, per-recursion group counts plus the permutation mode."""

    stages: list[list[int]]
    permutation_mode: str = "P+I-L"

    def __post_init__(self):
        if self.permutation_mode not in PERMUTATION_MODES:
            raise ConfigError(f"unknown permutation mode {self.permutation_mode!r}")


@dataclass
class ModelConfig:
    stage_dims: list[int]
    stage_blocks: list[int]
    heads_per_stage: list[int]
    group_schedule: GroupSchedule
    recursions_per_block: int = 2
    ffn_ratio: float = 3.6
    nll_ratio: float = 1.0
    stem_channels: list[int] = field(default_factory=lambda: [32, 64, 64])
    num_classes: int = 1000
    input_resolution: int = 224
    variant: str = "sret"
    patch_size: int = 16  # deit_baseline / mixer patch embedding
    nll_placement: str = "per_recursion"  # per_recursion | per_block | none
    use_lrc: bool = True
    drop_path_rate: float = 0.0
    mixer_token_hidden: int = 384
    mixer_channel_hidden: int = 3072

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        n = len(self.stage_dims)
        if not (
            len(self.stage_blocks) == n
            and len(self.heads_per_stage) == n
            and len(self.group_schedule.stages) == n
        ):
            raise ConfigError(
                "stage_dims, stage_blocks, heads_per_stage and group schedule "
                "must all describe the same number of stages"
            )
        for d, h in zip(self.stage_dims, self.heads_per_stage):
            if d % h:
                raise ConfigError(f"stage dim {d} is not divisible by {h} heads")
        for st in self.group_schedule.stages:
            if len(st) != self.recursions_per_block:
                raise ConfigError(
                    f"group schedule entry {st} does not list "
                    f"{self.recursions_per_block} recursions"
                )
        if self.variant == "sret":
            if len(self.stem_channels) != 3:
                raise ConfigError("the stem is exactly three conv-BN-ReLU layers")
            if self.stem_channels[-1] != self.stage_dims[0]:
                raise ConfigError(
                    f"stem output channels {self.stem_channels[-1]} must equal "
                    f"stage-1 dim {self.stage_dims[0]}"
                )
            if self.input_resolution % 8:
                raise ConfigError("input resolution must be divisible by 8")
            for s, (tokens, st) in enumerate(
                zip(self.stage_tokens(), self.group_schedule.stages)
            ):
                for g in st:
                    if tokens % g:
                        raise ConfigError(
                            f"group count {g} does not divide the {tokens} tokens of stage {s + 1}"
                        )
        else:
            if self.input_resolution % self.patch_size:
                raise ConfigError("input resolution must be divisible by the patch size")
        if self.recursions_per_block < 1:
            raise ConfigError("recursions_per_block must be >= 1")
        if self.nll_placement not in ("per_recursion", "per_block", "none"):
            raise ConfigError(f"unknown nll placement {self.nll_placement!r}")

    def stage_tokens(self) -> list[int]:
        """Token count per stage: (r/8)^2 then quartered at each pooling."""
        if self.variant == "sret":
            side = self.input_resolution // 8
            return [(side >> s) ** 2 for s in range(len(self.stage_dims))]
        n = (self.input_resolution // self.patch_size) ** 2
        return [n] * len(self.stage_dims)

    def nll_count_per_block(self) -> int:
        if self.nll_placement == "per_recursion":
            return self.recursions_per_block
        if self.nll_placement == "per_block":
            return 1
        return 0


def preset(name: str) -> ModelConfig:
    """Published architecture configurations, plus desk-scale ones for tests."""
    if name == "sret_t":
        return ModelConfig(
            stage_dims=[64, 128, 256],
            stage_blocks=[2, 5, 3],
            heads_per_stage=[2, 4, 8],
            group_schedule=GroupSchedule([[8, 2], [4, 1], [1, 1]]),
            recursions_per_block=2,
            ffn_ratio=3.6,
            nll_ratio=1.0,
            stem_channels=[32, 64, 64],
        )
    if name == "sret_tl":
        cfg = preset("sret_t")
        return replace(cfg, ffn_ratio=4.0)
    if name == "sret_s":
        return ModelConfig(
            stage_dims=[126, 252, 504],
            stage_blocks=[2, 5, 3],
            heads_per_stage=[3, 6, 12],
            group_schedule=GroupSchedule([[8, 2], [4, 1], [1, 1]]),
            recursions_per_block=2,
            ffn_ratio=3.0,
            nll_ratio=2.0,
            stem_channels=[63, 126, 126],
        )
    if name == "deit_t":
        return ModelConfig(
            stage_dims=[192],
            stage_blocks=[12],
            heads_per_stage=[3],
            group_schedule=GroupSchedule([[1]]),
            recursions_per_block=1,
            ffn_ratio=4.0,
            nll_ratio=0.0,
            stem_channels=[],
            variant="deit_baseline",
            patch_size=16,
            nll_placement="none",
            use_lrc=False,
        )
    if name == "mixer_b16_recursive":
        return ModelConfig(
            stage_dims=[768],
            stage_blocks=[12],
            heads_per_stage=[1],
            group_schedule=GroupSchedule([[1, 1]]),
            recursions_per_block=2,
            ffn_ratio=4.0,
            nll_ratio=0.0,
            stem_channels=[],
            variant="mixer",
            patch_size=16,
            nll_placement="none",
            use_lrc=False,
            mixer_token_hidden=384,
            mixer_channel_hidden=3072,
        )
    if name == "sret_desk":
        return ModelConfig(
            stage_dims=[16, 32, 64],
            stage_blocks=[1, 1, 1],
            heads_per_stage=[2, 4, 8],
            group_schedule=GroupSchedule([[2, 1], [2, 1], [1, 1]]),
            recursions_per_block=2,
            ffn_ratio=3.6,
            nll_ratio=1.0,
            stem_channels=[8, 16, 16],
            num_classes=10,
            input_resolution=32,
        )
    if name == "sret_desk_teacher":
        return ModelConfig(
            stage_dims=[24, 48, 96],
            stage_blocks=[1, 1, 1],
            heads_per_stage=[3, 6, 12],
            group_schedule=GroupSchedule([[2, 1], [2, 1], [1, 1]]),
            recursions_per_block=2,
            ffn_ratio=3.6,
            nll_ratio=1.0,
            stem_channels=[12, 24, 24],
            num_classes=10,
            input_resolution=32,
        )
    raise ConfigError(f"unknown preset {name!r}")


PRESETS = (
    "sret_t",
    "sret_tl",
    "sret_s",
    "deit_t",
    "mixer_b16_recursive",
    "sret_desk",
    "sret_desk_teacher",
)


# ---------------------------------------------------------------------------
# Parameter allocation
# ---------------------------------------------------------------------------


class _Alloc:
    """Names, initializes and registers parameters during a build."""

    def __init__(self, rng: np.random.Generator, dtype, registry: dict):
        self.rng = rng
        self.dtype = dtype
        self.registry = registry

    def _register(self, name: str, t: Tensor) -> Tensor:
        if name in self.registry:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self.registry[name] = t
        return t

    def trunc_normal(self, name: str, shape, std: float = 0.02) -> Tensor:
        x = self.rng.normal(0.0, std, size=shape)
        bad = np.abs(x) > 2 * std
        while bad.any():
            x[bad] = self.rng.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(x) > 2 * std
        return self._register(name, Tensor(x.astype(self.dtype), requires_grad=True))

    def zeros(self, name: str, shape) -> Tensor:
        return self._register(
            name, Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)
        )

    def ones(self, name: str, shape=()) -> Tensor:
        return self._register(
            name, Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)
        )

    def norm(self, prefix: str, d: int) -> NormParams:
        return NormParams(self.ones(f"{prefix}.gain", (d,)), self.zeros(f"{prefix}.bias", (d,)))

    def ffn(self, prefix: str, d: int, ratio: float) -> FFNParams:
        h = hidden_dim(ratio, d)
        return FFNParams(
            self.trunc_normal(f"{prefix}.w1", (d, h)),
            self.zeros(f"{prefix}.b1", (h,)),
            self.trunc_normal(f"{prefix}.w2", (h, d)),
            self.zeros(f"{prefix}.b2", (d,)),
            ratio,
        )

    def attention(self, prefix: str, d: int, heads: int) -> AttentionParams:
        return AttentionParams(
            self.trunc_normal(f"{prefix}.w_qkv", (d, 3 * d)),
            self.zeros(f"{prefix}.b_qkv", (3 * d,)),
            self.trunc_normal(f"{prefix}.w_o", (d, d)),
            self.zeros(f"{prefix}.b_o", (d,)),
            heads,
        )

    def gains(self, prefix: str) -> ResidualGains:
        return ResidualGains(
            self.ones(f"{prefix}.attn_branch"),
            self.ones(f"{prefix}.attn_skip"),
            self.ones(f"{prefix}.ffn_branch"),
            self.ones(f"{prefix}.ffn_skip"),
        )

    def nll(self, prefix: str, d: int, ratio: float) -> NLLParams:
        return NLLParams(
            self.norm(f"{prefix}.norm", d),
            self.ffn(f"{prefix}.mlp", d, ratio),
            self.ones(f"{prefix}.branch_gain"),
            self.ones(f"{prefix}.skip_gain"),
        )


@dataclass
class ConvBN:
    weight: Tensor
    bias: Tensor
    bn_gain: Tensor
    bn_bias: Tensor
    bn_prefix: str  # buffer key prefix for running stats


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor


def linear(x: Tensor, p: LinearParams) -> Tensor:
    return add(matmul(x, p.weight), p.bias)


# ---------------------------------------------------------------------------
# The model
# ---------------------------------------------------------------------------


class SReTModel:
    """A built network: parameter registry plus the structures that use it."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.registry: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.stem: list[ConvBN] = []
        self.pos_embed: Optional[Tensor] = None
        self.patch_embed: Optional[LinearParams] = None
        self.stages: list[list[RecursiveBlockSpec]] = []
        self.mixer_blocks: list[MixerBlockParams] = []
        self.pools: list[ConvBN] = []
        self.final_norm: Optional[NormParams] = None
        self.head: Optional[LinearParams] = None

    # -- forward -----------------------------------------------------------

    def forward(
        self,
        images: Tensor,
        mode: str = "eval",
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """images (b, 3, r, r) -> logits (b, num_classes)."""
        training = self._check_mode(images, mode, rng)
        tokens = self.embed(images, training)
        if self.config.variant == "mixer":
            for blk in self.mixer_blocks:
                tokens = mixer_block_forward(tokens, blk, self.config.recursions_per_block)
        else:
            for s, stage in enumerate(self.stages):
                for spec in stage:
                    tokens = recursive_block_forward(tokens, spec, rng, training)
                if s < len(self.pools):
                    tokens = self.conv_pool_forward(tokens, s, training)
        return self.head_forward(tokens)

    def _check_mode(self, images: Tensor, mode: str, rng) -> bool:
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        r = self.config.input_resolution
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (r, r):
            raise ShapeError(
                f"expected images (b, 3, {r}, {r}), got {images.shape}"
            )
        training = mode == "train"
        if training and rng is None:
            raise ConfigError("training mode needs an rng for permutations")
        return training

    def embed(self, images: Tensor, training: bool) -> Tensor:
        if self.config.variant == "sret":
            tokens = self.stem_forward(images, training)
        else:
            p = self.config.patch_size
            cols = unfold_patches(images, p, p, 0)  # (b, n, 3*p*p)
            tokens = linear(cols, self.patch_embed)
        if self.pos_embed is not None:
            tokens = add(tokens, self.pos_embed)
        return tokens

    def stem_forward(self, images: Tensor, training: bool = False) -> Tensor:
        """Three stride-2 conv-BN-ReLU layers then flatten to (b, n, d) tokens."""
        x = images
        for layer in self.stem:
            x = conv2d_grouped(x, layer.weight, layer.bias, stride=2, groups=1, padding=1)
            x = self.batch_norm(x, layer, training)
            x = relu(x)
        b, c, hh, ww = x.shape
        return reshape(transpose(x, (0, 2, 3, 1)), (b, hh * ww, c))

    def batch_norm(
        self, x: Tensor, layer: ConvBN, training: bool, momentum: float = 0.1, eps: float = 1e-5
    ) -> Tensor:
        rm_key, rv_key = layer.bn_prefix + ".running_mean", layer.bn_prefix + ".running_var"
        c = x.shape[1]
        if training:
            mu = mean(x, axes=(0, 2, 3), keepdims=True)
            centered = sub(x, mu)
            var = mean(mul(centered, centered), axes=(0, 2, 3), keepdims=True)
            self.buffers[rm_key] = (
                (1 - momentum) * self.buffers[rm_key] + momentum * mu.data.reshape(c)
            )
            self.buffers[rv_key] = (
                (1 - momentum) * self.buffers[rv_key] + momentum * var.data.reshape(c)
            )
            xhat = div(centered, sqrt(add(var, eps)))
        else:
            shape = (1, c, 1, 1)
            mu = self.buffers[rm_key].reshape(shape)
            sd = np.sqrt(self.buffers[rv_key].reshape(shape) + eps)
            xhat = div(sub(x, Tensor(mu.astype(x.dtype))), Tensor(sd.astype(x.dtype)))
        shape = (1, c, 1, 1)
        return add(
            mul(xhat, reshape(layer.bn_gain, shape)), reshape(layer.bn_bias, shape)
        )

    def conv_pool_forward(self, tokens: Tensor, stage: int, training: bool = False) -> Tensor:
        """Halve the token grid and double channels via grouped strided conv."""
        b, n, c = tokens.shape
        side = int(round(np.sqrt(n)))
        if side * side != n:
            raise ShapeError(f"token count {n} is not a perfect square")
        pool = self.pools[stage]
        x = transpose(reshape(tokens, (b, side, side, c)), (0, 3, 1, 2))
        x = conv2d_grouped(x, pool.weight, pool.bias, stride=2, groups=c, padding=1)
        x = self.batch_norm(x, pool, training)
        b2, c2, h2, w2 = x.shape
        return reshape(transpose(x, (0, 2, 3, 1)), (b2, h2 * w2, c2))

    def head_forward(self, tokens: Tensor) -> Tensor:
        if self.final_norm is not None:
            tokens = layer_norm(tokens, self.final_norm.gain, self.final_norm.bias)
        pooled = mean(tokens, axes=1)  # GAP over tokens; no class token anywhere
        return linear(pooled, self.head)

    # -- introspection ------------------------------------------------------

    def trainable_params(self) -> dict[str, Tensor]:
        return dict(self.registry)

    def param_count(self) -> int:
        return sum(t.size for t in self.registry.values())


def build_model(
    config: ModelConfig, rng: Optional[np.random.Generator] = None, dtype=np.float32
) -> SReTModel:
    """Allocate all parameters for ``config`` (registry complete, shared once)."""
    if rng is None:
        rng = np.random.default_rng(0)
    model = SReTModel(config, dtype=dtype)
    alloc = _Alloc(rng, model.dtype, model.registry)
    cfg = config

    if cfg.variant == "sret":
        cin = 3
        for i, cout in enumerate(cfg.stem_channels, start=1):
            prefix = f"stem.conv{i}"
            layer = ConvBN(
                alloc.trunc_normal(f"{prefix}.weight", (cout, cin, 3, 3)),
                alloc.zeros(f"{prefix}.bias", (cout,)),
                alloc.ones(f"{prefix}.bn_gain", (cout,)),
                alloc.zeros(f"{prefix}.bn_bias", (cout,)),
                prefix,
            )
            model.buffers[f"{prefix}.running_mean"] = np.zeros(cout, dtype=model.dtype)
            model.buffers[f"{prefix}.running_var"] = np.ones(cout, dtype=model.dtype)
            model.stem.append(layer)
            cin = cout
        tokens0 = cfg.stage_tokens()[0]
        model.pos_embed = alloc.trunc_normal("pos_embed", (1, tokens0, cfg.stage_dims[0]))
        _build_stages(model, alloc)
        for s in range(len(cfg.stage_dims) - 1):
            to = cfg.stage_dims[s + 1]
            prefix = f"pool{s + 1}"
            pool = ConvBN(
                alloc.trunc_normal(f"{prefix}.weight", (to, 1, 3, 3)),
                alloc.zeros(f"{prefix}.bias", (to,)),
                alloc.ones(f"{prefix}.bn_gain", (to,)),
                alloc.zeros(f"{prefix}.bn_bias", (to,)),
                prefix,
            )
            model.buffers[f"{prefix}.running_mean"] = np.zeros(to, dtype=model.dtype)
            model.buffers[f"{prefix}.running_var"] = np.ones(to, dtype=model.dtype)
            model.pools.append(pool)
    elif cfg.variant == "deit_baseline":
        d = cfg.stage_dims[0]
        n = cfg.stage_tokens()[0]
        model.patch_embed = LinearParams(
            alloc.trunc_normal("patch_embed.weight", (3 * cfg.patch_size**2, d)),
            alloc.zeros("patch_embed.bias", (d,)),
        )
        model.pos_embed = alloc.trunc_normal("pos_embed", (1, n, d))
        _build_stages(model, alloc)
        model.final_norm = alloc.norm("final_norm", d)
    else:  # mixer
        c = cfg.stage_dims[0]
        s = cfg.stage_tokens()[0]
        model.patch_embed = LinearParams(
            alloc.trunc_normal("patch_embed.weight", (3 * cfg.patch_size**2, c)),
            alloc.zeros("patch_embed.bias", (c,)),
        )
        for i in range(cfg.stage_blocks[0]):
            prefix = f"block{i}"
            model.mixer_blocks.append(
                MixerBlockParams(
                    alloc.norm(f"{prefix}.norm1", c),
                    alloc.trunc_normal(f"{prefix}.token_w1", (s, cfg.mixer_token_hidden)),
                    alloc.trunc_normal(f"{prefix}.token_w2", (cfg.mixer_token_hidden, s)),
                    alloc.norm(f"{prefix}.norm2", c),
                    alloc.trunc_normal(f"{prefix}.channel_w1", (c, cfg.mixer_channel_hidden)),
                    alloc.trunc_normal(f"{prefix}.channel_w2", (cfg.mixer_channel_hidden, c)),
                )
            )
        model.final_norm = alloc.norm("final_norm", c)

    model.head = LinearParams(
        alloc.trunc_normal("head.weight", (cfg.stage_dims[-1], cfg.num_classes)),
        alloc.zeros("head.bias", (cfg.num_classes,)),
    )
    return model


def _build_stages(model: SReTModel, alloc: _Alloc) -> None:
    cfg = model.config
    total_apps = sum(b * cfg.recursions_per_block for b in cfg.stage_blocks)
    app = 0
    for s, (d, blocks, heads) in enumerate(
        zip(cfg.stage_dims, cfg.stage_blocks, cfg.heads_per_stage)
    ):
        stage = []
        for k in range(blocks):
            prefix = f"stage{s + 1}.block{k}"
            shared = BlockParams(
                alloc.attention(f"{prefix}.attn", d, heads),
                alloc.norm(f"{prefix}.norm1", d),
                alloc.ffn(f"{prefix}.ffn", d, cfg.ffn_ratio),
                alloc.norm(f"{prefix}.norm2", d),
                alloc.gains(f"{prefix}.lrc") if cfg.use_lrc else None,
            )
            nlls = [
                alloc.nll(f"{prefix}.nll{i}", d, cfg.nll_ratio)
                for i in range(cfg.nll_count_per_block())
            ]
            rates = []
            for _ in range(cfg.recursions_per_block):
                frac = app / max(total_apps - 1, 1)
                rates.append(cfg.drop_path_rate * frac)
                app += 1
            stage.append(
                RecursiveBlockSpec(
                    shared=shared,
                    recursions=cfg.recursions_per_block,
                    nll=nlls,
                    groups=list(cfg.group_schedule.stages[s]),
                    mode=cfg.group_schedule.permutation_mode,
                    nll_placement=cfg.nll_placement,
                    drop_rates=rates,
                )
            )
        model.stages.append(stage)


# ---------------------------------------------------------------------------
# Mixed-depth dual-branch training graph
# ---------------------------------------------------------------------------


class MixedDepthModel:
    """Two branches over one set of weights, fed by the same stem.

    Branch A runs the recursive control flow; branch B is the flattened
    sequence of the very same block applications (no recursion loop), ending
    in its own classifier head. Unrolling is semantics-preserving, so with
    identical permutations both branches produce identical logits.
    """

    def __init__(self, base: SReTModel):
        if base.config.variant != "sret":
            raise ConfigError("mixed-depth training wraps the pyramid variant")
        if base.config.recursions_per_block < 2:
            raise ConfigError("mixed-depth needs recursions >= 2")
        self.base = base
        self.config = base.config
        self.dtype = base.dtype
        self.registry = dict(base.registry)
        self.buffers = base.buffers
        # the extra head starts as a copy of the base head, so at identical
        # permutations the two branches produce identical logits until
        # training pulls the heads apart
        w = Tensor(base.head.weight.data.copy(), requires_grad=True)
        b = Tensor(base.head.bias.data.copy(), requires_grad=True)
        self.registry["unrolled_head.weight"] = w
        self.registry["unrolled_head.bias"] = b
        self.unrolled_head = LinearParams(w, b)
        # flat plan: one entry per block application, no loop structure
        self.unrolled_plan = [
            (s, k, i)
            for s in range(len(base.stages))
            for k in range(len(base.stages[s]))
            for i in range(base.stages[s][k].recursions)
        ]

    def forward_branches(
        self,
        images: Tensor,
        mode: str = "eval",
        rng: Optional[np.random.Generator] = None,
    ) -> tuple[Tensor, Tensor]:
        base = self.base
        training = base._check_mode(images, mode, rng)
        stem_tokens = base.embed(images, training)

        recursive = stem_tokens
        for s, stage in enumerate(base.stages):
            for spec in stage:
                recursive = recursive_block_forward(recursive, spec, rng, training)
            if s < len(base.pools):
                recursive = base.conv_pool_forward(recursive, s, training)
        logits_a = base.head_forward(recursive)

        unrolled = stem_tokens
        pending = self.unrolled_plan
        for idx, (s, k, i) in enumerate(pending):
            spec = base.stages[s][k]
            unrolled = block_forward(
                unrolled,
                spec.shared,
                spec.groups[i],
                mode=spec.mode,
                rng=rng if training else None,
                drop_rate=spec.drop_rates[i] if training else 0.0,
                training=training,
            )
            if spec.nll_placement == "per_recursion":
                unrolled = nll_forward(unrolled, spec.nll[i])
            elif spec.nll_placement == "per_block" and i == spec.recursions - 1 and spec.nll:
                unrolled = nll_forward(unrolled, spec.nll[0])
            last_of_stage = idx + 1 == len(pending) or pending[idx + 1][0] != s
            if last_of_stage and s < len(base.pools):
                unrolled = base.conv_pool_forward(unrolled, s, training)
        pooled = mean(unrolled, axes=1)
        logits_b = linear(pooled, self.unrolled_head)
        return logits_a, logits_b

    def forward(self, images, mode="eval", rng=None) -> Tensor:
        return self.forward_branches(images, mode, rng)[0]

    def param_count(self) -> int:
        return sum(t.size for t in self.registry.values())


def build_mixed_depth(model: SReTModel) -> MixedDepthModel:
    return MixedDepthModel(model)
