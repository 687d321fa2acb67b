"""Composite layers: FFN, transformer block with learnable residual gains,
non-linear projection layer (NLL), recursive block, recursive MLP-mixer
block, and the external-loop composition."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import AttentionParams, sliced_group_mhsa
from .tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    add,
    gelu,
    layer_norm,
    matmul,
    mul,
    transpose,
)


def hidden_dim(ratio: float, d: int) -> int:
    """Hidden width of an MLP with a fractional expansion ratio (round to nearest)."""
    return int(math.floor(ratio * d + 0.5))


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class FFNParams:
    """Two linear layers around a GELU; hidden width = round(ratio * d)."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ratio: float


@dataclass
class ResidualGains:
    """Learnable coefficients on both branches of a block's residual sums.

    All start at exactly 1.0 (which reproduces the plain block bit for bit)
    and train without constraints.
    """

    attn_branch: Tensor
    attn_skip: Tensor
    ffn_branch: Tensor
    ffn_skip: Tensor


@dataclass
class NLLParams:
    """Non-shared LN + MLP + gained residual inserted after each recursion.

    Each recursion slot owns a distinct instance; this is what breaks the
    identity fixed point that naive weight reuse collapses into.
    """

    norm: NormParams
    mlp: FFNParams
    branch_gain: Tensor
    skip_gain: Tensor


@dataclass
class BlockParams:
    """The weights one physical block shares across all of its recursions."""

    attn: AttentionParams
    norm1: NormParams
    ffn: FFNParams
    norm2: NormParams
    gains: Optional[ResidualGains]  # None = plain residuals (baseline blocks)


@dataclass
class RecursiveBlockSpec:
    shared: BlockParams
    recursions: int
    nll: list[NLLParams]
    groups: list[int]
    mode: str = "P+I-L"
    nll_placement: str = "per_recursion"  # per_recursion | per_block | none
    drop_rates: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.recursions < 1:
            raise ConfigError("recursions must be >= 1")
        if len(self.groups) != self.recursions:
            raise ConfigError(
                f"got {len(self.groups)} group counts for {self.recursions} recursions"
            )
        if self.nll_placement == "per_recursion" and len(self.nll) != self.recursions:
            raise ConfigError(
                f"per-recursion placement needs {self.recursions} NLLs, got {len(self.nll)}"
            )
        if not self.drop_rates:
            self.drop_rates = [0.0] * self.recursions


@dataclass
class MixerBlockParams:
    """Token-mixing (sequence axis) and channel-mixing (feature axis) MLPs."""

    norm1: NormParams
    token_w1: Tensor  # (S, D_S)
    token_w2: Tensor  # (D_S, S)
    norm2: NormParams
    channel_w1: Tensor  # (C, D_C)
    channel_w2: Tensor  # (D_C, C)


def drop_path(
    x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool
) -> Tensor:
    """Stochastic depth on a residual branch: per-sample drop, rescaled."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ConfigError("drop_path with rate > 0 needs an rng in training mode")
    keep = 1.0 - rate
    mask = (rng.random(x.shape[0]) < keep).astype(x.data.dtype) / keep
    return mul(x, Tensor(mask.reshape((-1,) + (1,) * (x.ndim - 1))))


def ffn_forward(x: Tensor, p: FFNParams) -> Tensor:
    if x.shape[-1] != p.w1.shape[0]:
        raise ShapeError(f"ffn expects last dim {p.w1.shape[0]}, got {x.shape[-1]}")
    return add(matmul(gelu(add(matmul(x, p.w1), p.b1)), p.w2), p.b2)


def block_forward(
    x: Tensor,
    shared: BlockParams,
    groups: int,
    mode: str = "P+I-L",
    rng: Optional[np.random.Generator] = None,
    permutation: Optional[np.ndarray] = None,
    drop_rate: float = 0.0,
    training: bool = False,
) -> Tensor:
    """One application of the (shared-weight) transformer block.

    attn_out = a * MHSA(LN(x)) + b * x;  out = c * FFN(LN(attn_out)) + d * attn_out,
    with the gains absent for baseline blocks.
    """
    att = sliced_group_mhsa(
        layer_norm(x, shared.norm1.gain, shared.norm1.bias),
        shared.attn,
        groups,
        mode=mode,
        rng=rng,
        permutation=permutation,
    )
    att = drop_path(att, drop_rate, rng, training)
    g = shared.gains
    z = add(mul(g.attn_branch, att), mul(g.attn_skip, x)) if g else add(att, x)
    f = ffn_forward(layer_norm(z, shared.norm2.gain, shared.norm2.bias), shared.ffn)
    f = drop_path(f, drop_rate, rng, training)
    return add(mul(g.ffn_branch, f), mul(g.ffn_skip, z)) if g else add(f, z)


def nll_forward(x: Tensor, p: NLLParams) -> Tensor:
    """z -> zeta * MLP(LN(z)) + theta * z with non-shared weights."""
    h = ffn_forward(layer_norm(x, p.norm.gain, p.norm.bias), p.mlp)
    return add(mul(p.branch_gain, h), mul(p.skip_gain, x))


def recursive_block_forward(
    x: Tensor,
    spec: RecursiveBlockSpec,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> Tensor:
    """Apply the shared block ``recursions`` times, each followed by its NLL.

    Identical weights across the loop; the tape accumulates the sum of all
    per-recursion partials for them.
    """
    for i in range(spec.recursions):
        x = block_forward(
            x,
            spec.shared,
            spec.groups[i],
            mode=spec.mode,
            rng=rng if training else None,
            drop_rate=spec.drop_rates[i],
            training=training,
        )
        if spec.nll_placement == "per_recursion":
            x = nll_forward(x, spec.nll[i])
    if spec.nll_placement == "per_block" and spec.nll:
        x = nll_forward(x, spec.nll[0])
    return x


def mixer_block_forward(x: Tensor, p: MixerBlockParams, recursions: int = 1) -> Tensor:
    """Token-mix then channel-mix, repeated ``recursions`` times with the
    same weights; plain residuals, no NLL."""
    b, s, c = x.shape
    if p.token_w1.shape[0] != s or p.channel_w1.shape[0] != c:
        raise ShapeError(
            f"mixer built for (S={p.token_w1.shape[0]}, C={p.channel_w1.shape[0]}), got {x.shape}"
        )
    for _ in range(recursions):
        y = transpose(layer_norm(x, p.norm1.gain, p.norm1.bias), (0, 2, 1))  # (b, C, S)
        y = matmul(gelu(matmul(y, p.token_w1)), p.token_w2)
        x = add(x, transpose(y, (0, 2, 1)))
        z = layer_norm(x, p.norm2.gain, p.norm2.bias)
        x = add(x, matmul(gelu(matmul(z, p.channel_w1)), p.channel_w2))
    return x


def external_loop_forward(
    x: Tensor,
    blocks: list[BlockParams],
    loops: int,
    rng: Optional[np.random.Generator] = None,
    groups: int = 1,
) -> Tensor:
    """Cycle the whole ordered block list ``loops`` times, weights shared
    across cycles. loops=1 is plain sequential execution."""
    if loops < 1:
        raise ConfigError("loops must be >= 1")
    for _ in range(loops):
        for shared in blocks:
            x = block_forward(x, shared, groups, rng=rng)
    return x
