"""Multi-head self-attention and its sliced-group approximation.

The sliced form shares every weight with the global form: tokens are
(optionally) shuffled by a random permutation, cut into contiguous slices,
attended within each slice independently, stitched back together, and
(optionally) restored to their original order by the inverse permutation
before the output projection. The attention core therefore costs 1/groups
of the global core while the parameter count is unchanged.

Permutation modes:

* ``"P"``      permute only; token order stays shuffled afterwards.
* ``"P+I"``    permute, then apply the inverse after the grouped attention.
* ``"P+I-L"``  like P+I, but skip both steps entirely wherever groups == 1
               (the default; a single group is already global attention).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    add,
    gather_rows,
    matmul,
    mul,
    narrow,
    reshape,
    softmax_lastdim,
    transpose,
)

PERMUTATION_MODES = ("P", "P+I", "P+I-L")


@dataclass
class AttentionParams:
    """Shared projection weights for one (possibly recursive) attention layer.

    Query/key/value are realized as a single fused d -> 3d projection, so the
    parameter count matches the fused convention: 3*(d*d + d) either way.
    """

    w_qkv: Tensor  # (d, 3d)
    b_qkv: Tensor  # (3d,)
    w_o: Tensor  # (d, d)
    b_o: Tensor  # (d,)
    heads: int

    @property
    def d_model(self) -> int:
        return self.w_qkv.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def __post_init__(self):
        d = self.w_qkv.shape[0]
        if self.w_qkv.shape != (d, 3 * d):
            raise ShapeError(f"fused qkv projection must be (d, 3d), got {self.w_qkv.shape}")
        if d % self.heads:
            raise ConfigError(f"d_model={d} is not divisible by heads={self.heads}")


def make_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random bijection on {0..n-1}; deterministic for a fixed seed."""
    return rng.permutation(n)


def invert_permutation(p: np.ndarray) -> np.ndarray:
    """q with q[p[i]] = i for all i."""
    return np.argsort(np.asarray(p))


def _project_qkv(x: Tensor, p: AttentionParams):
    d = p.d_model
    qkv = add(matmul(x, p.w_qkv), p.b_qkv)
    return (
        narrow(qkv, 2, 0, d),
        narrow(qkv, 2, d, d),
        narrow(qkv, 2, 2 * d, d),
    )


def vanilla_mhsa(x: Tensor, p: AttentionParams) -> Tensor:
    """Global scaled dot-product attention over all tokens, heads concatenated."""
    b, n, d = x.shape
    if d != p.d_model:
        raise ShapeError(f"input dim {d} does not match attention dim {p.d_model}")
    h, dk = p.heads, p.head_dim
    q, k, v = _project_qkv(x, p)
    q = transpose(reshape(q, (b, n, h, dk)), (0, 2, 1, 3))  # (b, h, n, dk)
    k = transpose(reshape(k, (b, n, h, dk)), (0, 2, 1, 3))
    v = transpose(reshape(v, (b, n, h, dk)), (0, 2, 1, 3))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    ctx = matmul(softmax_lastdim(scores), v)  # (b, h, n, dk)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    return add(matmul(ctx, p.w_o), p.b_o)


def sliced_group_mhsa(
    x: Tensor,
    p: AttentionParams,
    groups: int,
    mode: str = "P+I-L",
    rng: Optional[np.random.Generator] = None,
    permutation: Optional[np.ndarray] = None,
) -> Tensor:
    """Attention within ``groups`` contiguous slices of a shuffled sequence.

    Weights are exactly those of :func:`vanilla_mhsa`. The permutation is
    sampled fresh from ``rng`` on every call (training); with ``rng=None``
    and no explicit ``permutation`` the identity is used, which is the frozen
    evaluation behaviour. When groups == 1 and the mode skips permutation the
    result is bitwise identical to the global form.
    """
    if mode not in PERMUTATION_MODES:
        raise ConfigError(f"unknown permutation mode {mode!r}")
    b, n, d = x.shape
    if d != p.d_model:
        raise ShapeError(f"input dim {d} does not match attention dim {p.d_model}")
    if n % groups:
        raise ConfigError(f"groups={groups} does not divide token count {n}")
    apply_perm = not (groups == 1 and mode == "P+I-L")
    if not apply_perm:
        return vanilla_mhsa(x, p)

    if permutation is None:
        permutation = make_permutation(n, rng) if rng is not None else np.arange(n)
    h, dk = p.heads, p.head_dim
    m = n // groups

    x = gather_rows(x, permutation)
    q, k, v = _project_qkv(x, p)
    # (b, n, d) -> (b, groups, heads, m, dk): slices are contiguous runs of
    # the shuffled sequence, attended independently below.
    q = transpose(reshape(q, (b, groups, m, h, dk)), (0, 1, 3, 2, 4))
    k = transpose(reshape(k, (b, groups, m, h, dk)), (0, 1, 3, 2, 4))
    v = transpose(reshape(v, (b, groups, m, h, dk)), (0, 1, 3, 2, 4))
    scores = mul(matmul(q, transpose(k, (0, 1, 2, 4, 3))), 1.0 / math.sqrt(dk))
    ctx = matmul(softmax_lastdim(scores), v)  # (b, g, h, m, dk)
    ctx = reshape(transpose(ctx, (0, 1, 3, 2, 4)), (b, n, d))
    if mode in ("P+I", "P+I-L"):
        ctx = gather_rows(ctx, invert_permutation(permutation))
    return add(matmul(ctx, p.w_o), p.b_o)
