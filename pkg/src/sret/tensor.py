"""Dense tensors with a minimal reverse-mode automatic differentiation kernel.

Arrays are numpy-backed, float32 by default; gradient checks build everything
in float64 because central-difference tolerances are unreachable in single
precision.

A ``Tape`` records primitive applications in execution order while active
(define-by-run, rebuilt per forward pass). ``backward`` replays the records
in strict reverse recording order, summing partials for values consumed more
than once -- which is exactly how shared weights applied N times in sequence
pick up the sum of their N path gradients.
"""
from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ConfigError(ValueError):
    """Invalid architecture or hyper-parameter configuration."""


class NumericError(ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class PermutationError(ValueError):
    """An index vector is not a bijection on its domain."""


class ContractError(ValueError):
    """An operation was invoked outside its contract."""


_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """Dense n-d array of reals, optionally tracked on the active tape.

    Tensors are treated as immutable values by every operation; only the
    optimizer and the finite-difference harness write into ``data`` between
    forward passes.
    """

    __slots__ = ("data", "requires_grad", "tape_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.tape_node = None  # (tape, node index) while tracked

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self) -> "Tensor":
        return reduce_sum(self)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad})"

    # arithmetic sugar; scalars stay raw so float32 is not promoted
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Topological order equals recording order, so the backward traversal is a
    single reverse sweep. Gradient accumulation is additive: a value consumed
    k times receives the sum of its k partials.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def tracks(self, t) -> bool:
        if not isinstance(t, Tensor):
            return False
        return t.requires_grad or (
            t.tape_node is not None and t.tape_node[0] is self
        )

    def record(self, out: Tensor, inputs: tuple, bwd: Callable) -> None:
        out.tape_node = (self, len(self._nodes))
        self._nodes.append((out, inputs, bwd))


_TAPE_STACK: list[Tape] = []


def current_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor, tape: Tape) -> dict:
    """Reverse sweep: returns ``{tensor: grad array}`` for every
    requires_grad tensor that the scalar ``loss`` depends on through ``tape``.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if loss.tape_node is None or loss.tape_node[0] is not tape:
        raise ContractError("loss was not recorded on the given tape")
    id_grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for out, inputs, bwd in reversed(tape._nodes):
        g = id_grads.pop(id(out), None)
        if g is None:
            continue
        for t, p in zip(inputs, bwd(g)):
            if t is None or p is None:
                continue
            k = id(t)
            cur = id_grads.get(k)
            id_grads[k] = p if cur is None else cur + p
            if t.requires_grad:
                leaves[k] = t
    return {t: id_grads[k] for k, t in leaves.items() if k in id_grads}


# ---------------------------------------------------------------------------
# Recording helpers
# ---------------------------------------------------------------------------


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _trace2(a, b):
    """(tape, track_a, track_b) for a binary op, or (None, False, False)."""
    tape = current_tape()
    if tape is None:
        return None, False, False
    ta, tb = tape.tracks(a), tape.tracks(b)
    if not (ta or tb):
        return None, False, False
    return tape, ta, tb


def _trace1(x):
    tape = current_tape()
    if tape is None or not tape.tracks(x):
        return None
    return tape


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    out = Tensor(_data(a) + _data(b))
    tape, ta, tb = _trace2(a, b)
    if tape is not None:
        sa = a.data.shape if ta else None
        sb = b.data.shape if tb else None

        def bwd(g):
            return (
                _unbroadcast(g, sa) if ta else None,
                _unbroadcast(g, sb) if tb else None,
            )

        tape.record(out, (a if ta else None, b if tb else None), bwd)
    return out


def sub(a, b) -> Tensor:
    out = Tensor(_data(a) - _data(b))
    tape, ta, tb = _trace2(a, b)
    if tape is not None:
        sa = a.data.shape if ta else None
        sb = b.data.shape if tb else None

        def bwd(g):
            return (
                _unbroadcast(g, sa) if ta else None,
                _unbroadcast(-g, sb) if tb else None,
            )

        tape.record(out, (a if ta else None, b if tb else None), bwd)
    return out


def mul(a, b) -> Tensor:
    out = Tensor(_data(a) * _data(b))
    tape, ta, tb = _trace2(a, b)
    if tape is not None:
        da, db = _data(a), _data(b)
        sa = da.shape if ta else None
        sb = db.shape if tb else None

        def bwd(g):
            return (
                _unbroadcast(g * db, sa) if ta else None,
                _unbroadcast(g * da, sb) if tb else None,
            )

        tape.record(out, (a if ta else None, b if tb else None), bwd)
    return out


def div(a, b) -> Tensor:
    out = Tensor(_data(a) / _data(b))
    tape, ta, tb = _trace2(a, b)
    if tape is not None:
        da, db = _data(a), _data(b)
        sa = da.shape if ta else None
        sb = db.shape if tb else None

        def bwd(g):
            ga = _unbroadcast(g / db, sa) if ta else None
            gb = _unbroadcast(-g * da / (db * db), sb) if tb else None
            return ga, gb

        tape.record(out, (a if ta else None, b if tb else None), bwd)
    return out


def neg(x: Tensor) -> Tensor:
    out = Tensor(-x.data)
    tape = _trace1(x)
    if tape is not None:
        tape.record(out, (x,), lambda g: (-g,))
    return out


def sqrt(x: Tensor) -> Tensor:
    out = Tensor(np.sqrt(x.data))
    tape = _trace1(x)
    if tape is not None:
        y = out.data
        tape.record(out, (x,), lambda g: (g * 0.5 / y,))
    return out


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    out = Tensor(np.sum(x.data, axis=axes, keepdims=keepdims))
    tape = _trace1(x)
    if tape is not None:
        in_shape = x.data.shape
        if axes is None:
            kept = (1,) * len(in_shape)
        else:
            ax = (axes,) if isinstance(axes, int) else tuple(axes)
            ax = tuple(a % len(in_shape) for a in ax)
            kept = tuple(1 if i in ax else s for i, s in enumerate(in_shape))

        def bwd(g):
            return (np.broadcast_to(g.reshape(kept), in_shape),)

        tape.record(out, (x,), bwd)
    return out


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if axes is None:
        n = x.data.size
    else:
        ax = (axes,) if isinstance(axes, int) else tuple(axes)
        n = 1
        for a in ax:
            n *= x.data.shape[a]
    return mul(reduce_sum(x, axes, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF (erf form, no tanh shortcut)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * cdf)
    tape = _trace1(x)
    if tape is not None:
        xd = x.data

        def bwd(g):
            pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
            return (g * (cdf + xd * pdf),)

        tape.record(out, (x,), bwd)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    tape = _trace1(x)
    if tape is not None:
        mask = x.data > 0
        tape.record(out, (x,), lambda g: (g * mask,))
    return out


def softmax_lastdim(x: Tensor) -> Tensor:
    """Max-subtracted softmax along the last axis; rows sum to one."""
    if x.data.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last axis")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains non-finite values")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)
    tape = _trace1(x)
    if tape is not None:

        def bwd(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            return ((g - dot) * y,)

        tape.record(out, (x,), bwd)
    return out


def log_softmax_lastdim(x: Tensor) -> Tensor:
    if not np.isfinite(x.data).all():
        raise NumericError("log-softmax input contains non-finite values")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    out = Tensor(y)
    tape = _trace1(x)
    if tape is not None:

        def bwd(g):
            return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

        tape.record(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# Linear algebra and shape primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with broadcasting over leading axes.

    Backward is the one rule the whole model leans on:
    dA = dC @ B^T, dB = A^T @ dC.
    """
    da, db = _data(a), _data(b)
    if da.ndim < 2 or db.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {da.shape} @ {db.shape}")
    if da.shape[-1] != db.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {da.shape} @ {db.shape}")
    out = Tensor(da @ db)
    tape, ta, tb = _trace2(a, b)
    if tape is not None:
        sa = da.shape if ta else None
        sb = db.shape if tb else None

        def bwd(g):
            ga = _unbroadcast(g @ np.swapaxes(db, -1, -2), sa) if ta else None
            gb = _unbroadcast(np.swapaxes(da, -1, -2) @ g, sb) if tb else None
            return ga, gb

        tape.record(out, (a if ta else None, b if tb else None), bwd)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    tape = _trace1(x)
    if tape is not None:
        orig = x.data.shape
        tape.record(out, (x,), lambda g: (g.reshape(orig),))
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(x.data.transpose(axes))
    tape = _trace1(x)
    if tape is not None:
        inverse = tuple(np.argsort(axes))
        tape.record(out, (x,), lambda g: (g.transpose(inverse),))
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward zero-embeds the gradient."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(x.data[idx])
    tape = _trace1(x)
    if tape is not None:
        shape = x.data.shape

        def bwd(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[idx] = g
            return (full,)

        tape.record(out, (x,), bwd)
    return out


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Reorder rows of a (b, n, d) tensor by a permutation of {0..n-1}.

    Row i of the output is row index[i] of the input; the backward pass
    scatters gradients through the inverse permutation.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"gather_rows expects (b, n, d), got {x.shape}")
    idx = np.asarray(index)
    n = x.data.shape[1]
    if idx.shape != (n,) or not np.array_equal(np.sort(idx), np.arange(n)):
        raise PermutationError(f"index is not a bijection on 0..{n - 1}")
    out = Tensor(x.data[:, idx, :])
    tape = _trace1(x)
    if tape is not None:
        inv = np.argsort(idx)
        tape.record(out, (x,), lambda g: (g[:, inv, :],))
    return out


def unfold_patches(x: Tensor, kernel: int, stride: int, padding: int) -> Tensor:
    """Extract k x k patches: (b, c, h, w) -> (b, out_h*out_w, c*k*k).

    The backward rule is the adjoint scatter-add, so convolution lowered to
    unfold + matmul inherits correct gradients from this one primitive.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"unfold expects (b, c, h, w), got {x.shape}")
    b, c, h, w = x.data.shape
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kernel} does not fit input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (b, c, oh, ow, k, k)
    out = Tensor(
        np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
            b, oh * ow, c * kernel * kernel
        )
    )
    tape = _trace1(x)
    if tape is not None:
        hp, wp = h + 2 * padding, w + 2 * padding

        def bwd(g):
            gp = g.reshape(b, oh, ow, c, kernel, kernel).transpose(0, 3, 1, 2, 4, 5)
            gx = np.zeros((b, c, hp, wp), dtype=g.dtype)
            for ki in range(kernel):
                for kj in range(kernel):
                    gx[
                        :, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride
                    ] += gp[:, :, :, :, ki, kj]
            if padding:
                gx = gx[:, :, padding : padding + h, padding : padding + w]
            return (gx,)

        tape.record(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# Composite layers built on the primitives above
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last dim {d}"
        )
    mu = mean(x, axes=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axes=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, gain), bias)


def conv2d_grouped(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    stride: int = 1,
    groups: int = 1,
    padding: int = 0,
) -> Tensor:
    """Grouped 2-d convolution lowered to patch unfolding + matmul.

    weight: (c_out, c_in/groups, k, k); output spatial extent is
    floor((h + 2*padding - k)/stride) + 1.
    """
    b, cin, h, w = x.data.shape
    cout, cin_g, kh, kw = weight.data.shape
    if kh != kw:
        raise ConfigError(f"conv kernel must be square, got {kh}x{kw}")
    if cin % groups or cout % groups:
        raise ConfigError(
            f"channels ({cin} in, {cout} out) must be divisible by groups={groups}"
        )
    if cin_g != cin // groups:
        raise ShapeError(
            f"weight expects {cin_g} input channels per group, input provides {cin // groups}"
        )
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    patch = cin_g * kh * kw
    cols = unfold_patches(x, kh, stride, padding)  # (b, P, cin*k*k)
    cols = reshape(cols, (b, oh * ow, groups, patch))
    cols = transpose(cols, (2, 0, 1, 3))  # (g, b, P, patch)
    wmat = transpose(reshape(weight, (groups, cout // groups, patch)), (0, 2, 1))
    wmat = reshape(wmat, (groups, 1, patch, cout // groups))  # broadcast over b
    out = matmul(cols, wmat)  # (g, b, P, cout/g)
    out = reshape(transpose(out, (1, 2, 0, 3)), (b, oh * ow, cout))
    out = add(out, bias)
    return transpose(reshape(out, (b, oh, ow, cout)), (0, 3, 1, 2))


def global_avg_pool(x: Tensor) -> Tensor:
    """(b, c, h, w) -> (b, c) spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (b, c, h, w), got {x.shape}")
    return mean(x, axes=(2, 3))


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


def grad_check_finite_diff(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    samples_per_param: int = 8,
    rng: Optional[np.random.Generator] = None,
    zero_tol: float = 1e-9,
) -> float:
    """Max relative error between taped gradients and central differences.

    ``f`` must be a deterministic scalar-valued closure over ``params``
    (re-seed any internal randomness per call) built in float64.

    Coordinates whose first estimate disagrees are re-measured at h/10 and
    h/100 and the best estimate kept: a ReLU kink straddled by the interval
    poisons the central difference at one step size but not at smaller ones,
    while a genuinely wrong analytic gradient fails at every step size.

    Coordinates where both sides sit below ``zero_tol`` are machine-precision
    zeros (e.g. a conv bias ahead of batch norm, whose true gradient cancels
    exactly) and contribute no error; the floor is far below anything the
    relative tolerance could resolve, so it cannot hide a real defect.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    with Tape() as tape:
        loss = f()
    if loss.data.size != 1:
        raise ContractError("gradient check needs a scalar loss")
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite")
    grads = backward(loss, tape)
    worst = 0.0
    for p in params:
        g = grads.get(p)
        size = p.data.size
        if size <= samples_per_param:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=samples_per_param, replace=False)
        flat = p.data.reshape(-1)
        for j in coords:
            an = float(g.reshape(-1)[j]) if g is not None else 0.0
            orig = flat[j]
            best = math.inf
            for step in (h, h / 10.0, h / 100.0):
                flat[j] = orig + step
                up = f().item()
                flat[j] = orig - step
                down = f().item()
                flat[j] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NumericError("perturbed loss is not finite")
                cd = (up - down) / (2.0 * step)
                if abs(an) < zero_tol and abs(cd) < zero_tol:
                    rel = 0.0
                else:
                    rel = abs(an - cd) / max(abs(an), abs(cd), 1e-8)
                best = min(best, rel)
                if best < 1e-5:
                    break
            worst = max(worst, best)
    return worst
