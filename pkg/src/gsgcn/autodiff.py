"""Dense tensors with reverse-mode differentiation on top of numpy.

Every primitive returns a fresh :class:`Tensor`; when any input requires a
gradient the result carries a :class:`ComputeNode` holding the parents and the
closure that maps the output gradient back to the inputs.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputeNode",
    "ShapeError",
    "NonDeterministicLossError",
    "precision",
    "no_grad",
    "get_dtype",
    "add",
    "sub",
    "mul",
    "matmul",
    "concat",
    "slice_",
    "pad_zero",
    "relu",
    "exp",
    "log",
    "softmax",
    "mean",
    "sum_",
    "reshape",
    "transpose",
    "batchnorm",
    "scale",
    "shift",
    "power",
    "clip",
    "backward",
    "finite_diff_check",
    "gradient_report",
    "dump_graph",
]

_DTYPE = np.float32
DEBUG = bool(os.environ.get("GSGCN_DEBUG"))
_GRAD_ENABLED = True

# Backward rules are looked up here at call time so tests can swap one out.
BACKWARD_RULES: dict[str, Callable] = {}


class ShapeError(ValueError):
    pass


class NonDeterministicLossError(RuntimeError):
    pass


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch every newly created tensor to ``float32`` or ``float64``."""
    global _DTYPE
    new = {"float32": np.float32, "float64": np.float64}[name]
    old = _DTYPE
    _DTYPE = new
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Record no graph inside the block; results never require grad."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class ComputeNode:
    __slots__ = ("op", "parents", "ctx")

    def __init__(self, op: str, parents: tuple["Tensor", ...], ctx: dict):
        self.op = op
        self.parents = parents
        self.ctx = ctx


class Tensor:
    """An N-d array of reals plus, optionally, the node that produced it."""

    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        if arr.size == 0:
            raise ShapeError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.node: ComputeNode | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *perm):
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return transpose(self, perm)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], **ctx) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.node = None
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.node = ComputeNode(op, tuple(parents), ctx)
    if DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b))


def _add_backward(node, g):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b))


def _sub_backward(node, g):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b))


def _mul_backward(node, g):
    a, b = node.parents
    ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
    return ga, gb


def scale(a: Tensor, c: float) -> Tensor:
    return _make("scale", a.data * a.data.dtype.type(c), (a,), c=c)


def _scale_backward(node, g):
    return (g * g.dtype.type(node.ctx["c"]),)


def shift(a: Tensor, c: float) -> Tensor:
    return _make("shift", a.data + a.data.dtype.type(c), (a,))


def _shift_backward(node, g):
    return (g,)


def power(a: Tensor, p: float) -> Tensor:
    return _make("power", np.power(a.data, a.data.dtype.type(p)), (a,), p=p)


def _power_backward(node, g):
    (a,) = node.parents
    p = node.ctx["p"]
    if p == 0:
        return (np.zeros_like(g),)
    return (g * a.data.dtype.type(p) * np.power(a.data, a.data.dtype.type(p - 1)),)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    return _make("clip", np.clip(a.data, lo, hi), (a,), lo=lo, hi=hi)


def _clip_backward(node, g):
    (a,) = node.parents
    inside = (a.data >= node.ctx["lo"]) & (a.data <= node.ctx["hi"])
    return (g * inside,)


def relu(a: Tensor) -> Tensor:
    return _make("relu", np.maximum(a.data, 0), (a,))


def _relu_backward(node, g):
    (a,) = node.parents
    # subgradient 0 at exactly 0
    return (g * (a.data > 0),)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), out=out)


def _exp_backward(node, g):
    return (g * node.ctx["out"],)


def log(a: Tensor) -> Tensor:
    return _make("log", np.log(a.data), (a,))


def _log_backward(node, g):
    (a,) = node.parents
    return (g / a.data,)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} in shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", s, (a,), axis=axis, out=s)


def _softmax_backward(node, g):
    s = node.ctx["out"]
    axis = node.ctx["axis"]
    return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


# ---------------------------------------------------------------- contraction


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Contract the last axis of ``a`` with the second-to-last of ``b``; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    if b.ndim == 2 and a.ndim > 2:
        # one GEMM over the flattened leading axes
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = np.matmul(a.data, b.data)
    return _make("matmul", out, (a, b))


def _matmul_backward(node, g):
    a, b = node.parents
    ga = gb = None
    if b.ndim == 2 and a.ndim > 2:
        g2 = g.reshape(-1, g.shape[-1])
        if a.requires_grad:
            ga = (g2 @ b.data.T).reshape(a.shape)
        if b.requires_grad:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g2
        return ga, gb
    if a.ndim == 2 and b.ndim == 3:
        if a.requires_grad:
            ga = np.tensordot(g, b.data, axes=([0, 2], [0, 2]))
        if b.requires_grad:
            gb = np.matmul(a.data.T, g)
        return ga, gb
    if a.requires_grad:
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
    if b.requires_grad:
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
    return ga, gb


# ---------------------------------------------------------------- structural


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and m != n for i, (m, n) in enumerate(zip(t.shape, ref))
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, axis=ax, sizes=sizes)


def _concat_backward(node, g):
    ax = node.ctx["axis"]
    bounds = np.cumsum(node.ctx["sizes"])[:-1]
    return tuple(np.split(g, bounds, axis=ax))


def slice_(a: Tensor, idx) -> Tensor:
    """Basic (view-style) indexing: ints, slices with steps, ``...``."""
    if not isinstance(idx, tuple):
        idx = (idx,)
    for i in idx:
        if not (isinstance(i, (int, np.integer, slice)) or i is Ellipsis):
            raise TypeError(f"slice: only basic indexing is supported, got {type(i).__name__}")
    out = a.data[idx]
    if out.size == 0:
        raise ShapeError(f"slice: empty result from shape {a.shape} with index {idx}")
    return _make("slice", np.ascontiguousarray(out), (a,), idx=idx)


def _slice_backward(node, g):
    (a,) = node.parents
    full = np.zeros(a.shape, dtype=g.dtype)
    full[node.ctx["idx"]] = g
    return (full,)


def pad_zero(a: Tensor, pad_width: Sequence[tuple[int, int]]) -> Tensor:
    pad_width = [tuple(p) for p in pad_width]
    if len(pad_width) != a.ndim:
        raise ShapeError(f"pad_zero: pad spec for {len(pad_width)} axes, tensor has shape {a.shape}")
    return _make("pad_zero", np.pad(a.data, pad_width), (a,), pad_width=pad_width)


def _pad_backward(node, g):
    idx = tuple(slice(lo, g.shape[i] - hi) for i, (lo, hi) in enumerate(node.ctx["pad_width"]))
    return (g[idx],)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make("reshape", out, (a,))


def _reshape_backward(node, g):
    return (g.reshape(node.parents[0].shape),)


def transpose(a: Tensor, perm: Sequence[int]) -> Tensor:
    perm = tuple(perm)
    if sorted(perm) != list(range(a.ndim)):
        raise ShapeError(f"transpose: bad permutation {perm} for shape {a.shape}")
    return _make("transpose", np.ascontiguousarray(a.data.transpose(perm)), (a,), perm=perm)


def _transpose_backward(node, g):
    return (g.transpose(np.argsort(node.ctx["perm"])),)


# ---------------------------------------------------------------- reductions


def _axes(a: Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(a.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % a.ndim for ax in axes)


def sum_(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _axes(a, axes)
    return _make("sum", np.asarray(a.data.sum(axis=ax, keepdims=keepdims)), (a,), axes=ax, keepdims=keepdims)


def _sum_backward(node, g):
    (a,) = node.parents
    if not node.ctx["keepdims"]:
        g = np.expand_dims(g, node.ctx["axes"])
    return (np.broadcast_to(g, a.shape),)


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _axes(a, axes)
    return _make("mean", np.asarray(a.data.mean(axis=ax, keepdims=keepdims)), (a,), axes=ax, keepdims=keepdims)


def _mean_backward(node, g):
    (a,) = node.parents
    count = int(np.prod([a.shape[i] for i in node.ctx["axes"]]))
    if not node.ctx["keepdims"]:
        g = np.expand_dims(g, node.ctx["axes"])
    return (np.broadcast_to(g / g.dtype.type(count), a.shape),)


# ---------------------------------------------------------------- batchnorm


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    channel_axis: int = 1,
    momentum: float = 0.9,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel normalization over every non-channel axis.

    In training mode batch statistics are used and, unless ``update_stats`` is
    off, the running buffers are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    ax = channel_axis % x.ndim
    C = x.shape[ax]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm: channel extent {C} vs gamma {gamma.shape} / beta {beta.shape}")
    bshape = [1] * x.ndim
    bshape[ax] = C
    red = tuple(i for i in range(x.ndim) if i != ax)
    dt = x.data.dtype
    if training:
        mu = x.data.mean(axis=red, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=red, keepdims=True)
        if update_stats:
            m = x.data.size // C
            unbiased = var.reshape(C) * (m / (m - 1) if m > 1 else 1.0)
            running_mean *= momentum
            running_mean += (1 - momentum) * mu.reshape(C)
            running_var *= momentum
            running_var += (1 - momentum) * unbiased
    else:
        xc = x.data - running_mean.reshape(bshape).astype(dt)
        var = running_var.reshape(bshape).astype(dt)
    invstd = (1.0 / np.sqrt(var + dt.type(eps))).astype(dt)
    xhat = xc * invstd
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    return _make(
        "batchnorm", out, (x, gamma, beta),
        xhat=xhat, invstd=invstd, red=red, bshape=bshape, training=training,
    )


def _batchnorm_backward(node, g):
    x, gamma, beta = node.parents
    c = node.ctx
    xhat, invstd, red, bshape = c["xhat"], c["invstd"], c["red"], c["bshape"]
    ggamma = (g * xhat).sum(axis=red) if gamma.requires_grad else None
    gbeta = g.sum(axis=red) if beta.requires_grad else None
    gx = None
    if x.requires_grad:
        dxhat = g * gamma.data.reshape(bshape)
        if c["training"]:
            gx = invstd * (
                dxhat
                - dxhat.mean(axis=red, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=red, keepdims=True)
            )
        else:
            gx = dxhat * invstd
    return gx, ggamma, gbeta


BACKWARD_RULES.update(
    add=_add_backward,
    sub=_sub_backward,
    mul=_mul_backward,
    scale=_scale_backward,
    shift=_shift_backward,
    power=_power_backward,
    clip=_clip_backward,
    relu=_relu_backward,
    exp=_exp_backward,
    log=_log_backward,
    softmax=_softmax_backward,
    matmul=_matmul_backward,
    concat=_concat_backward,
    slice=_slice_backward,
    pad_zero=_pad_backward,
    reshape=_reshape_backward,
    transpose=_transpose_backward,
    sum=_sum_backward,
    mean=_mean_backward,
    batchnorm=_batchnorm_backward,
)


# ---------------------------------------------------------------- backward pass


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    Parameters that do not influence the loss get zero arrays. With
    ``params=None`` every reachable leaf that requires a gradient is returned.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    if loss.requires_grad:
        for t in reversed(_topological(loss)):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                leaves[id(t)] = (t, g)
                continue
            rule = BACKWARD_RULES[t.node.op]
            for p, gp in zip(t.node.parents, rule(t.node, g)):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + gp
                else:
                    grads[key] = gp
    if params is None:
        return {t: np.ascontiguousarray(g, dtype=t.data.dtype) for t, g in leaves.values()}
    out = {}
    for p in params:
        hit = leaves.get(id(p))
        out[p] = (
            np.ascontiguousarray(hit[1], dtype=p.data.dtype).reshape(p.shape)
            if hit is not None
            else np.zeros_like(p.data)
        )
    return out


def dump_graph(root: Tensor) -> str:
    """Text edge list ``child_id <- op <- parent_id`` for inspection."""
    names: dict[int, str] = {}

    def label(t):
        if id(t) not in names:
            names[id(t)] = t.name or f"t{len(names)}"
        return names[id(t)]

    lines = []
    for t in _topological(root):
        if t.node is None:
            continue
        for p in t.node.parents:
            lines.append(f"{label(p)}{list(p.shape)} -> {t.node.op} -> {label(t)}{list(t.shape)}")
    return "\n".join(lines)


# ---------------------------------------------------------------- gradient check


def gradient_report(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
) -> list[tuple[Tensor, float]]:
    """Per-parameter maximum relative error between analytic and central-difference gradients.

    ``loss_fn`` is re-evaluated with each entry of each parameter nudged by
    ``+/- epsilon``; parameter data is restored afterwards. With ``max_entries``
    only that many entries per parameter are probed, chosen by ``seed``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = loss_fn()
    again = loss_fn()
    if base.data.tobytes() != again.data.tobytes():
        raise NonDeterministicLossError(
            f"loss_fn is not deterministic: {base.item()!r} vs {again.item()!r}"
        )
    analytic = backward(base, params)
    report = []
    for p in params:
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError("parameter data must be contiguous for perturbation")
        ga = analytic[p].reshape(-1).astype(np.float64)
        worst = 0.0
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(np.random.default_rng([seed, len(report)]).choice(flat.size, max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            hi = orig + flat.dtype.type(epsilon)
            lo = orig - flat.dtype.type(epsilon)
            flat[i] = hi
            up = float(loss_fn().data.reshape(-1)[0])
            flat[i] = lo
            down = float(loss_fn().data.reshape(-1)[0])
            flat[i] = orig
            # the representable step, not the nominal 2 * epsilon
            num = (up - down) / (float(hi) - float(lo))
            denom = max(abs(ga[i]), abs(num), 1e-8)
            worst = max(worst, abs(ga[i] - num) / denom)
        report.append((p, worst))
    return report


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error over the probed entries of ``params``; 0 for an empty report."""
    report = gradient_report(loss_fn, params, epsilon, max_entries, seed)
    return max((err for _, err in report), default=0.0)
