"""Dense tensors with tape-based reverse-mode differentiation.

Only the layer set the HCL network needs is provided.  Feature maps are
``[C, H, W]`` or batched ``[N, C, H, W]``; vectors are ``[d]`` or ``[N, d]``.

Recording happens only inside an active :class:`Graph`::

    with Graph() as g:
        loss = ...
        g.backward(loss)

Outside a graph every op is a plain forward computation.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_graph")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._graph: Graph | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._graph is None:
            raise RuntimeError("tensor was not produced inside a recording graph")
        self._graph.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class _Op:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Graph:
    """Tape of recorded operations for one forward pass.

    Operations are appended in execution order, so the tape is already
    topologically sorted; :meth:`backward` walks it once in reverse and then
    frees it.
    """

    def __init__(self):
        self.ops: list[_Op] = []

    def __enter__(self) -> "Graph":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        out.requires_grad = True
        out._graph = self
        self.ops.append(_Op(out, inputs, backward))

    def backward(self, out: Tensor) -> None:
        """Accumulate d(out)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

        Leaves that were recorded but do not influence ``out`` get an exact zero
        gradient.
        """
        if out.data.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {out.shape}")
        produced = {id(op.out) for op in self.ops}
        leaves: dict[int, Tensor] = {}
        for op in self.ops:
            for t in op.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t

        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
        if id(out) not in produced and out.requires_grad:
            leaves[id(out)] = out
        for op in reversed(self.ops):
            g = grads.pop(id(op.out), None)
            if g is None:
                continue
            in_grads = op.backward(g)
            for t, gi in zip(op.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        self.ops.clear()


def active_graph() -> Graph | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    g = active_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        g.record(out, tuple(inputs), backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reductions


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars take the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.isscalar(b):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor) and np.isscalar(a):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return emit(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return emit(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return emit(a.data * b.data, (a, b), backward)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return emit(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g.reshape(x.shape),)

    return emit(x.data.reshape(shape), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return emit(np.concatenate([x.data for x in xs], axis=ax), xs, backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return emit(x.data * mask, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects [m,k]@[k,n], got {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return emit(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W.T + b`` for ``x`` of shape ``[n]`` or ``[N, n]`` and ``W`` of shape ``[m, n]``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or x.ndim not in (1, 2):
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {W.shape}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, W.shape[0])
        x2 = x.data.reshape(-1, W.shape[1])
        gx = (g @ W.data) if x.requires_grad else None
        gW = g2.T @ x2 if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    inputs = (x, W) if b is None else (x, W, b)
    return emit(out, inputs, backward)


def _as_batched(x: Tensor, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{name}: expected [C,H,W] or [N,C,H,W], got {x.shape}")


def _pad(xb: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return xb
    width = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    if mode == "zeros":
        return np.pad(xb, width)
    if mode == "replicate":
        return np.pad(xb, width, mode="edge")
    raise ValueError(f"unknown padding mode {mode!r}")


def _unpad_grad(gp: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return gp
    if mode == "zeros":
        return gp[:, :, pad:-pad, pad:-pad]
    # replicate: every padded cell is a copy of the nearest edge cell
    g = gp[:, :, pad:-pad, :].copy()
    g[:, :, 0, :] += gp[:, :, :pad, :].sum(axis=2)
    g[:, :, -1, :] += gp[:, :, -pad:, :].sum(axis=2)
    out = g[:, :, :, pad:-pad].copy()
    out[:, :, :, 0] += g[:, :, :, :pad].sum(axis=3)
    out[:, :, :, -1] += g[:, :, :, -pad:].sum(axis=3)
    return out


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(
    x: Tensor,
    k: Tensor,
    stride: int = 1,
    pad: int = 0,
    bias: Tensor | None = None,
    padding_mode: str = "zeros",
) -> Tensor:
    """Cross-correlation of ``x`` ``[C_in,H,W]`` (or batched) with ``k`` ``[C_out,C_in,kH,kW]``.

    ``padding_mode`` is ``"zeros"`` or ``"replicate"``; the latter keeps a
    spatially constant input constant.
    """
    x, k = as_tensor(x), as_tensor(k)
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: invalid stride={stride} pad={pad}")
    xb, squeeze = _as_batched(x, "conv2d")
    if k.ndim != 4 or k.shape[1] != xb.shape[1]:
        raise ShapeError(f"conv2d: kernel {k.shape} does not match input channels of {x.shape}")
    N, C, H, W = xb.shape
    O, _, kh, kw = k.shape
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {O} output channels")
    Ho = conv_output_size(H, kh, stride, pad)
    Wo = conv_output_size(W, kw, stride, pad)

    pointwise = kh == 1 and kw == 1 and pad == 0
    if pointwise:
        xs = xb[:, :, ::stride, ::stride]
        out = np.einsum("oc,nchw->nohw", k.data[:, :, 0, 0], xs, optimize=True)
        windows = None
    else:
        xp = _pad(xb, pad, padding_mode)
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        # windows: [N, C, Ho, Wo, kh, kw]
        out = np.tensordot(windows, k.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gb = g[None] if squeeze else g
        gk = gx = None
        if pointwise:
            if k.requires_grad:
                gk = np.einsum("nohw,nchw->oc", gb, xs, optimize=True)[:, :, None, None]
            if x.requires_grad:
                gxs = np.einsum("oc,nohw->nchw", k.data[:, :, 0, 0], gb, optimize=True)
                if stride == 1:
                    gx = gxs
                else:
                    gx = np.zeros_like(xb)
                    gx[:, :, ::stride, ::stride] = gxs
        else:
            if k.requires_grad:
                gk = np.tensordot(gb, windows, axes=([0, 2, 3], [0, 2, 3]))
            if x.requires_grad:
                cols = np.tensordot(gb, k.data, axes=([1], [0]))  # [N, Ho, Wo, C, kh, kw]
                gxp = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += cols[
                            :, :, :, :, i, j
                        ].transpose(0, 3, 1, 2)
                gx = _unpad_grad(gxp, pad, padding_mode)
        if gx is not None and squeeze:
            gx = gx[0]
        grads = (gx, gk)
        if bias is not None:
            grads += (gb.sum(axis=(0, 2, 3)),)
        return grads

    inputs = (x, k) if bias is None else (x, k, bias)
    return emit(out[0] if squeeze else out, inputs, backward)


def avg_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Mean over ``window x window`` patches; ``stride`` defaults to ``window``."""
    x = as_tensor(x)
    stride = window if stride is None else stride
    xb, squeeze = _as_batched(x, "avg_pool2d")
    N, C, H, W = xb.shape
    if window < 1 or stride < 1:
        raise ValueError(f"avg_pool2d: invalid window={window} stride={stride}")
    if window > H or window > W:
        raise ShapeError(f"avg_pool2d: window {window} larger than input {H}x{W}")
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    scale = 1.0 / (window * window)

    tiled = stride == window and H % window == 0 and W % window == 0
    if tiled:
        out = xb.reshape(N, C, Ho, window, Wo, window).mean(axis=(3, 5))
    else:
        win = sliding_window_view(xb, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
        out = win.mean(axis=(4, 5))

    def backward(g):
        gb = g[None] if squeeze else g
        if tiled:
            gx = np.repeat(np.repeat(gb * scale, window, axis=2), window, axis=3)
        else:
            gx = np.zeros_like(xb, dtype=g.dtype)
            for i in range(window):
                for j in range(window):
                    gx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gb * scale
        return (gx[0] if squeeze else gx,)

    return emit(out[0] if squeeze else out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """``[N,C,H,W] -> [N,C]`` (or ``[C,H,W] -> [C]``) spatial mean."""
    x = as_tensor(x)
    _as_batched(x, "global_avg_pool")
    H, W = x.shape[-2:]

    def backward(g):
        return (np.broadcast_to(g[..., None, None] / (H * W), x.shape).copy(),)

    return emit(x.data.mean(axis=(-2, -1)), (x,), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _as_batched(x, "upsample_nearest2x")
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def backward(g):
        shp = g.shape[:-2] + (g.shape[-2] // 2, 2, g.shape[-1] // 2, 2)
        return (g.reshape(shp).sum(axis=(-3, -1)),)

    return emit(out, (x,), backward)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xb, squeeze = _as_batched(x, "group_norm")
    N, C, H, W = xb.shape
    if groups < 1 or C % groups:
        raise ShapeError(f"group_norm: {C} channels not divisible into {groups} groups")
    if eps <= 0:
        raise ValueError("group_norm: eps must be positive")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"group_norm: affine params must have shape ({C},)")
    xg = xb.reshape(N, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(N, C, H, W)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gb = g[None] if squeeze else g
        ggamma = (gb * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = gb.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = (gb * gamma.data[None, :, None, None]).reshape(N, groups, -1)
            xh = xhat.reshape(N, groups, -1)
            gx = inv * (
                gxhat - gxhat.mean(axis=2, keepdims=True) - xh * (gxhat * xh).mean(axis=2, keepdims=True)
            )
            gx = gx.reshape(N, C, H, W)
            if squeeze:
                gx = gx[0]
        return gx, ggamma, gbeta

    return emit(out[0] if squeeze else out, (x, gamma, beta), backward)


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit length; rows shorter than ``eps`` are divided by ``eps``."""
    v = as_tensor(v)
    if eps <= 0:
        raise ValueError("l2_normalize: eps must be positive")
    norm = np.sqrt((v.data * v.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = v.data / denom
    clipped = norm < eps

    def backward(g):
        radial = (g * out).sum(axis=-1, keepdims=True)
        gv = np.where(clipped, g / denom, (g - out * radial) / denom)
        return (gv,)

    return emit(out, (v,), backward)


# ---------------------------------------------------------------------------
# gradient checking


def numerical_grad(f: Callable[[], float], arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``."""
    num = float(np.linalg.norm(a - b))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return num / den


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Iterable[Tensor],
    step: float = 1e-5,
) -> list[float]:
    """Compare analytic and finite-difference gradients of scalar ``fn(*inputs)``.

    Returns one relative error per input that requires grad.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    with Graph() as g:
        out = fn(*inputs)
        g.backward(out)
    errors = []
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(lambda: float(fn(*inputs).data), t.data, step)
        errors.append(relative_error(analytic, numeric))
    return errors
