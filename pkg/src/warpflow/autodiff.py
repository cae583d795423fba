"""Minimal dense-tensor reverse-mode differentiation engine.

Tensors hold contiguous float64 arrays and record their parents; backward()
topologically sorts the implicit tape and visits each node exactly once.
There is no implicit broadcasting: shapes must match exactly except through
the explicit expand() op.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _node(data, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    return out


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = _node(a.data + b.data, (a, b), None)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)
    out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = _node(a.data - b.data, (a, b), None)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(-g)
    out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = _node(a.data * b.data, (a, b), None)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * b.data)
        if b.requires_grad:
            b.accumulate(g * a.data)
    out._backward = backward
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _node(a.data * s, (a,), None)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * s)
    out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., M, K) @ (K, N), or batched with identical leading dims."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul: inner dims {a.data.shape} @ {b.data.shape}")
    if b.data.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ValueError("matmul: batched operands must share leading dims")
    out = _node(a.data @ b.data, (a, b), None)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k = a.data.shape[-1]
                n = g.shape[-1]
                b.accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                b.accumulate(np.swapaxes(a.data, -1, -2) @ g)
    out._backward = backward
    return out


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    B, C, H, W = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # (B, C, H, W, kh, kw) -> (B, H*W, C*kh*kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, H * W, C * kh * kw)


def _col2im(dcols: np.ndarray, x_shape: tuple[int, ...], kh: int, kw: int) -> np.ndarray:
    B, C, H, W = x_shape
    ph, pw = kh // 2, kw // 2
    dxp = np.zeros((B, C, H + 2 * ph, W + 2 * pw))
    d = dcols.reshape(B, H, W, C, kh, kw)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + H, j:j + W] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, ph:ph + H, pw:pw + W]


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Stride-1, same-padding 2-D convolution: (B, Cin, H, W) * (Cout, Cin, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    B, Cin, H, W = x.data.shape
    Cout, Cin_w, kh, kw = w.data.shape
    if Cin != Cin_w:
        raise ValueError(f"conv2d: input has {Cin} channels, kernel expects {Cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d requires odd kernel sizes for same padding")
    cols = _im2col(x.data, kh, kw)  # (B, H*W, Cin*kh*kw)
    w_flat = w.data.reshape(Cout, -1)
    y = (cols @ w_flat.T).transpose(0, 2, 1).reshape(B, Cout, H, W)
    out = _node(y, (x, w), None)

    def backward(g):
        g_flat = g.reshape(B, Cout, H * W).transpose(0, 2, 1)  # (B, H*W, Cout)
        if w.requires_grad:
            dw = np.tensordot(g_flat, cols, axes=([0, 1], [0, 1]))  # (Cout, Cin*kh*kw)
            w.accumulate(dw.reshape(w.data.shape))
        if x.requires_grad:
            dcols = g_flat @ w_flat  # (B, H*W, Cin*kh*kw)
            x.accumulate(_col2im(dcols, x.data.shape, kh, kw))
    out._backward = backward
    return out


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ndim = tensors[0].data.ndim
    for t in tensors:
        if t.data.ndim != ndim:
            raise ValueError("concat operands must share rank")
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), None)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * ndim
                idx[axis] = slice(lo, hi)
                t.accumulate(g[tuple(idx)])
    out._backward = backward
    return out


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    out = _node(x.data[tuple(idx)].copy(), (x,), None)

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[tuple(idx)] = g
            x.accumulate(full)
    out._backward = backward
    return out


def tsum(x: Tensor) -> Tensor:
    out = _node(x.data.sum(), (x,), None)

    def backward(g):
        if x.requires_grad:
            x.accumulate(np.full_like(x.data, float(g)))
    out._backward = backward
    return out


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    out = _node(x.data.mean(), (x,), None)

    def backward(g):
        if x.requires_grad:
            x.accumulate(np.full_like(x.data, float(g) / n))
    out._backward = backward
    return out


def silu(x: Tensor) -> Tensor:
    sig = expit(x.data)
    out = _node(x.data * sig, (x,), None)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * sig * (1.0 + x.data * (1.0 - sig)))
    out._backward = backward
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _node(y, (x,), None)

    def backward(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            x.accumulate(y * (g - dot))
    out._backward = backward
    return out


def expand(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicit broadcast of size-1 axes up to `shape` (the only broadcasting allowed)."""
    if x.data.ndim != len(shape):
        raise ValueError("expand requires matching rank; reshape first")
    for have, want in zip(x.data.shape, shape):
        if have != want and have != 1:
            raise ValueError(f"cannot expand axis of size {have} to {want}")
    out = _node(np.broadcast_to(x.data, shape).copy(), (x,), None)
    axes = tuple(i for i, (have, want) in enumerate(zip(x.data.shape, shape))
                 if have == 1 and want != 1)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g.sum(axis=axes, keepdims=True) if axes else g)
    out._backward = backward
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _node(x.data.reshape(shape), (x,), None)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g.reshape(x.data.shape))
    out._backward = backward
    return out


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = _node(np.ascontiguousarray(x.data.transpose(axes)), (x,), None)
    inverse = np.argsort(axes)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g.transpose(inverse))
    out._backward = backward
    return out


def custom_op(inputs: tuple[Tensor, ...], forward_value: np.ndarray, backward_fn) -> Tensor:
    """Register an externally computed op on the tape.

    `backward_fn(g)` must return one gradient array per input (None for
    inputs that need no gradient).
    """
    out = _node(forward_value, inputs, None)

    def backward(g):
        grads = backward_fn(g)
        for t, gr in zip(inputs, grads):
            if t.requires_grad and gr is not None:
                t.accumulate(gr)
    out._backward = backward
    return out


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; a tape may be consumed only once."""
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._done:
        raise RuntimeError("backward already ran on this tape; rebuild the graph")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._done and node._parents:
            raise RuntimeError("backward already ran on part of this tape")
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if node._parents:  # leaves stay reusable across graphs
            node._done = True


class Adam:
    """Adaptive-moment gradient descent over a list of parameter tensors."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        b1t = 1.0 - self.beta1 ** self.step_count
        b2t = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
