"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that participates in a gradient computation is built from
the primitives in this module. The graph is implicit: each non-leaf tensor
keeps references to its parents and a closure that routes the incoming
gradient to them. ``backward`` topologically sorts the reachable graph and
accumulates gradients additively into every ``requires_grad`` leaf.

All data is float64 and all forward results are deterministic for fixed
inputs (plain numpy reductions, no threading tricks beyond BLAS).
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Multi-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays are promoted to constant tensors
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result, recording the graph edge only when needed."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), back)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def back(g):
        _accumulate(x, g * out)

    return _make(out, (x,), back)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def back(g):
        _accumulate(x, g / x.data)

    return _make(out, (x,), back)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def back(g):
        _accumulate(x, g * 0.5 / out)

    return _make(out, (x,), back)


def xlogx(x: Tensor) -> Tensor:
    """x * ln(x) with the 0*log(0) := 0 convention (entropy terms)."""
    pos = x.data > 0.0
    out = np.where(pos, x.data * np.log(np.where(pos, x.data, 1.0)), 0.0)

    def back(g):
        d = np.where(pos, np.log(np.where(pos, x.data, 1.0)) + 1.0, 0.0)
        _accumulate(x, g * d)

    return _make(out, (x,), back)


_relu_margins: list | None = None


@contextmanager
def track_relu_margins():
    """Record each relu's distance to its nearest kink (finite-difference
    checks need base points away from nondifferentiable points)."""
    global _relu_margins
    prev = _relu_margins
    _relu_margins = []
    try:
        yield _relu_margins
    finally:
        _relu_margins = prev


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    out = np.where(mask, x.data, 0.0)
    if _relu_margins is not None and x.data.size:
        _relu_margins.append(float(np.abs(x.data).min()))

    def back(g):
        _accumulate(x, g * mask)

    return _make(out, (x,), back)


# ---------------------------------------------------------------------------
# shape / reduction primitives


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    orig = x.data.shape

    def back(g):
        _accumulate(x, g.reshape(orig))

    return _make(out, (x,), back)


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ConfigError(f"transpose2d needs a matrix, got shape {x.shape}")
    out = x.data.T.copy()

    def back(g):
        _accumulate(x, g.T)

    return _make(out, (x,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ConfigError("matmul supports 2-D operands only")
    out = a.data @ b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(out, (a, b), back)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(a % ndim for a in axis)
    for a in axis:
        if not -ndim <= a < ndim:
            raise ConfigError(f"axis {a} out of range for ndim {ndim}")
    return axes


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.data.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    return _make(out, (x,), back)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.data.ndim)
    count = int(np.prod([x.data.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g / count, x.data.shape).copy())

    return _make(out, (x,), back)


def logsumexp(x: Tensor, axis: int) -> Tensor:
    """Stable log(sum(exp(x))) along one axis (axis is dropped)."""
    ax = axis % x.data.ndim
    m = x.data.max(axis=ax, keepdims=True)
    shifted = np.exp(x.data - m)
    denom = shifted.sum(axis=ax, keepdims=True)
    out = (m + np.log(denom)).squeeze(axis=ax)
    softmax = shifted / denom

    def back(g):
        _accumulate(x, np.expand_dims(g, ax) * softmax)

    return _make(out, (x,), back)


def channel_softmax(x: Tensor) -> Tensor:
    """Softmax over the channel axis (axis 1), stable via max subtraction."""
    if x.data.ndim < 2 or x.data.shape[1] < 1:
        raise ConfigError(f"channel_softmax needs a channel axis, got shape {x.shape}")
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        _accumulate(x, out * (g - dot))

    return _make(out, (x,), back)


# ---------------------------------------------------------------------------
# spatial primitives


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding over NCHW input."""
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"padding must be >= 0, got {padding}")
    B, Cin, H, W = x.data.shape
    Cout, Cw, kh, kw = weight.data.shape
    if Cin != Cw:
        raise ConfigError(f"input has {Cin} channels but weight expects {Cw}")
    if bias.data.shape != (Cout,):
        raise ConfigError(f"bias shape {bias.data.shape} != ({Cout},)")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ConfigError(f"kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1

    if padding > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    Hp, Wp = H + 2 * padding, W + 2 * padding

    def pos_slice(ki: int, kj: int):
        return (
            slice(ki, ki + stride * (Ho - 1) + 1, stride),
            slice(kj, kj + stride * (Wo - 1) + 1, stride),
        )

    # channels-last internally: position slices become plain GEMMs, and the
    # slices saved in forward feed the weight gradient without re-copying
    track = _grad_enabled and (x.requires_grad or weight.requires_grad or bias.requires_grad)
    kernels = [np.ascontiguousarray(weight.data[:, :, ki, kj]) for ki in range(kh) for kj in range(kw)]
    saved: list[np.ndarray] = []
    acc = np.zeros((B * Ho * Wo, Cout))
    for ki in range(kh):
        for kj in range(kw):
            sy, sx = pos_slice(ki, kj)
            xst = np.ascontiguousarray(xp[:, :, sy, sx].transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, Cin)
            if track:
                saved.append(xst)
            acc += xst @ kernels[ki * kw + kj].T
    out = acc.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2) + bias.data.reshape(1, Cout, 1, 1)

    def back(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, Cout)
        if weight.requires_grad:
            dw = np.empty_like(weight.data)
            for ki in range(kh):
                for kj in range(kw):
                    dw[:, :, ki, kj] = gmat.T @ saved[ki * kw + kj]
            _accumulate(weight, dw)
        if x.requires_grad:
            dxpt = np.zeros((B, Hp, Wp, Cin))
            for ki in range(kh):
                for kj in range(kw):
                    sy, sx = pos_slice(ki, kj)
                    dxpt[:, sy, sx, :] += (gmat @ kernels[ki * kw + kj]).reshape(B, Ho, Wo, Cin)
            if padding > 0:
                dxpt = dxpt[:, padding : padding + H, padding : padding + W, :]
            _accumulate(x, np.ascontiguousarray(dxpt.transpose(0, 3, 1, 2)))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))

    return _make(out, (x, weight, bias), back)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ConfigError(f"upsample expects NCHW, got shape {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    B, C, H, W = x.data.shape

    def back(g):
        _accumulate(x, g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)))

    return _make(out, (x,), back)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ConfigError("concat_channels expects NCHW operands")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ConfigError(f"concat shape mismatch: {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    ca = a.data.shape[1]

    def back(g):
        if a.requires_grad:
            _accumulate(a, g[:, :ca])
        if b.requires_grad:
            _accumulate(b, g[:, ca:])

    return _make(out, (a, b), back)


def gather_pixels(x: Tensor, batch_index: int, coords) -> Tensor:
    """Pick the length-C vectors at the given (y, x) spatial coordinates.

    Returns an (N, C) tensor for NCHW input; gradients scatter-add back.
    """
    if x.data.ndim != 4:
        raise ConfigError(f"gather_pixels expects NCHW, got shape {x.shape}")
    B, C, H, W = x.data.shape
    if not 0 <= batch_index < B:
        raise ConfigError(f"batch index {batch_index} out of range for {B}")
    ys = np.asarray([c[0] for c in coords], dtype=np.intp)
    xs = np.asarray([c[1] for c in coords], dtype=np.intp)
    if len(ys) and (ys.min() < 0 or ys.max() >= H or xs.min() < 0 or xs.max() >= W):
        raise ConfigError("gather coordinate outside the spatial extent")
    out = x.data[batch_index, :, ys, xs]  # (N, C)

    def back(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad[batch_index], (slice(None), ys, xs), g.T)

    return _make(out, (x,), back)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BNState:
    """Per-channel running statistics owned by one network instance."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def initial(cls, channels: int) -> "BNState":
        return cls(np.zeros(channels), np.ones(channels))

    def copy(self) -> "BNState":
        return BNState(self.running_mean.copy(), self.running_var.copy())


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BNState,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.9,
    update_stats: bool = True,
) -> Tensor:
    """Channel-wise batch normalization over (B, H, W).

    Train mode normalizes by batch statistics and folds them into the
    running state as ``momentum * old + (1 - momentum) * batch``; eval mode
    uses the running state as constants. Forward and backward are fused
    into one graph node.
    """
    B, C, H, W = x.data.shape
    if training:
        if B * H * W < 2:
            raise ConfigError("batchnorm train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = ((x.data - mu.reshape(1, C, 1, 1)) ** 2).mean(axis=(0, 2, 3))
        if update_stats:
            state.running_mean[:] = momentum * state.running_mean + (1.0 - momentum) * mu
            state.running_var[:] = momentum * state.running_var + (1.0 - momentum) * var
    else:
        mu = state.running_mean
        var = state.running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, C, 1, 1)) * inv.reshape(1, C, 1, 1)
    out = gamma.data.reshape(1, C, 1, 1) * xhat + beta.data.reshape(1, C, 1, 1)

    def back(g):
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx = g * gamma.data.reshape(1, C, 1, 1)
            if training:
                m1 = gx.mean(axis=(0, 2, 3), keepdims=True)
                m2 = (gx * xhat).mean(axis=(0, 2, 3), keepdims=True)
                dx = inv.reshape(1, C, 1, 1) * (gx - m1 - xhat * m2)
            else:
                dx = inv.reshape(1, C, 1, 1) * gx
            _accumulate(x, dx)

    return _make(out, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    checked: int
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.max_rel_err <= self.tol


def grad_check(f, x: Tensor, step: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of ``f(x)`` against central differences.

    Relative error per element is |ga - gn| / max(1e-8, |ga| + |gn|).
    ``f`` must be deterministic; ``x`` is restored on exit.
    """
    x.zero_grad()
    out = f(x)
    backward(out)
    ga = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    gn = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(x).data.reshape(()))
            flat[i] = orig - step
            fm = float(f(x).data.reshape(()))
            flat[i] = orig
            gn.reshape(-1)[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(1e-8, np.abs(ga) + np.abs(gn))
    max_rel = float(np.max(np.abs(ga - gn) / denom)) if flat.size else 0.0
    return GradCheckReport(max_rel_err=max_rel, tol=tol, checked=int(flat.size))


def assert_finite(t: Tensor, name: str = "tensor") -> None:
    if not np.all(np.isfinite(t.data)):
        raise ContractError(f"{name} contains non-finite values")
