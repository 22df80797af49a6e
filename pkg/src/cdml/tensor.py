"""Small dense tensor engine with reverse-mode gradients.

Every tensor carries a float64 ``data`` array and a same-shape ``grad``
accumulator. Operations record a backward closure on their output; calling
``Tensor.backward`` on a scalar walks the recorded graph in reverse
topological order and accumulates gradients into every tensor that took
part in the computation.

Only the operations the metric network needs are provided. Convolution and
pooling accept a single ``C x H x W`` map or a batch ``N x C x H x W``.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, mining)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self._grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    @property
    def grad(self) -> np.ndarray:
        # allocated on first use; reads before any accumulation see zeros
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable tensor's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without a seed needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = self.grad + np.asarray(grad, dtype=np.float64).reshape(self.shape)
        for node in reversed(order):
            if node._backward is not None and node._grad is not None:
                node._backward(node._grad)

    # operator sugar for the few arithmetic forms used downstream
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("elementwise tensor products are not supported")
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out._grad = None
    out.name = None
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t._grad is None:
        t._grad = np.array(np.broadcast_to(g, t.data.shape), dtype=np.float64)
    else:
        t._grad += g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a trailing-axis row vector (bias)."""
    if a.shape != b.shape and not (b.data.ndim == 1 and a.shape[-1:] == b.shape):
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")

    def backward(g):
        _accumulate(a, g)
        if b.shape == g.shape:
            _accumulate(b, g)
        else:
            _accumulate(b, g.reshape(-1, b.shape[0]).sum(axis=0))

    return _result(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _accumulate(a, c * g)

    return _result(a.data * c, (a,), backward)


def relu(a: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is taken as 0."""
    out = np.maximum(a.data, 0.0)

    def backward(g):
        _accumulate(a, g * (a.data > 0))

    return _result(out, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [d.shape[ax] for d in datas])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            _accumulate(p, g[tuple(idx)])

    return _result(out, tuple(parts), backward)


def rows(a: Tensor, start: int, stop: int, axis: int = -2) -> Tensor:
    """Slice ``[start, stop)`` along ``axis`` (used to cut image patches)."""
    ax = axis % a.data.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise DimensionError(f"window [{start}, {stop}) outside extent {a.shape[ax]}")
    idx = [slice(None)] * a.data.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        if a.requires_grad:
            a.grad[idx] += g

    return _result(a.data[idx], (a,), backward)


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather along the first axis; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        if a.requires_grad:
            np.add.at(a.grad, index, g)

    return _result(a.data[index], (a,), backward)


def total(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(np.asarray(a.data.sum()), (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        _accumulate(a, np.broadcast_to(g / n, a.shape))

    return _result(np.asarray(a.data.mean()), (a,), backward)


def dot(a: Tensor, w: np.ndarray) -> Tensor:
    """Inner product with a fixed array; projects any tensor to a scalar."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != a.shape:
        raise DimensionError(f"projection shape {w.shape} does not match {a.shape}")

    def backward(g):
        _accumulate(a, g * w)

    return _result(np.asarray(np.sum(a.data * w)), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``m x k`` and ``k x n`` (vectors promoted as usual)."""
    if a.data.ndim == 0 or b.data.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ad, bd = a.data, b.data
        if a.requires_grad:
            _accumulate(a, np.multiply.outer(g, bd) if bd.ndim == 1 else g @ bd.T)
        if b.requires_grad:
            _accumulate(b, np.multiply.outer(ad, g) if ad.ndim == 1 else ad.T @ g)

    return _result(a.data @ b.data, (a, b), backward)


def row_norms(a: Tensor) -> Tensor:
    """Euclidean norm of each row of an ``N x D`` tensor (or of a vector).

    The norm is not differentiable at zero; the gradient there is 0.
    """
    n = np.sqrt(np.sum(a.data * a.data, axis=-1))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        coef = np.where(n > 0, g / safe, 0.0)
        _accumulate(a, a.data * coef[..., None])

    return _result(n, (a,), backward)


def l2_normalize(a: Tensor, on_zero: Callable[[np.ndarray], Exception] | None = None) -> Tensor:
    """Scale each row to unit Euclidean norm."""
    n = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))
    if np.any(n == 0):
        bad = np.flatnonzero(n.reshape(-1) == 0)
        if on_zero is not None:
            raise on_zero(bad)
        raise FloatingPointError(f"cannot normalize zero rows {bad.tolist()}")
    y = a.data / n

    def backward(g):
        # d(x/|x|) = (g - y (y.g)) / |x|
        proj = np.sum(g * y, axis=-1, keepdims=True)
        _accumulate(a, (g - y * proj) / n)

    return _result(y, (a,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row-wise softmax."""
    labels = np.asarray(labels, dtype=np.intp)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        _accumulate(logits, g * p / n)

    return _result(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# convolution and pooling


def conv_output_extent(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def to_channels_last(x: Tensor) -> Tensor:
    """``N x C x H x W`` to ``N x H x W x C`` (and ``C x H x W`` to ``H x W x C``)."""
    perm = (0, 2, 3, 1) if x.data.ndim == 4 else (1, 2, 0)
    inv = np.argsort(perm)

    def backward(g):
        _accumulate(x, g.transpose(inv))

    return _result(np.ascontiguousarray(x.data.transpose(perm)), (x,), backward)


def to_channels_first(x: Tensor) -> Tensor:
    perm = (0, 3, 1, 2) if x.data.ndim == 4 else (2, 0, 1)
    inv = np.argsort(perm)

    def backward(g):
        _accumulate(x, g.transpose(inv))

    return _result(np.ascontiguousarray(x.data.transpose(perm)), (x,), backward)


def conv2d(x: Tensor, filters: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Valid (unpadded) cross-correlation.

    ``x`` is ``C x H x W`` or ``N x C x H x W``; ``filters`` is
    ``F x C x kh x kw``; the optional ``bias`` has one entry per filter.
    Output is ``F x H' x W'`` with ``H' = (H - kh) // stride + 1``.
    """
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"conv2d expects CxHxW or NxCxHxW input, got {x.shape}")
    return to_channels_first(conv2d_nhwc(to_channels_last(x), filters, stride, bias))


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling over ``C x H x W`` (or batched) maps.

    Gradient goes to the window's maximum; ties resolve to the first element
    in row-major order inside the window.
    """
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"maxpool2 expects CxHxW or NxCxHxW, got {x.shape}")
    return to_channels_first(maxpool2_nhwc(to_channels_last(x)))


def conv2d_nhwc(x: Tensor, filters: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Channels-last convolution: ``[N x] H x W x C`` in, ``[N x] H' x W' x F`` out."""
    if stride < 1:
        raise DimensionError(f"stride must be positive, got {stride}")
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    wd = filters.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise DimensionError(f"conv2d expects HxWxC input and FxCxkhxkw filters, got {x.shape}, {filters.shape}")
    n, h, w, c = xd.shape
    f, c2, kh, kw = wd.shape
    if c != c2:
        raise DimensionError(f"channel mismatch: input has {c} channels, filters {filters.shape}")
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    if bias is not None and bias.shape != (f,):
        raise DimensionError(f"bias shape {bias.shape} does not match {f} filters")
    ho, wo = conv_output_extent(h, kh, stride), conv_output_extent(w, kw, stride)

    # (N, Ho, Wo, C, kh, kw) window view, copied once into a column matrix
    win = sliding_window_view(xd, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.reshape(n * ho * wo, c * kh * kw)
    wmat = wd.reshape(f, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape((ho, wo, f) if single else (n, ho, wo, f))

    def backward(g):
        gmat = g.reshape(n * ho * wo, f)
        if filters.requires_grad:
            _accumulate(filters, (gmat.T @ cols).reshape(wd.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gmat.sum(axis=0))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            dx = np.zeros_like(xd)
            hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    dx[:, i:i + hs:stride, j:j + ws:stride, :] += dcols[:, :, :, :, i, j]
            _accumulate(x, dx[0] if single else dx)

    parents = (x, filters) if bias is None else (x, filters, bias)
    return _result(out, parents, backward)


def maxpool2_nhwc(x: Tensor) -> Tensor:
    """Channels-last 2x2 max pooling with first-in-row-major tie breaking."""
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise DimensionError(f"maxpool2 expects HxWxC or NxHxWxC, got {x.shape}")
    n, h, w, c = xd.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even extents, got {h}x{w}")
    # window members in row-major order: (0,0), (0,1), (1,0), (1,1)
    members = [xd[:, 0::2, 0::2], xd[:, 0::2, 1::2], xd[:, 1::2, 0::2], xd[:, 1::2, 1::2]]
    best = members[0].copy()
    arg = np.zeros(best.shape, dtype=np.int8)
    for k in range(1, 4):
        better = members[k] > best
        best = np.where(better, members[k], best)
        arg[better] = k
    out = best[0] if single else best

    def backward(g):
        if not x.requires_grad:
            return
        g4 = g[None] if single else g
        dx = np.zeros_like(xd)
        dx[:, 0::2, 0::2] = g4 * (arg == 0)
        dx[:, 0::2, 1::2] = g4 * (arg == 1)
        dx[:, 1::2, 0::2] = g4 * (arg == 2)
        dx[:, 1::2, 1::2] = g4 * (arg == 3)
        _accumulate(x, dx[0] if single else dx)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# finite-difference checking


def numeric_gradient(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar-valued ``fn`` at ``x``."""
    base = x.data.copy()
    out = np.zeros_like(base)
    flat = out.reshape(-1)
    with no_grad():
        for i in range(base.size):
            x.data = base.copy()
            x.data.reshape(-1)[i] += eps
            fp = float(fn(x).data)
            x.data = base.copy()
            x.data.reshape(-1)[i] -= eps
            fm = float(fn(x).data)
            flat[i] = (fp - fm) / (2.0 * eps)
    x.data = base
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst coordinate error, denominator ``max(|analytic|, |numeric|, 1e-8)``."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    b = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def grad_check(
    fn: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    eps: float = 1e-6,
    corrupt: float = 1.0,
) -> float:
    """Compare the analytic gradient of ``fn`` at ``x`` with central differences.

    Returns the worst relative error. ``corrupt`` scales the analytic
    gradient before comparison and exists only to sanity-check the detector.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = x if isinstance(x, Tensor) else Tensor(x)
    x.requires_grad = True
    x.zero_grad()
    fn(x).backward()
    analytic = x.grad.copy() * corrupt
    numeric = numeric_gradient(fn, x, eps)
    return relative_error(analytic, numeric)


def parameters_grad_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Finite-difference check over several parameter tensors at once.

    ``loss_fn`` rebuilds the scalar from current parameter values. With
    ``max_coords`` only a random subset of coordinates per tensor is probed.
    """
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    loss_fn().backward()
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p in params:
        analytic = p.grad.copy().reshape(-1)
        coords = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            coords = rng.choice(p.size, size=max_coords, replace=False)
        numeric = np.empty(len(coords))
        flat = p.data.reshape(-1)
        with no_grad():
            for k, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(loss_fn().data)
                flat[i] = orig - eps
                fm = float(loss_fn().data)
                flat[i] = orig
                numeric[k] = (fp - fm) / (2.0 * eps)
        worst = max(worst, relative_error(analytic[coords], numeric))
    return worst
