"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  ``Tensor.backward``
walks the tape in reverse topological order.

Image tensors are laid out ``N x H x W x C`` (or ``H x W x C`` unbatched), so
``A[i, j, k]`` reads as pixel ``(i, j)`` of map ``k``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(FloatingPointError):
    """A tensor received NaN or Inf values."""


class ShapeError(ValueError):
    pass


def _shape_error(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor{' ' + name if name else ''}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return index(self, idx)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward: implicit gradient only defined for scalar outputs")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise --------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise _shape_error("add", a.shape, b.shape) from None
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise _shape_error("mul", a.shape, b.shape) from None
    return _result(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                           _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,))


_TINY = np.finfo(np.float64).tiny
_ONE_MINUS = np.nextafter(1.0, 0.0)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # branch-free stable form: exp of a non-positive number never overflows
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep the open interval (0, 1) even where float64 rounds to an endpoint
    out = np.clip(out, _TINY, _ONE_MINUS)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward)


# -- shape / reductions -------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", old, shape) from None
    return _result(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def index(x: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.asarray(x.data[idx]), (x,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, backward)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = math.prod(x.shape[a] for a in axes)
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def max(x: Tensor, axis: int = -1) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; the gradient goes to the lowest index among ties."""
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(out, (x,), backward)


def global_average_pool(x) -> Tensor:
    """Mean over the two spatial axes of an ``[N x] H x W x K`` tensor."""
    x = _as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_average_pool: expected rank 3 or 4, got shape {x.shape}")
    return mean(x, axis=(-3, -2))


# -- linear algebra -----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise _shape_error("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape ``(in, out)``."""
    if x.shape[-1] != weight.shape[0]:
        raise _shape_error("fully_connected", x.shape, weight.shape)
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum, e.g. ``"nhwc,nhwk->nkc"``.

    Every index of each operand must also appear in the other operand or the
    output, which covers contractions and batched products.
    """
    lhs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for own, other in ((ia, ib), (ib, ia)):
        if any(c not in other and c not in out_idx for c in own):
            raise ValueError(f"einsum: unsupported subscripts {spec!r}")
    try:
        out = np.einsum(spec, a.data, b.data, optimize=True)
    except ValueError:
        raise _shape_error(f"einsum {spec}", a.shape, b.shape) from None

    def backward(g):
        return (np.einsum(f"{out_idx},{ib}->{ia}", g, b.data, optimize=True),
                np.einsum(f"{out_idx},{ia}->{ib}", g, a.data, optimize=True))

    return _result(out, (a, b), backward)


# -- convolution / pooling ----------------------------------------------

def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _pad_hw(x: np.ndarray, p: int, value: float = 0.0) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), constant_values=value)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``N x H x W x Cin`` with a ``kh x kw x Cin x Cout`` kernel."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[-1] != kernel.shape[2]:
        raise _shape_error("conv2d", x.shape, kernel.shape)
    n, h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise _shape_error("conv2d", x.shape, kernel.shape)

    if kh == kw == 1 and padding == 0:
        xs = x.data[:, ::stride, ::stride, :]
        out = (xs.reshape(-1, cin) @ kernel.data.reshape(cin, cout)).reshape(n, ho, wo, cout)

        def backward(g):
            g2 = g.reshape(-1, cout)
            gk = (xs.reshape(-1, cin).T @ g2).reshape(kernel.shape)
            gx = np.zeros_like(x.data)
            gx[:, ::stride, ::stride, :] = (g2 @ kernel.data.reshape(cin, cout).T).reshape(xs.shape)
            return gx, gk

        return _result(out, (x, kernel), backward)

    xp = _pad_hw(x.data, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # win: n, ho, wo, cin, kh, kw -> columns ordered (kh, kw, cin) to match the kernel
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat).reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kernel.shape)
        if not x.requires_grad:
            return None, gk
        gcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                gxp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += gcols[:, :, :, di, dj, :]
        gx = gxp[:, padding:padding + h, padding:padding + w, :] if padding else gxp
        return gx, gk

    return _result(out, (x, kernel), backward)


def maxpool2d(x: Tensor, size: int = 3, stride: int = 2, padding: int = 0) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected N x H x W x C input, got shape {x.shape}")
    n, h, w, c = x.shape
    ho = conv_output_size(h, size, stride, padding)
    wo = conv_output_size(w, size, stride, padding)
    xp = _pad_hw(x.data, padding, value=-np.inf)
    win = sliding_window_view(xp, (size, size), axis=(1, 2))[:, ::stride, ::stride]
    flat = win.reshape(n, ho, wo, c, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros_like(xp)
        for t in range(size * size):
            di, dj = divmod(t, size)
            gxp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += g * (arg == t)
        gx = gxp[:, padding:padding + h, padding:padding + w, :] if padding else gxp
        return (gx,)

    return _result(out, (x,), backward)


def dropout(x: Tensor, keep_prob: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; the identity when ``train`` is false."""
    if not train or keep_prob >= 1.0:
        return x
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"dropout: keep_prob must lie in (0, 1], got {keep_prob}")
    mask = (rng.random(x.shape) < keep_prob) / keep_prob
    return mul(x, Tensor(mask))


# -- gradient checking --------------------------------------------------

class GradCheckReport:
    def __init__(self, max_rel_error: float, worst: tuple[str, tuple] | None, checked: int,
                 per_param: dict[str, float], raw_max_rel_error: float = 0.0,
                 resolved: int = 0, resolved_max_rel_error: float = 0.0):
        self.max_rel_error = max_rel_error
        # plain |a - n| / (|a| + |n|) before discounting rounding noise
        self.raw_max_rel_error = raw_max_rel_error
        # entries whose gradient is 1e5 times the rounding resolution or more, and their plain error
        self.resolved = resolved
        self.resolved_max_rel_error = resolved_max_rel_error
        self.worst = worst
        self.checked = checked
        self.per_param = per_param

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol

    def __repr__(self) -> str:
        return (f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, "
                f"raw={self.raw_max_rel_error:.3e}, worst={self.worst}, checked={self.checked})")


_EPS = float(np.finfo(np.float64).eps)


def relative_error(a, n):
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor] | Iterable[Tensor],
               h: float = 1e-5, tol: float = 1e-4,
               entries: dict[str, np.ndarray] | None = None, refine: int = 2) -> GradCheckReport:
    """Compare the taped gradient of scalar ``f()`` with central differences.

    ``params`` are leaf tensors that ``f`` reads; they are perturbed in place.
    The step for entry ``p`` is ``h * max(1, |p|)``.  ``entries`` optionally
    restricts each named parameter to a set of flat indices.  The rounding
    resolution of the difference quotient is subtracted from the absolute
    disagreement before dividing by ``|analytic| + |numeric|``, so entries
    whose true gradient is zero do not report float noise as a large error.

    When the forward and backward one-sided slopes disagree by more than
    ``tol`` (a ReLU or max switches inside the probe interval) the step is
    shrunk tenfold, at most ``refine`` times, and the central difference is
    retaken on the smaller interval.
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
    out.backward()
    f0 = out.item()

    worst_err, worst, raw_worst = 0.0, None, 0.0
    resolved, resolved_worst = 0, 0.0
    per_param: dict[str, float] = {}
    checked = 0
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idxs = range(flat.size) if entries is None or name not in entries else entries[name]
        param_worst = 0.0
        for i in idxs:
            orig = flat[i]
            step = h * (abs(orig) if abs(orig) > 1.0 else 1.0)
            for attempt in range(refine + 1):
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NonFiniteError(f"grad_check: non-finite value probing {name}[{i}]")
                kink = abs(fp - 2 * f0 + fm) > tol * abs(fp - fm) + 16 * _EPS * abs(f0)
                if not kink or attempt == refine:
                    break
                step /= 10.0
            num = (fp - fm) / (2 * step)
            a = analytic.reshape(-1)[i]
            resolution = 8 * _EPS * float(np.max([abs(fp), abs(fm), 1.0])) / step
            excess = abs(a - num) - resolution
            err = 0.0 if excess <= 0 else excess / (abs(a) + abs(num) if abs(a) + abs(num) > 1e-8 else 1e-8)
            raw = float(relative_error(a, num))
            raw_worst = raw if raw > raw_worst else raw_worst
            if abs(a) + abs(num) >= 1e5 * resolution:
                resolved += 1
                resolved_worst = raw if raw > resolved_worst else resolved_worst
            checked += 1
            param_worst = err if err > param_worst else param_worst
            if err > worst_err:
                worst_err, worst = err, (name, np.unravel_index(i, p.shape))
        per_param[name] = param_worst
    return GradCheckReport(worst_err, worst, checked, per_param, raw_worst, resolved, resolved_worst)
