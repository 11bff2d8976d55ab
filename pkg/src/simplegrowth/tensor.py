"""Dense tensors with a tape-ordered reverse-mode differentiation engine.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents, a vector-Jacobian product closure, and a sequence number drawn from a
process-wide counter. Because an output is always created after its inputs,
sorting the reachable nodes by descending sequence number is a valid reverse
topological order, which is what :meth:`Tensor.backward` walks.

Randomness comes from counter-based Philox streams keyed by an explicit 64-bit
seed, so nothing depends on hidden generator state.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ArgumentError, NumericalError, ShapeError, StateError

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_seq = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _debug() -> bool:
    return getattr(_state, "debug", False)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, optimizer updates)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every forward result for non-finite values while active."""
    prev = _debug()
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_seq", "_leaf", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in DTYPES else np.float32
        arr = np.array(data, dtype=dtype, copy=True, order="C")
        if arr.dtype not in DTYPES:
            raise ArgumentError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._seq = next(_seq)
        self._leaf = True
        self._consumed = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr)
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._vjp = None
        t._seq = next(_seq)
        t._leaf = True
        t._consumed = False
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ArgumentError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, dtype=dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self):
        return self.shape[0]

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(self, other)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(self, other)
    __neg__ = lambda self: neg(self)

    def backward(self) -> None:
        """Populate ``grad`` on every tracked leaf reachable from this scalar.

        The recorded graph is consumed: a second call raises :class:`StateError`.
        Leaf gradients accumulate across graphs, so zero them between steps.
        """
        if self.size != 1:
            raise ArgumentError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise StateError("graph already consumed by a previous backward()")
        if not self.requires_grad:
            raise StateError("loss does not depend on any tracked tensor")

        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            if node._consumed:
                raise StateError("graph already consumed by a previous backward()")
            nodes[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)

        grads = {id(self): np.ones_like(self.data)}
        for node in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
            g = grads.pop(id(node), None)
            if node._leaf:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                for parent, pg in zip(node._parents, node._vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
            node._vjp = None
            node._parents = ()
            node._consumed = True


def _op(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap a forward result and, when any parent is tracked, record it on the tape."""
    if _debug() and not np.all(np.isfinite(data)):
        raise NumericalError("non-finite value produced in debug mode")
    out = Tensor._wrap(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._leaf = False
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_binary(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    if a.dtype != b.dtype:
        raise ArgumentError(f"{name}: dtypes {a.dtype} and {b.dtype} differ")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a, b = b, a
    if _is_scalar(a):
        s = b.dtype.type(a)
        return _op(b.data + s, (b,), lambda g: (g,))
    _check_binary(a, b, "add")
    return _op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if _is_scalar(a):
        s = b.dtype.type(a)
        return _op(s - b.data, (b,), lambda g: (-g,))
    if _is_scalar(b):
        s = a.dtype.type(b)
        return _op(a.data - s, (a,), lambda g: (g,))
    _check_binary(a, b, "sub")
    return _op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a, b = b, a
    if _is_scalar(a):
        s = b.dtype.type(a)
        return _op(b.data * s, (b,), lambda g: (g * s,))
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(x: Tensor) -> Tensor:
    return _op(-x.data, (x,), lambda g: (-g,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _op(y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _op(y, (x,), lambda g: (g * y * (1 - y),))


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape, dt = x.shape, x.dtype
    return _op(np.sum(x.data, dtype=dt), (x,), lambda g: (np.full(shape, g, dtype=dt),))


def mean(x: Tensor) -> Tensor:
    shape, dt, n = x.shape, x.dtype, x.size
    return _op(np.mean(x.data, dtype=dt), (x,), lambda g: (np.full(shape, g / n, dtype=dt),))


# ---------------------------------------------------------------- shape ops


def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    return axis % x.ndim


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {shape}") from exc
    return _op(y, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return _op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def roll(x: Tensor, shift: int, axis: int) -> Tensor:
    """Cyclic shift: output index i reads input index (i - shift) mod extent."""
    axis = _axis(x, axis)
    shift = int(shift)
    return _op(np.roll(x.data, shift, axis=axis), (x,), lambda g: (np.roll(g, -shift, axis=axis),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ArgumentError("concat needs at least one tensor")
    first = parts[0]
    axis = _axis(first, axis)
    for p in parts[1:]:
        if p.ndim != first.ndim or any(
            s != t for i, (s, t) in enumerate(zip(p.shape, first.shape)) if i != axis
        ):
            raise ShapeError(f"concat: {p.shape} incompatible with {first.shape} on axis {axis}")
        if p.dtype != first.dtype:
            raise ArgumentError("concat: mixed dtypes")
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _op(
        np.concatenate([p.data for p in parts], axis=axis),
        parts,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def _check_channel_range(x: Tensor, lo: int, hi: int) -> None:
    if x.ndim < 2 or not 0 <= lo < hi <= x.shape[1]:
        raise ShapeError(f"channel range [{lo},{hi}) invalid for shape {x.shape}")


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    _check_channel_range(x, lo, hi)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, lo:hi] = g
        return (full,)

    return _op(x.data[:, lo:hi].copy(), (x,), vjp)


def assign_channels(x: Tensor, lo: int, hi: int, v: Tensor) -> Tensor:
    """Functional ``x[:, lo:hi] = v``: a new tensor, gradient to ``v`` only on the overwritten block."""
    _check_channel_range(x, lo, hi)
    expected = (x.shape[0], hi - lo) + x.shape[2:]
    if v.shape != expected:
        raise ShapeError(f"assign_channels: value shape {v.shape}, expected {expected}")
    if v.dtype != x.dtype:
        raise ArgumentError("assign_channels: mixed dtypes")
    out = x.data.copy()
    out[:, lo:hi] = v.data

    def vjp(g):
        gx = g.copy()
        gx[:, lo:hi] = 0
        return gx, g[:, lo:hi].copy()

    return _op(out, (x, v), vjp)


# ---------------------------------------------------------------- construction

_U64 = 2**64


def derive_seed(seed: int, *words: int) -> int:
    """Mix a base seed with extra integers (epoch, iteration, ...) into a fresh 64-bit seed."""
    ss = np.random.SeedSequence([int(seed) % _U64, *(int(w) % _U64 for w in words)])
    return int(ss.generate_state(1, np.uint64)[0])


def philox(seed: int) -> np.random.Generator:
    if not 0 <= int(seed) < _U64:
        raise ArgumentError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.Philox(key=int(seed)))


def uniform(shape, lo: float, hi: float, seed: int, dtype=np.float32) -> Tensor:
    """Values on [lo, hi) from a Philox stream keyed by ``seed``; never grad-tracked."""
    if not lo < hi:
        raise ArgumentError(f"uniform needs lo < hi, got [{lo}, {hi})")
    dt = np.dtype(dtype)
    u = philox(seed).random(tuple(shape))
    v = (lo + (hi - lo) * u).astype(dt)
    # rounding into the target dtype may land on hi or just under lo
    top = np.nextafter(dt.type(hi), dt.type(lo))
    v = np.clip(v, dt.type(lo), top)
    return Tensor._wrap(v)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape), dtype=dtype))


# ---------------------------------------------------------------- verification


def gradcheck(
    f: Callable[..., Tensor],
    x,
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    order: int = 2,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``x`` is a tensor or a sequence of tensors; ``f`` is called as ``f(*x)`` and
    must return a single-element tensor. The inputs are perturbed in place and
    restored, so ``f`` may also close over them (e.g. model parameters).
    With ``max_coords`` a seeded subset of coordinates per input is probed.
    ``order`` selects the central stencil: 2 (two evaluations) or 4 (four
    evaluations, truncation error O(step**4), useful for deep compositions
    where a 2-point stencil cannot resolve small gradients).

    The per-coordinate error is ``|a - n| / max(1e-12, |a| + |n|)``.
    """
    if order not in (2, 4):
        raise ArgumentError(f"gradcheck order must be 2 or 4, got {order}")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise ArgumentError("gradcheck needs float64 inputs")
    saved = [(t.requires_grad, t.grad) for t in xs]
    try:
        for t in xs:
            t.requires_grad = True
            t.grad = None
        out = f(*xs)
        if out.size != 1:
            raise ArgumentError(f"gradcheck needs a scalar function, got shape {out.shape}")
        out.backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in xs]
        for t in xs:
            t.requires_grad = False

        rng = philox(seed)
        worst = 0.0
        for t, a in zip(xs, analytic):
            flat = t.data.reshape(-1)
            a = a.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in idx:
                orig = flat[i]

                def at(delta):
                    flat[i] = orig + delta
                    return f(*xs).item()

                if order == 2:
                    fp, fm = at(step), at(-step)
                    up, down = orig + step, orig - step
                    flat[i] = orig
                    num = (fp - fm) / (up - down)
                else:
                    f2, f1, m1, m2 = at(2 * step), at(step), at(-step), at(-2 * step)
                    flat[i] = orig
                    num = (-f2 + 8.0 * f1 - 8.0 * m1 + m2) / (12.0 * step)
                err = abs(a[i] - num) / max(1e-12, abs(a[i]) + abs(num))
                worst = max(worst, float(err))
        return worst
    finally:
        for t, (rg, gr) in zip(xs, saved):
            t.requires_grad = rg
            t.grad = gr
