"""Dense float64 tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: tensors wrap contiguous row-major float64
arrays, differentiable ops append a backward closure to the active `Tape`,
and `backward` replays the tape in reverse (execution order is already a
topological order, so each recorded op is visited exactly once).  Gradients
accumulate additively, which makes parameters that are used several times
(the emotion gate, recurrent weights) come out right without special cases.

Only the broadcasting the models actually need is supported: equal shapes,
a scalar against anything, and a 1-D row vector added to / multiplied with
a 2-D batch.  Anything else raises ShapeError rather than silently
borrowing numpy semantics.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "tape_active",
    "record_op",
    "backward",
    "matmul",
    "affine",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "concat_cols",
    "slice_cols",
    "sum_all",
    "activation",
    "sigmoid",
    "tanh",
    "fd_gradient",
    "zero_grads",
    "relative_error",
    "stable_sigmoid",
]

_TAPE: "Tape | None" = None


class Tensor:
    """A contiguous row-major float64 array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named leaf tensor with a persistent, always-allocated gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tape:
    """Execution-ordered record of differentiable ops (define-by-run).

    Built per forward pass inside a ``with`` block and discarded on exit;
    confine each tape to a single thread.
    """

    def __init__(self):
        self._entries: list[tuple[tuple[Tensor, ...], Callable]] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        global _TAPE
        self._prev = _TAPE
        _TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _TAPE
        _TAPE = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self._entries)


def tape_active() -> bool:
    return _TAPE is not None


def record_op(outputs: Sequence[Tensor], back: Callable) -> None:
    """Register a custom differentiable op on the active tape.

    `back` receives one gradient array per output (zeros where an output
    did not contribute to the loss) and must accumulate into the inputs'
    grads itself.  No-op when no tape is active.
    """
    if _TAPE is not None:
        _TAPE._entries.append((tuple(outputs), back))


def _accum(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution; copies on first touch so closures may pass views."""
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(out: Tensor, inputs: tuple[Tensor, ...], back: Callable) -> Tensor:
    if _TAPE is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        _TAPE._entries.append(((out,), back))
    return out


def backward(loss: Tensor) -> None:
    """Populate grads of everything reachable from a scalar loss.

    Requires the tape that recorded the loss to still be active; grads of
    parameters used along several paths accumulate additively.
    """
    if _TAPE is None:
        raise ContractError("backward requires an active Tape")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for outputs, back in reversed(_TAPE._entries):
        grads = tuple(o.grad for o in outputs)
        if all(g is None for g in grads):
            continue
        back(*(g if g is not None else np.zeros_like(o.data) for g, o in zip(grads, outputs)))


# --- broadcasting support (only the three patterns the models use) ---


def _is_scalar_shape(s: tuple[int, ...]) -> bool:
    return s == () or s == (1,)


def _check_binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or _is_scalar_shape(sa) or _is_scalar_shape(sb):
        return
    if len(sa) == 2 and sb == (sa[1],):
        return
    if len(sb) == 2 and sa == (sb[1],):
        return
    raise ShapeError(f"{op}: unsupported operand shapes {sa} and {sb}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if _is_scalar_shape(shape):
        return np.asarray(g.sum()).reshape(shape)
    # row vector broadcast over a 2-D batch
    return g.sum(axis=0)


# --- primitive ops ---


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors; recorded when a tape is active."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def back(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _finish(out, (a, b), back)


def affine(x, W, b) -> Tensor:
    """x @ W.T + b for a (B, d) batch, (n, d) weights and (n,) bias."""
    x, W, b = _as_tensor(x), _as_tensor(W), _as_tensor(b)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ShapeError(f"affine: incompatible shapes x={x.shape} W={W.shape}")
    if b.shape != (W.shape[0],):
        raise ShapeError(f"affine: bias shape {b.shape} does not match W {W.shape}")
    out = Tensor(x.data @ W.data.T + b.data)

    def back(g):
        if x.requires_grad:
            _accum(x, g @ W.data)
        if W.requires_grad:
            _accum(W, g.T @ x.data)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _finish(out, (x, W, b), back)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expects a 2-D tensor, got {a.shape}")
    out = Tensor(a.data.T)

    def back(g):
        _accum(a, g.T)

    return _finish(out, (a,), back)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes("add", a, b)
    out = Tensor(a.data + b.data)

    def back(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g, b.data.shape))

    return _finish(out, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes("sub", a, b)
    out = Tensor(a.data - b.data)

    def back(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(-g, b.data.shape))

    return _finish(out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes("mul", a, b)
    out = Tensor(a.data * b.data)

    def back(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g * a.data, b.data.shape))

    return _finish(out, (a, b), back)


def scale(a, c: float) -> Tensor:
    """Multiply by a plain Python constant (no gradient with respect to c)."""
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)

    def back(g):
        _accum(a, g * c)

    return _finish(out, (a,), back)


def concat_cols(parts: Sequence) -> Tensor:
    """Concatenate along the last axis; all parts share the leading shape."""
    ts = [_as_tensor(p) for p in parts]
    if not ts:
        raise ShapeError("concat_cols: needs at least one part")
    lead = ts[0].data.shape[:-1]
    if any(t.data.shape[:-1] != lead for t in ts):
        raise ShapeError(f"concat_cols: leading shapes differ: {[t.shape for t in ts]}")
    out = Tensor(np.concatenate([t.data for t in ts], axis=-1))
    widths = [t.data.shape[-1] for t in ts]

    def back(g):
        lo = 0
        for t, w in zip(ts, widths):
            if t.requires_grad:
                _accum(t, g[..., lo : lo + w])
            lo += w

    return _finish(out, tuple(ts), back)


def slice_cols(a, lo: int, hi: int) -> Tensor:
    a = _as_tensor(a)
    if not 0 <= lo <= hi <= a.data.shape[-1]:
        raise ShapeError(f"slice_cols: [{lo}:{hi}] out of range for shape {a.shape}")
    out = Tensor(a.data[..., lo:hi])

    def back(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[..., lo:hi] += g

    return _finish(out, (a,), back)


def sum_all(a) -> Tensor:
    """Sum every entry down to a scalar tensor."""
    a = _as_tensor(a)
    out = Tensor(a.data.sum())

    def back(g):
        if a.grad is None:
            a.grad = np.full(a.data.shape, g.reshape(-1)[0])
        else:
            a.grad += g

    return _finish(out, (a,), back)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Branch-form logistic: 1/(1+e^-x) for x >= 0, e^x/(1+e^x) below.

    Vectorized through exp(-|x|): numerator 1 or e^x per branch, shared
    denominator 1+e^-|x|; the exponent never overflows.
    """
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    num = np.where(x >= 0, 1.0, e)
    e += 1.0
    np.divide(num, e, out=num)
    return num


def activation(x, kind: str) -> Tensor:
    """Elementwise sigmoid or tanh, differentiable."""
    x = _as_tensor(x)
    if kind == "sigmoid":
        y = stable_sigmoid(x.data)

        def back(g):
            _accum(x, g * y * (1.0 - y))

    elif kind == "tanh":
        y = np.tanh(x.data)

        def back(g):
            _accum(x, g * (1.0 - y * y))

    else:
        raise ContractError(f"activation: unknown kind {kind!r} (expected 'sigmoid' or 'tanh')")
    return _finish(Tensor(y), (x,), back)


def sigmoid(x) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x) -> Tensor:
    return activation(x, "tanh")


# --- gradient utilities ---


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def fd_gradient(
    f: Callable[[], float], params: Iterable[Parameter], h: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate per parameter coordinate.

    `f` is re-evaluated with each coordinate displaced by +/- h; call it
    without an active tape.  Parameters are restored exactly afterwards.
    """
    if h <= 0:
        raise ContractError(f"fd_gradient: step size must be positive, got {h}")
    grads: dict[str, np.ndarray] = {}
    for p in params:
        flat = p.data.reshape(-1)
        est = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            est[i] = (fp - fm) / (2.0 * h)
        grads[p.name] = est.reshape(p.data.shape)
    return grads


def relative_error(a, b) -> float:
    """max over coordinates of |a-b| / max(1e-8, |a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1e-8, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
