"""Dense tensors, trainable parameters, and the gradient tape.

Everything here is numpy-backed. A `Tensor` is a contiguous row-major
float array; ops in `convsst.ops` produce new tensors and, while a
`Tape` is active, append backward closures to it. `Tape.backward`
replays those closures in reverse execution order and accumulates
gradients into `Parameter` buffers.
"""

from __future__ import annotations

import numpy as np

_F32 = np.dtype(np.float32)
_F64 = np.dtype(np.float64)

# Module-level switch: when True every op output is checked for NaN/Inf.
_NAN_GUARD = False


def set_nan_guard(enabled: bool) -> None:
    """Enable or disable finite-value checking on every op output."""
    global _NAN_GUARD
    _NAN_GUARD = bool(enabled)


class TensorError(ValueError):
    """Raised on shape, dtype, or domain violations in tensor ops."""


class Tensor:
    """A dense n-dimensional float array (float32 or float64).

    `data` is always C-contiguous so the flat buffer is row-major with
    the last index fastest. `grad` stays None for intermediate values;
    parameters get a persistent gradient buffer (see `Parameter`).
    """

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype != _F32 and arr.dtype != _F64:
            arr = arr.astype(_F32)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
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
            raise TensorError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying array. Treat as read-only."""
        return self.data

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, dtype=dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


class Parameter:
    """A learnable tensor with a persistent, same-shape gradient buffer.

    Gradients accumulate across backward passes until `zero_grad`. A
    frozen parameter (trainable=False) still receives gradients from
    backward but is skipped by the optimizer and by gradient checks.
    """

    __slots__ = ("value", "trainable")

    def __init__(self, value, trainable: bool = True, dtype=None):
        self.value = value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)
        self.value.grad = np.zeros_like(self.value.data)
        self.trainable = trainable

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.value.grad[...] = 0.0

    def __repr__(self) -> str:
        flag = "" if self.trainable else ", frozen"
        return f"Parameter(shape={self.shape}, dtype={self.dtype.name}{flag})"


def zero_grads(params) -> None:
    """Set every gradient element of the given parameters to exactly 0."""
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Gradient tape
# ---------------------------------------------------------------------------

_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed differentiable ops.

    Used as a context manager around a forward pass; ops executed inside
    the block register (output, backward_fn) entries. `backward` walks
    the entries strictly in reverse execution order, which guarantees an
    op's output gradient is fully accumulated before the op consumes it.
    """

    __slots__ = ("entries",)

    def __init__(self):
        self.entries: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPES.pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: exited out of order")

    def __len__(self) -> int:
        return len(self.entries)

    def backward(self, loss: Tensor) -> None:
        """Populate gradients of every parameter reachable from `loss`.

        `loss` must be a scalar produced by ops recorded on this tape.
        Parameter gradients accumulate (+=); intermediate gradients live
        only inside this call.
        """
        if not isinstance(loss, Tensor):
            raise TensorError("backward expects a Tensor loss")
        if loss.data.size != 1:
            raise TensorError(f"loss must be scalar, got shape {loss.shape}")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

        def accum(t: Tensor, g: np.ndarray) -> None:
            if t.grad is not None:  # parameter leaf: persistent accumulation
                t.grad += g
                return
            key = id(t)
            prev = grads.get(key)
            # Never mutate stored arrays in place: an array may be shared
            # between two consumers' gradient slots.
            grads[key] = g if prev is None else prev + g

        for out, backward_fn in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            backward_fn(g, accum)


def tape_active() -> bool:
    return bool(_TAPES)


def record(out: Tensor, backward_fn) -> None:
    """Register an op on the active tape. Call only when one is active."""
    _TAPES[-1].entries.append((out, backward_fn))


def guard_output(out: Tensor) -> Tensor:
    """Validation hook: reject non-finite op outputs when the guard is on."""
    if _NAN_GUARD and not np.all(np.isfinite(out.data)):
        raise TensorError("non-finite value produced by an op (nan guard)")
    return out
