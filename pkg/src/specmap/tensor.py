"""Dense float64 tensors with taped reverse-mode differentiation.

A ``Tape`` records every differentiable operation applied while it is active;
recording order is topological by construction, so the backward sweep is a
single reverse pass over the records. One logical thread owns the tape.
"""

from __future__ import annotations

import numpy as np

_TAPE_STACK: list["Tape"] = []
_DEBUG_VALIDATE = False


def set_debug_validation(enabled: bool) -> None:
    """Toggle NaN/Inf checking of every op output (slow; for debugging)."""
    global _DEBUG_VALIDATE
    _DEBUG_VALIDATE = bool(enabled)


def debug_validation_enabled() -> bool:
    return _DEBUG_VALIDATE


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot.

    ``requires_grad`` marks leaves whose gradient should be accumulated by
    ``backward``; it propagates to op outputs so the tape knows which paths
    to differentiate. ``grad`` is None until a backward pass reaches the leaf
    and accumulates across repeated backward calls until ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class OpRecord:
    """One taped operation: inputs, output, and the gradient closure.

    ``backward(grad_out)`` returns one gradient array (or None) per input,
    honouring the ``needs`` mask captured at record time.
    """

    __slots__ = ("op", "inputs", "output", "backward", "needs")

    def __init__(self, op, inputs, output, backward, needs):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.needs = needs


class Tape:
    """Ordered record of differentiable operations; a context manager.

    Entering pushes the tape as the recording target; ops apply themselves to
    it via ``apply_op``. Records form a DAG whose topological order equals
    recording order.
    """

    def __init__(self):
        self.records: list[OpRecord] = []
        self._output_ids: set[int] = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self):
        return len(self.records)

    def record(self, op, inputs, output, backward, needs):
        self.records.append(OpRecord(op, tuple(inputs), output, backward, needs))
        self._output_ids.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._output_ids


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def apply_op(op: str, inputs, out_data: np.ndarray, backward) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed.

    ``backward(grad_out, needs)`` must return a list with one gradient array
    (or None) per input; entries whose ``needs`` flag is False may be skipped.
    """
    if _DEBUG_VALIDATE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values in output of {op}")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        needs = [t.requires_grad for t in inputs]
        if any(needs):
            out.requires_grad = True
            tape.record(op, inputs, out, backward, needs)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Visits each record exactly once, in reverse recording order. Leaves with
    requires_grad=False receive no gradient; repeated calls accumulate.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not tape.produced(loss):
        raise ValueError("loss tensor is not on the tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        input_grads = rec.backward(g, rec.needs)
        for t, gi, needed in zip(rec.inputs, input_grads, rec.needs):
            if gi is None or not needed:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = t

    for key, g in grads.items():
        t = holders.get(key)
        if t is None or not t.requires_grad or tape.produced(t):
            continue
        if t.grad is None:
            t.grad = g.copy()
        else:
            t.grad = t.grad + g
