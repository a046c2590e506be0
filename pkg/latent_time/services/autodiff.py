"""
Define-by-run reverse-mode differentiation on float64 numpy arrays.

Every primitive applied while a Tape is active (and while at least one input
requires a gradient) is appended to that tape. backward_gradients() walks the
tape in reverse and writes gradients into the leaves.

    tape = Tape()
    with tape:
        loss = ((x @ w).tanh()).sum()
    backward_gradients(loss, tape)
    w.grad

`no_record()` suppresses recording, which the ODE solver uses for the
step-size search of the two-phase solve.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from latent_time.exceptions import ContractError, NumericError, ShapeError

_state = threading.local()


def _stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = []
        _state.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_record():
    """Run the enclosed block without building a tape."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def is_recording() -> bool:
    return _active_tape() is not None


class Tensor:
    """n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # arithmetic ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    # elementwise / reductions ----------------------------------------------
    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def softplus(self):
        return softplus(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        n = self.size if axis is None else self.shape[axis]
        return scale(reduce_sum(self, axis), 1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass(frozen=True)
class Record:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., tuple]


class Tape:
    """Ordered record of primitives; usable as a context manager."""

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape scopes must be exited in LIFO order")
        stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def replay(self) -> bool:
        """Recompute every record from its recorded inputs; True when bitwise identical."""
        for record in self.records:
            again = record.forward(*(t.values for t in record.inputs))
            if again.shape != record.output.values.shape:
                return False
            if not np.array_equal(again.view(np.uint64), record.output.values.view(np.uint64)):
                return False
        return True


def primitive(kind: str, inputs: Sequence[Tensor], forward: Callable[..., np.ndarray],
              vjp: Callable[..., tuple]) -> Tensor:
    """
    Apply one primitive: forward(*input_values) -> output values and
    vjp(grad_out, out_values, *input_values) -> one gradient (or None) per input.
    """
    values = np.asarray(forward(*(t.values for t in inputs)), dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericError(f"{kind} produced non-finite values")
    tape = _active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs_grad)
    if needs_grad:
        tape.records.append(Record(kind, tuple(inputs), out, forward, vjp))
    return out


def backward_gradients(output: Tensor, tape: Tape) -> dict[int, np.ndarray]:
    """
    Reverse sweep over `tape` seeded at the scalar `output`.

    Leaf tensors that require gradients get their `grad` overwritten with the
    total derivative. Returns {id(leaf): grad}.
    """
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if not tape.records:
        raise ContractError("backward called on an empty tape")

    produced = {id(r.output) for r in tape.records}
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.values)}
    leaves: dict[int, Tensor] = {}

    for record in reversed(tape.records):
        g = grads.pop(id(record.output), None)
        if g is None:
            continue
        input_grads = record.vjp(g, record.output.values, *(t.values for t in record.inputs))
        for tensor, gi in zip(record.inputs, input_grads):
            if gi is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            grads[key] = grads[key] + gi if key in grads else gi
            if key not in produced:
                leaves[key] = tensor

    result = {}
    for key, leaf in leaves.items():
        leaf.grad = np.array(grads[key], dtype=np.float64).reshape(leaf.shape)
        result[key] = leaf.grad
    return result


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------
def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(kind: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return primitive(
        "add", (a, b), np.add,
        lambda g, out, x, y: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return primitive(
        "sub", (a, b), np.subtract,
        lambda g, out, x, y: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    sa, sb = a.shape, b.shape
    return primitive(
        "mul", (a, b), np.multiply,
        lambda g, out, x, y: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    sa, sb = a.shape, b.shape
    return primitive(
        "div", (a, b), np.divide,
        lambda g, out, x, y: (_unbroadcast(g / y, sa), _unbroadcast(-g * x / (y * y), sb)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    """Scalar multiply."""
    return primitive("scale", (a,), lambda x: x * c, lambda g, out, x: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def vjp(g, out, x, y):
        if x.ndim == 2 and y.ndim == 2:
            return g @ y.T, x.T @ g
        if x.ndim == 2:
            return np.outer(g, y), x.T @ g
        if y.ndim == 2:
            return y @ g, np.outer(x, g)
        return g * y, g * x

    return primitive("matmul", (a, b), np.matmul, vjp)


def tanh(a: Tensor) -> Tensor:
    return primitive("tanh", (a,), np.tanh, lambda g, out, x: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    return primitive("relu", (a,), lambda x: np.maximum(x, 0.0), lambda g, out, x: (g * (x > 0.0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a: Tensor) -> Tensor:
    return primitive(
        "softplus", (a,), lambda x: np.logaddexp(0.0, x), lambda g, out, x: (g * _sigmoid(x),)
    )


def exp(a: Tensor) -> Tensor:
    return primitive("exp", (a,), np.exp, lambda g, out, x: (g * out,))


def log(a: Tensor) -> Tensor:
    def forward(x):
        if np.any(x <= 0.0):
            raise NumericError("log of a non-positive value")
        return np.log(x)

    return primitive("log", (a,), forward, lambda g, out, x: (g / x,))


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape

    def vjp(g, out, x):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return primitive("reduce_sum", (a,), lambda x: np.sum(x, axis=axis), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = a.shape
    try:
        np.empty(original).reshape(shape)
    except ValueError:
        raise ShapeError("reshape", original, shape) from None
    return primitive(
        "reshape", (a,), lambda x: x.reshape(shape), lambda g, out, x: (g.reshape(original),)
    )


def take(a: Tensor, index) -> Tensor:
    shape = a.shape

    def vjp(g, out, x):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return primitive("index", (a,), lambda x: np.array(x[index]), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    ref = list(tensors[0].shape)
    ax = axis % len(ref)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != ax):
            raise ShapeError("concat", *(t.shape for t in tensors))
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g, out, *xs):
        return tuple(np.split(g, splits, axis=ax))

    return primitive("concat", tensors, lambda *xs: np.concatenate(xs, axis=ax), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    def forward(x):
        z = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(z)
        return e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g, out, x):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return primitive("softmax", (a,), forward, vjp)


def _log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return x - m - np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    def vjp(g, out, x):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return primitive("log_softmax", (a,), lambda x: _log_softmax(x, axis), vjp)


def softmax_log_likelihood(logits: Tensor, targets) -> Tensor:
    """Per-row log-softmax probability of the target class; logits (B, C) -> (B,)."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise ShapeError("softmax_log_likelihood", logits.shape, targets.shape)
    rows = np.arange(targets.shape[0])

    def forward(x):
        return _log_softmax(x, axis=1)[rows, targets]

    def vjp(g, out, x):
        grad = -np.exp(_log_softmax(x, axis=1))
        grad[rows, targets] += 1.0
        return (grad * g[:, None],)

    return primitive("softmax_log_likelihood", (logits,), forward, vjp)


def squared_error(prediction, target) -> Tensor:
    """Elementwise (prediction - target)**2."""
    a, b = as_tensor(prediction), as_tensor(target)
    _broadcast_check("squared_error", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g, out, x, y):
        d = 2.0 * g * (x - y)
        return _unbroadcast(d, sa), _unbroadcast(-d, sb)

    return primitive("squared_error", (a, b), lambda x, y: (x - y) ** 2, vjp)


# ---------------------------------------------------------------------------
# parameter serialization
# ---------------------------------------------------------------------------
def pack_parameters(params: dict[str, Tensor]) -> tuple[list[dict], bytes]:
    """Flatten named tensors into little-endian float64 bytes plus a header table."""
    table, chunks, offset = [], [], 0
    for name, tensor in params.items():
        raw = np.ascontiguousarray(tensor.values, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return table, b"".join(chunks)


def unpack_parameters(table: list[dict], payload: bytes) -> dict[str, np.ndarray]:
    arrays = {}
    for entry in table:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["nbytes"] != 8 * count or entry["offset"] + entry["nbytes"] > len(payload):
            raise ContractError(f"parameter {entry['name']} does not fit the payload")
        flat = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = flat.astype(np.float64).reshape(entry["shape"])
    return arrays
