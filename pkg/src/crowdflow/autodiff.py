"""Dense reverse-mode differentiation on numpy arrays.

Values are float64 arrays. Operations are recorded on the active :class:`Tape`
only when at least one operand is tracked (a ``requires_grad`` leaf or the
output of an op already on that tape). Without an active tape nothing is
recorded, so inference allocates no gradient state.

Example
-------
>>> store = ParameterStore()
>>> w = store.add("w", [1.0, 2.0, 3.0])
>>> with Tape() as tape:
...     loss = (w * w).sum()
>>> tape.backward(loss, store)["w"]
array([2., 4., 6.])
"""
from __future__ import annotations

import json
import threading
from collections.abc import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError

__all__ = [
    "Tensor", "Tape", "ParameterStore", "as_tensor", "active_tape",
    "add", "sub", "mul", "div", "neg", "power", "matmul", "outer", "sum", "mean",
    "exp", "log", "sqrt", "sigmoid", "silu", "softmax", "squared_norm", "concat",
    "stack", "broadcast_to", "reshape", "transpose", "clip", "relu", "absolute",
    "index_add", "take_rows", "custom_op", "grad_check", "check_parameter_gradients",
    "save_parameters", "load_parameters", "parameters_to_json", "parameters_from_json",
]

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array with an optional handle into a recording tape."""

    __slots__ = ("value", "requires_grad", "name", "_tape", "_node")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def node_id(self) -> int | None:
        return self._node

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t._tape is tape


def custom_op(value: np.ndarray, parents: Sequence[Tensor], vjp: Callable, name: str = "op") -> Tensor:
    """Wrap a forward value and its vector-Jacobian product as a recorded op.

    ``vjp(g)`` receives the output cotangent and returns one gradient (or
    ``None``) per parent.
    """
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(_tracked(p, tape) for p in parents):
        tape._record(out, parents, vjp, name)
    return out


class Tape:
    """Ordered record of operations for a single backward pass."""

    def __init__(self):
        self.records: list[tuple] = []
        self._leaves: dict[int, Tensor] = {}
        self._grads: dict[int, np.ndarray] | None = None
        self._consumed = False

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def _record(self, out: Tensor, parents, vjp, name):
        for p in parents:
            if p.requires_grad and p._tape is not self:
                self._leaves[id(p)] = p
        out._tape = self
        out._node = len(self.records)
        self.records.append((out, tuple(parents), vjp, name))

    def backward(self, loss: Tensor, params: ParameterStore | Iterable[Tensor] | None = None
                 ) -> dict[str, np.ndarray]:
        """Propagate d(loss)/d(.) back through the recorded operations.

        Returns a ``name -> gradient`` map over named leaves. Parameters
        passed in ``params`` but unreachable from ``loss`` get zero gradients.
        """
        if self._consumed:
            raise ContractError("backward called twice on the same tape")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {}
        if loss._tape is self:
            grads[id(loss)] = np.ones_like(loss.value)
            for out, parents, vjp, name in reversed(self.records):
                g = grads.pop(id(out), None)
                if g is None:
                    continue
                pgrads = vjp(g)
                for p, pg in zip(parents, pgrads):
                    if pg is None or not _tracked(p, self):
                        continue
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = np.array(pg, dtype=np.float64, copy=True)
        elif loss.requires_grad:
            grads[id(loss)] = np.ones_like(loss.value)
            self._leaves[id(loss)] = loss
        self._grads = {k: g for k, g in grads.items() if k in self._leaves}
        result: dict[str, np.ndarray] = {}
        for key, g in self._grads.items():
            leaf = self._leaves[key]
            if leaf.name is not None:
                result[leaf.name] = g
        if params is not None:
            tensors = params.tensors() if isinstance(params, ParameterStore) else list(params)
            for t in tensors:
                if t.name is None:
                    continue
                if t.name not in result:
                    result[t.name] = np.zeros_like(t.value)
        return result

    def grad(self, leaf: Tensor) -> np.ndarray:
        """Gradient of the last backward pass w.r.t. a leaf (zeros if unreachable)."""
        if self._grads is None:
            raise ContractError("grad requested before backward")
        return self._grads.get(id(leaf), np.zeros_like(leaf.value))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return custom_op(a.value + b.value, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return custom_op(a.value - b.value, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value
    return custom_op(av * bv, (a, b),
                     lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return custom_op(out, (a, b),
                     lambda g: (_unbroadcast(g / bv, av.shape),
                                _unbroadcast(-g * out / bv, bv.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(-a.value, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return custom_op(av ** exponent, (a,),
                     lambda g: (g * exponent * av ** (exponent - 1),), "pow")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0 or av.ndim > 2 or bv.ndim > 2 or av.shape[-1] != bv.shape[0]:
        raise ContractError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2:          # (m,k) @ (k,)
            return np.outer(g, bv), av.T @ g
        if bv.ndim == 2:          # (k,) @ (k,n)
            return bv @ g, np.outer(av, g)
        return g * bv, g * av     # dot product

    return custom_op(av @ bv, (a, b), vjp, "matmul")


def outer(a, b) -> Tensor:
    """Outer product of two vectors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ContractError(f"outer: expected vectors, got {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return custom_op(np.outer(av, bv), (a, b), lambda g: (g @ bv, av @ g), "outer")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return custom_op(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    if n == 0:
        raise ContractError("mean: empty reduction")
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return custom_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return custom_op(np.log(av), (a,), lambda g: (g / av,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return custom_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.value)
    return custom_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a) -> Tensor:
    """Sigmoid-weighted linear unit x * sigmoid(x)."""
    a = as_tensor(a)
    av = a.value
    s = _sigmoid(av)
    return custom_op(av * s, (a,), lambda g: (g * (s + av * s * (1.0 - s)),), "silu")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return custom_op(out, (a,), vjp, "softmax")


def squared_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    av = a.value

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (2.0 * av * g,)

    return custom_op((av * av).sum(axis=axis, keepdims=keepdims), (a,), vjp, "squared_norm")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ContractError(f"concat: {exc} (shapes {[t.shape for t in ts]})") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return custom_op(out, ts, vjp, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) if axis >= 0 else
                reshape(t, t.shape + (1,)) for t in ts]
    return concat(expanded, axis=axis)


def take(a, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    a = as_tensor(a)
    shape = a.shape
    out = a.value[index]

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return custom_op(out, (a,), vjp, "slice")


def take_rows(a, rows: np.ndarray) -> Tensor:
    """Gather rows ``a[rows]`` for an integer index array."""
    return take(a, np.asarray(rows, dtype=np.intp))


def index_add(src, index: np.ndarray, size: int) -> Tensor:
    """Segment sum: ``out[index[k]] += src[k]`` along the leading axis."""
    src = as_tensor(src)
    index = np.asarray(index, dtype=np.intp)
    if index.shape != src.shape[:1]:
        raise ContractError(f"index_add: index shape {index.shape} vs source {src.shape}")
    out = np.zeros((size,) + src.shape[1:])
    np.add.at(out, index, src.value)
    return custom_op(out, (src,), lambda g: (g[index],), "index_add")


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ContractError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    src = a.shape
    return custom_op(np.array(out), (a,), lambda g: (_unbroadcast(g, src),), "broadcast")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ContractError(f"reshape: cannot reshape {src} to {shape}") from None
    return custom_op(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(a.value.T, (a,), lambda g: (g.T,), "transpose")


def clip(a, lo: float, hi: float) -> Tensor:
    """Hard clamp; the gradient is zero only where the clamp is active."""
    a = as_tensor(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return custom_op(np.clip(av, lo, hi), (a,), lambda g: (g * inside,), "clip")


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.value > 0
    return custom_op(np.where(keep, a.value, 0.0), (a,), lambda g: (g * keep,), "relu")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sgn = np.sign(a.value)
    return custom_op(np.abs(a.value), (a,), lambda g: (g * sgn,), "abs")


class ParameterStore:
    """Named, ordered collection of trainable tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    @property
    def n_parameters(self) -> int:
        return int(np.sum([t.size for t in self._params.values()], dtype=np.int64))

    def snapshot(self) -> dict[str, np.ndarray]:
        out = {}
        for name, t in self._params.items():
            arr = t.value.copy()
            arr.setflags(write=False)
            out[name] = arr
        return out

    def assign(self, values: dict[str, np.ndarray]) -> None:
        for name, v in values.items():
            t = self._params[name]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != t.shape:
                raise ContractError(f"parameter {name!r}: shape {v.shape} != {t.shape}")
            t.value = v.copy()

    def copy(self) -> ParameterStore:
        other = ParameterStore()
        for name, t in self._params.items():
            other.add(name, t.value.copy())
        return other


def parameters_to_json(store: ParameterStore, extra: dict | None = None) -> str:
    """Serialize parameters; ``repr`` of a float64 round-trips bit-exactly."""
    doc = {"format": "crowdflow-parameters/1"}
    if extra:
        doc.update(extra)
    doc["parameters"] = {
        name: {"shape": list(t.shape), "values": [repr(float(x)) for x in t.value.ravel()]}
        for name, t in store.items()
    }
    return json.dumps(doc, indent=1, sort_keys=False)


def parameters_from_json(text: str) -> tuple[ParameterStore, dict]:
    doc = json.loads(text)
    if "parameters" not in doc:
        raise ContractError("parameter document has no 'parameters' block")
    store = ParameterStore()
    for name, entry in doc["parameters"].items():
        shape = tuple(entry["shape"])
        values = np.array([float(s) for s in entry["values"]], dtype=np.float64)
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise ContractError(f"parameter {name!r}: {values.size} values for shape {shape}")
        store.add(name, values.reshape(shape))
    meta = {k: v for k, v in doc.items() if k != "parameters"}
    return store, meta


def save_parameters(path, store: ParameterStore, extra: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(parameters_to_json(store, extra))
        fh.write("\n")


def load_parameters(path) -> tuple[ParameterStore, dict]:
    with open(path, encoding="utf-8") as fh:
        return parameters_from_json(fh.read())


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error is ``|analytic - numeric| / max(1, |numeric|)``. The
    divisor is the representable spacing ``hi - lo`` rather than ``2 * step``,
    which removes the rounding of ``x +- step`` from the estimate.
    """
    point = np.array(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True, name="x")
    with Tape() as tape:
        y = f(x)
    tape.backward(y)
    analytic = tape.grad(x)
    numeric = np.zeros_like(point)
    flat = point.ravel()
    for k in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[k] += step
        lo[k] -= step
        fp = as_tensor(f(Tensor(hi.reshape(point.shape)))).value
        fm = as_tensor(f(Tensor(lo.reshape(point.shape)))).value
        numeric.flat[k] = (float(fp) - float(fm)) / (hi[k] - lo[k])
    if numeric.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def check_parameter_gradients(loss_fn: Callable[[], Tensor], store: ParameterStore,
                              step: float = 1e-6, names: Iterable[str] | None = None
                              ) -> dict[str, float]:
    """Per-parameter max relative error of ``loss_fn``'s gradient vs central differences.

    ``loss_fn`` must read the parameters from ``store`` each time it is called.
    """
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss, store)
    errors = {}
    for name in (names if names is not None else store.names()):
        t = store[name]
        base = t.value.copy()
        numeric = np.zeros_like(base)
        for k in range(base.size):
            ends = []
            for sign in (1.0, -1.0):
                pert = base.copy()
                pert.flat[k] += sign * step
                t.value = pert
                numeric.flat[k] += sign * float(loss_fn().value)
                ends.append(pert.flat[k])
            numeric.flat[k] /= ends[0] - ends[1]
        t.value = base
        err = np.abs(grads[name] - numeric) / np.maximum(1.0, np.abs(numeric))
        errors[name] = float(err.max()) if err.size else 0.0
    return errors
