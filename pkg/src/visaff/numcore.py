"""Dense float64 tensors with a reverse-mode tape.

Only the primitives the fusion head needs are provided. Shapes are explicit:
the sole broadcast is adding a 1-D bias to every row of a matrix.
"""

from __future__ import annotations

import base64
import io
import json
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

CKPT_SCHEMA = "visaff-ckpt/1"


class ShapeError(ValueError):
    pass


class Tensor:
    """A float64 array plus the bookkeeping reverse mode needs."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable leaf tensor addressed by a dotted name."""

    __slots__ = ()

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def _node(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def fn(g):
        if A.ndim == 1:
            return g @ B.T, np.outer(A, g)
        return g @ B.T, A.T @ g

    return _node(A @ B, (a, b), fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a 1-D bias added to each row of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _node(a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _node(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes {a.shape} and {b.shape}")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    return _node(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, k: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * k, (a,), lambda g: (g * k,))


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row ``i`` of an ``(n, d)`` matrix by ``s[i]``."""
    x, s = as_tensor(x), as_tensor(s)
    if x.data.ndim != 2 or s.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows shapes {x.shape} and {s.shape}")
    X, S = x.data, s.data
    return _node(X * S[:, None], (x, s), lambda g: (g * S[:, None], (g * X).sum(axis=1)))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of nothing")
    datas = [p.data for p in parts]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def fn(g):
        return np.split(g, bounds, axis=axis)

    return _node(out, parts, fn)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    X = x.data
    return _node(np.maximum(X, 0.0), (x,), lambda g: (g * (X > 0),))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    Y = np.tanh(x.data)
    return _node(Y, (x,), lambda g: (g * (1.0 - Y * Y),))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    Y = np.exp(x.data)
    return _node(Y, (x,), lambda g: (g * Y,))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    X = x.data
    return _node(np.log(X), (x,), lambda g: (g / X,))


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return scale(sum_all(x), 1.0 / n)


def detach(x: Tensor) -> Tensor:
    return Tensor(as_tensor(x).data.copy())


def row_max(x: Tensor) -> Tensor:
    """Per-row maximum of a matrix; the gradient goes to the first argmax."""
    x = as_tensor(x)
    X = x.data
    idx = np.argmax(X, axis=1)
    rows = np.arange(X.shape[0])

    def fn(g):
        out = np.zeros_like(X)
        out[rows, idx] = g
        return (out,)

    return _node(X[rows, idx], (x,), fn)


def _masked_shift(X: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return X - X.max(axis=-1, keepdims=True)
    if not mask.any(axis=-1).all():
        raise ShapeError("softmax mask leaves an empty row")
    filled = np.where(mask, X, -np.inf)
    return np.where(mask, filled - filled.max(axis=-1, keepdims=True), -np.inf)


def softmax(x: Tensor, temperature: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction.

    ``mask`` (boolean, same shape) excludes entries: their probability is
    exactly zero and their values never influence the result.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    x = as_tensor(x)
    Z = _masked_shift(x.data / temperature, mask)
    E = np.exp(Z)
    Y = E / E.sum(axis=-1, keepdims=True)

    def fn(g):
        inner = (g * Y).sum(axis=-1, keepdims=True)
        return (Y * (g - inner) / temperature,)

    return _node(Y, (x,), fn)


def log_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Log-softmax over the last axis; masked entries read as 0 with zero gradient."""
    x = as_tensor(x)
    Z = _masked_shift(x.data, mask)
    lse = np.log(np.exp(Z).sum(axis=-1, keepdims=True))
    out = Z - lse
    P = np.exp(out)
    if mask is not None:
        out = np.where(mask, out, 0.0)

    def fn(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - P * g.sum(axis=-1, keepdims=True),)

    return _node(out, (x,), fn)


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``x[i, index[i]]`` for every row of a matrix."""
    x = as_tensor(x)
    X = x.data
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(X.shape[0])

    def fn(g):
        out = np.zeros_like(X)
        out[rows, index] = g
        return (out,)

    return _node(X[rows, index], (x,), fn)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit Euclidean norm."""
    x = as_tensor(x)
    X = x.data
    norm = np.sqrt((X * X).sum(axis=-1, keepdims=True) + eps)
    Y = X / norm

    def fn(g):
        return ((g - Y * (g * Y).sum(axis=-1, keepdims=True)) / norm,)

    return _node(Y, (x,), fn)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]``; accepts a vector or a matrix of logits."""
    logits = as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    two_d = logits.data.ndim == 2
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes")
    if not two_d:
        logits = _reshape(logits, (1, k))
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"{labels.shape[0]} labels for {logits.shape[0]} rows")
    return scale(mean_all(pick(log_softmax(logits), labels)), -1.0)


def _reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.T, (x,), lambda g: (g.T,))


# -------------------------------------------------------------- reverse mode


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves used more than once receive the sum of their contributions, and
    repeated calls keep accumulating until ``zero_grad``.
    """
    if output.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(_topo_order(output)):
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
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ------------------------------------------------------------ verification


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-5,
) -> float:
    """Largest ``|analytic - central_fd| / max(1, |central_fd|)`` over all entries."""
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite value at the check point")
    backward(out)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = f().item()
            flat[j] = orig - eps
            down = f().item()
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"non-finite value perturbing {p.name}[{j}]")
            fd = (up - down) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[j] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


# -------------------------------------------------------------- checkpoints


def dumps_checkpoint(params: Mapping[str, Tensor], meta: Mapping | None = None) -> str:
    """Serialise parameters: one JSON header line then name/shape/base64 triplets."""
    header = {"schema": CKPT_SCHEMA}
    if meta:
        header.update(meta)
    lines = [json.dumps(header, sort_keys=True)]
    for name, tensor in params.items():
        data = np.ascontiguousarray(tensor.data, dtype="<f8")
        lines.append(name)
        lines.append(json.dumps(list(data.shape)))
        lines.append(base64.b64encode(data.tobytes()).decode("ascii"))
    return "\n".join(lines) + "\n"


def loads_checkpoint(text: str) -> tuple[dict, dict[str, np.ndarray]]:
    buf = io.StringIO(text)
    header = json.loads(buf.readline())
    if header.get("schema") != CKPT_SCHEMA:
        raise ValueError(f"unknown checkpoint schema {header.get('schema')!r}")
    arrays: dict[str, np.ndarray] = {}
    rest = [ln for ln in buf.read().split("\n") if ln]
    if len(rest) % 3:
        raise ValueError("truncated checkpoint")
    for k in range(0, len(rest), 3):
        name, shape, payload = rest[k : k + 3]
        raw = np.frombuffer(base64.b64decode(payload), dtype="<f8")
        arrays[name] = raw.reshape(json.loads(shape)).astype(np.float64)
    return header, arrays
