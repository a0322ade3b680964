"""Small dense-tensor graph with reverse-mode differentiation.

Every tensor is a 2-D numpy array (column vectors are ``(k, 1)``).  Nodes are
evaluated eagerly as they are built (define-by-run), and :func:`forward`
re-evaluates a graph from its current bindings, which is what gradient checks
use after perturbing a parameter in place.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

DEBUG = False  # when set, every node value is checked for NaN/Inf


class DiffError(Exception):
    pass


class ShapeError(DiffError, ValueError):
    pass


class UnboundInputError(DiffError):
    pass


class BackwardError(DiffError):
    pass


def tensor(data, dtype=np.float64) -> np.ndarray:
    """Coerce ``data`` to a 2-D float array; scalars become ``(1, 1)``, 1-D becomes a column."""
    arr = np.array(data, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensor: rank {arr.ndim} not supported")
    if DEBUG and not np.all(np.isfinite(arr)):
        raise ValueError("tensor: non-finite values")
    return arr


class Node:
    __slots__ = ("op", "inputs", "value", "grad", "fwd", "bwd", "name", "store")

    def __init__(self, op: str, inputs: Sequence["Node"], fwd=None, bwd=None, name=None, store=None):
        self.op = op
        self.inputs = tuple(inputs)
        self.fwd = fwd
        self.bwd = bwd
        self.name = name
        self.store = store
        self.value: Optional[np.ndarray] = None
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return None if self.value is None else self.value.shape

    def evaluate(self) -> None:
        if self.op == "input":
            return
        if self.op == "parameter":
            self.value = self.store.values[self.name]
            return
        vals = [n.value for n in self.inputs]
        if any(v is None for v in vals):
            self.value = None
            return
        out = self.fwd(*vals)
        if DEBUG and not np.all(np.isfinite(out)):
            raise FloatingPointError(f"{self.op}: non-finite output")
        self.value = out

    def __repr__(self):
        return f"Node({self.op}, shape={self.shape})"


def _make(op, inputs, fwd, bwd) -> Node:
    node = Node(op, inputs, fwd, bwd)
    node.evaluate()
    return node


# ---------------------------------------------------------------------------
# leaves


def constant(value, dtype=np.float64) -> Node:
    node = Node("input", ())
    node.value = tensor(value, dtype)
    return node


def placeholder(name: str) -> Node:
    return Node("input", (), name=name)


def bind(node: Node, value, dtype=np.float64) -> None:
    if node.op != "input":
        raise DiffError(f"bind: {node.op} node is not an input")
    node.value = tensor(value, dtype)


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Node, b: Node) -> Node:
    if a.value is not None and b.value is not None and a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: shapes {a.value.shape} and {b.value.shape} are incompatible")

    def bwd(g, av, bv, out):
        return g @ bv.T, av.T @ g

    return _make("matmul", (a, b), lambda x, y: x @ y, bwd)


def relu(x: Node) -> Node:
    return _make("relu", (x,), lambda v: np.maximum(v, 0.0), lambda g, v, out: (g * (v > 0),))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Node) -> Node:
    return _make("sigmoid", (x,), _sigmoid, lambda g, v, out: (g * out * (1.0 - out),))


def _softmax(v, mask=None):
    if mask is not None:
        v = np.where(mask, v, -np.inf)
    z = v - v.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def softmax(x: Node, mask: Optional[np.ndarray] = None) -> Node:
    """Column-wise softmax; entries where ``mask`` is False get exactly zero mass."""
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(-1, 1)
        if not mask.any():
            raise ValueError("softmax: mask excludes every entry")

    def bwd(g, v, out):
        return (out * (g - (g * out).sum(axis=0, keepdims=True)),)

    return _make("softmax", (x,), lambda v: _softmax(v, mask), bwd)


def _check_same(op, a, b):
    if a.value is not None and b.value is not None and a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


def hadamard(a: Node, b: Node) -> Node:
    _check_same("hadamard", a, b)
    return _make("hadamard", (a, b), lambda x, y: x * y, lambda g, x, y, out: (g * y, g * x))


def add(a: Node, b: Node) -> Node:
    _check_same("add", a, b)
    return _make("add", (a, b), lambda x, y: x + y, lambda g, x, y, out: (g, g))


def scale(x: Node, c: float, shift: float = 0.0) -> Node:
    """``c * x + shift`` for python scalars."""
    return _make("scalar-mul", (x,), lambda v: c * v + shift, lambda g, v, out: (c * g,))


def transpose(x: Node) -> Node:
    return _make("transpose", (x,), lambda v: v.T, lambda g, v, out: (g.T,))


def take(x: Node, rows: Sequence[int]) -> Node:
    """Gather rows of ``x`` (used for permutations)."""
    idx = np.asarray(rows, dtype=np.int64)

    def bwd(g, v, out):
        gx = np.zeros_like(v)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make("take", (x,), lambda v: v[idx], bwd)


def detach(x: Node) -> Node:
    return _make("detach", (x,), lambda v: v, None)


def overwrite(x: Node, value: np.ndarray) -> Node:
    """Forward returns ``value``; backward passes the gradient straight to ``x``.

    Wrap in :func:`detach` to substitute a constant without a gradient path.
    """
    value = tensor(value)

    def fwd(v):
        if v.shape != value.shape:
            raise ShapeError(f"overwrite: shapes {v.shape} and {value.shape} differ")
        return value

    return _make("overwrite", (x,), fwd, lambda g, v, out: (g,))


def mean(x: Node) -> Node:
    return _make(
        "mean", (x,), lambda v: np.full((1, 1), v.mean()), lambda g, v, out: (np.full_like(v, g.item() / v.size),)
    )


def total(xs: Sequence[Node], weights: Sequence[float]) -> Node:
    """Weighted sum of scalar nodes."""
    xs = list(xs)
    w = [float(c) for c in weights]

    def fwd(*vals):
        acc = np.zeros((1, 1), dtype=vals[0].dtype)
        for c, v in zip(w, vals):
            acc = acc + c * v
        return acc

    def bwd(g, *args):
        return tuple(c * g for c in w)

    return _make("add", xs, fwd, bwd)


_LOG_FLOOR = 1e-300


def cross_entropy(logits: Node, target: np.ndarray, mask: Optional[np.ndarray] = None) -> Node:
    """``-sum(target * log_softmax(logits))`` over a column; target is a distribution."""
    target = tensor(target, logits.value.dtype if logits.value is not None else np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(-1, 1)

    def fwd(v):
        if v.shape != target.shape:
            raise ShapeError(f"cross-entropy: shapes {v.shape} and {target.shape} differ")
        w = v if mask is None else np.where(mask, v, -np.inf)
        m = w.max(axis=0, keepdims=True)
        lse = m + np.log(np.exp(w - m).sum(axis=0, keepdims=True))
        logp = np.where(target > 0, w - lse, 0.0)
        return np.full((1, 1), -(target * logp).sum())

    def bwd(g, v, out):
        p = _softmax(v, mask)
        return (g.item() * (p * target.sum() - target),)

    return _make("cross-entropy", (logits,), fwd, bwd)


def bce_logits(logits: Node, target: np.ndarray) -> Node:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against ``target`` in [0, 1]."""
    target = tensor(target)

    def fwd(v):
        if v.shape != target.shape:
            raise ShapeError(f"binary-cross-entropy: shapes {v.shape} and {target.shape} differ")
        per = np.maximum(v, 0) - v * target + np.log1p(np.exp(-np.abs(v)))
        return np.full((1, 1), per.mean())

    return _make("binary-cross-entropy", (logits,), fwd, lambda g, v, out: (g.item() * (_sigmoid(v) - target) / v.size,))


def bce(prob: Node, target: np.ndarray, floor: float = 1e-12) -> Node:
    """Mean binary cross-entropy on probabilities (for parameter-free boolean ops)."""
    target = tensor(target)

    def fwd(p):
        q = np.clip(p, floor, 1.0 - floor)
        per = -(target * np.log(q) + (1 - target) * np.log(1 - q))
        return np.full((1, 1), per.mean())

    def bwd(g, p, out):
        q = np.clip(p, floor, 1.0 - floor)
        return (g.item() * (q - target) / (q * (1 - q)) / p.size,)

    return _make("binary-cross-entropy", (prob,), fwd, bwd)


# ---------------------------------------------------------------------------
# graph traversal


def topo_order(root: Node) -> List[Node]:
    order: List[Node] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def forward(root: Node) -> np.ndarray:
    """Re-evaluate every node under ``root`` from current bindings and parameters."""
    for node in topo_order(root):
        if node.op == "input" and node.value is None:
            raise UnboundInputError(f"input {node.name!r} is unbound")
        node.evaluate()
    return root.value


def backward(root: Node) -> None:
    """Accumulate d(root)/d(parameter) into each parameter's store."""
    if root.value is None:
        raise BackwardError("backward called before forward")
    if root.value.size != 1:
        raise BackwardError(f"backward needs a scalar root, got shape {root.value.shape}")
    order = topo_order(root)
    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op == "parameter":
            node.store.accumulate(node.name, g)
            continue
        if node.bwd is None or not node.inputs:
            continue
        parent_grads = node.bwd(g, *[p.value for p in node.inputs], node.value)
        for parent, pg in zip(node.inputs, parent_grads):
            if pg is None or parent.op == "input":
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


def parameters_in(root: Node) -> List[str]:
    names = []
    for node in topo_order(root):
        if node.op == "parameter" and node.name not in names:
            names.append(node.name)
    return names


# ---------------------------------------------------------------------------
# parameters and optimizers


@dataclass
class ParameterStore:
    seed: int = 0
    dtype: type = np.float64
    values: Dict[str, np.ndarray] = field(default_factory=dict)
    grads: Dict[str, np.ndarray] = field(default_factory=dict)
    moments: Dict[str, tuple] = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)

    def create(self, name: str, shape, init: str = "uniform") -> np.ndarray:
        if name in self.values:
            raise KeyError(f"parameter {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            arr = np.zeros(shape, dtype=self.dtype)
        elif init == "ones":
            arr = np.ones(shape, dtype=self.dtype)
        else:
            bound = 1.0 / np.sqrt(shape[1] if len(shape) > 1 else shape[0])
            arr = self._rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        self.values[name] = arr
        return arr

    def node(self, name: str) -> Node:
        node = Node("parameter", (), name=name, store=self)
        node.value = self.values[name]
        return node

    def accumulate(self, name: str, g: np.ndarray) -> None:
        prev = self.grads.get(name)
        self.grads[name] = g.copy() if prev is None else prev + g

    def zero_grad(self) -> None:
        self.grads.clear()

    def __contains__(self, name):
        return name in self.values

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(b"NMNP")
        buf.write(struct.pack("<II", 1, len(self.values)))
        for name in sorted(self.values):
            arr = self.values[name]
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def load(cls, path, dtype=np.float64) -> "ParameterStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), dtype=dtype)

    @classmethod
    def from_bytes(cls, data: bytes, dtype=np.float64) -> "ParameterStore":
        if data[:4] != b"NMNP":
            raise ValueError("bad magic: not a parameter checkpoint")
        version, count = struct.unpack_from("<II", data, 4)
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        store = cls(dtype=dtype)
        off = 12
        try:
            for _ in range(count):
                (n,) = struct.unpack_from("<I", data, off)
                off += 4
                name = data[off : off + n].decode("utf-8")
                off += n
                (rank,) = struct.unpack_from("<I", data, off)
                off += 4
                shape = struct.unpack_from(f"<{rank}I", data, off)
                off += 4 * rank
                size = int(np.prod(shape))
                if off + 8 * size > len(data):
                    raise ValueError("truncated checkpoint")
                arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape)
                off += 8 * size
                store.values[name] = arr.astype(dtype)
        except struct.error as exc:
            raise ValueError("truncated checkpoint") from exc
        return store


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(store: ParameterStore, config: OptimizerConfig) -> ParameterStore:
    """Apply one update from the accumulated gradients, then clear them."""
    if config.lr <= 0:
        raise ValueError(f"learning rate must be positive, got {config.lr}")
    store.step_count += 1
    t = store.step_count
    b1, b2 = config.betas
    for name, g in store.grads.items():
        theta = store.values[name]
        if config.kind == "sgd":
            theta -= config.lr * g
            continue
        m, v = store.moments.get(name, (np.zeros_like(theta), np.zeros_like(theta)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        store.moments[name] = (m, v)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta -= config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    store.zero_grad()
    return store


# ---------------------------------------------------------------------------
# finite-difference check


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: Optional[str]
    n_checked: int
    per_slot: Dict[str, float]
    n_skipped: int = 0

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def check_gradients(
    root: Node,
    store: Optional[ParameterStore] = None,
    h: float = 1e-6,
    floor: float = 1e-4,
    slots: Optional[Iterable[str]] = None,
    skip_nonsmooth: bool = False,
) -> GradCheckReport:
    """Compare analytic gradients with central differences for every parameter entry.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    near-zero entries from dividing by rounding noise.  With
    ``skip_nonsmooth`` an entry whose one-sided differences
    disagree (a relu kink inside the step) is skipped and counted instead.
    Detached values are held fixed while perturbing, so the numeric side
    sees the same gradient cut as the analytic side.
    """
    if store is None:
        stores = {n.store for n in topo_order(root) if n.op == "parameter"}
        store = stores.pop() if stores else ParameterStore()
    names = list(slots) if slots is not None else parameters_in(root)
    saved = dict(store.grads)
    store.zero_grad()
    forward(root)
    backward(root)
    analytic = {n: store.grads.get(n, np.zeros_like(store.values[n])).copy() for n in names}
    store.grads = saved

    order = topo_order(root)

    def fwd():
        for node in order:
            if node.op != "detach":
                node.evaluate()
        return root.value

    f0 = fwd().item()
    worst, worst_name, count, skipped, per_slot = 0.0, None, 0, 0, {}
    for name in names:
        theta = store.values[name]
        slot_err = 0.0
        for idx in np.ndindex(theta.shape):
            orig = theta[idx]
            theta[idx] = orig + h
            fp = fwd().item()
            theta[idx] = orig - h
            fm = fwd().item()
            theta[idx] = orig
            num = (fp - fm) / (2 * h)
            if skip_nonsmooth:
                right, left = (fp - f0) / h, (f0 - fm) / h
                if abs(right - left) > 0.1 * max(abs(right), abs(left), floor):
                    skipped += 1
                    continue
            a = analytic[name][idx]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            count += 1
            if err > slot_err:
                slot_err = err
            if err > worst:
                worst, worst_name = err, f"{name}{list(idx)}"
        per_slot[name] = slot_err
    forward(root)
    return GradCheckReport(worst, worst_name, count, per_slot, skipped)
