"""Reverse-mode automatic differentiation over dense numpy-backed tensors.

The engine is tape-based: primitives compute eagerly with numpy and append a
node (op name, parent tensors, backward closure) to the active :class:`Tape`.
``backward()`` walks the tape in strict reverse insertion order, which is a
valid topological order because an op can only consume tensors that already
exist.

Storage is row-major and dense. float32 is the training dtype; building the
same graph from float64 leaves runs the whole computation at float64, which
is what :func:`grad_check` relies on (central differences are too noisy at
float32).

Gradients accumulate into trainable leaf tensors until :func:`zero_grads`;
intermediate gradients live only inside a single ``backward()`` call, so two
consecutive calls double a parameter's gradient rather than tripling it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, EmptyInputError, InvalidShapeError, NumericsError

DEFAULT_DTYPE = np.float32


class Tensor:
    """A dense n-dimensional value with optional gradient and graph linkage.

    ``trainable`` marks leaf tensors that should receive gradient; leaves
    with ``trainable=False`` (inputs, constants) never accumulate gradient.
    Tensors produced by primitives are non-leaf and carry a reference to the
    tape they were recorded on.
    """

    __slots__ = ("data", "grad", "trainable", "is_leaf", "needs_grad", "_tape")

    def __init__(self, data, dtype=None, trainable=False):
        if dtype is None:
            # Keep float64 only when handed an explicit float64 array; lists
            # and other dtypes default to the training dtype.
            if isinstance(data, np.ndarray) and data.dtype == np.float64:
                dtype = np.float64
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.trainable = bool(trainable)
        self.is_leaf = True
        self.needs_grad = self.trainable
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, trainable={self.trainable})"

    # Small operator sugar; the function forms below are the primary API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return smul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    op: str
    out: Tensor
    parents: tuple
    backward_fn: object  # callable(grad ndarray) -> tuple of ndarray | None


@dataclass
class Tape:
    """Append-only record of primitive applications.

    Node parents always precede the node, so reverse insertion order is a
    valid reverse-topological traversal. Use as a context manager; ops only
    record while a tape is active.
    """

    check_finite: bool = False
    nodes: list = field(default_factory=list)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK: list = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class no_grad:
    """Context that suppresses recording (pure inference)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


def record(op: str, out_data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    """Wrap an op result and register its backward closure on the active tape.

    This is the extension hook custom primitives (e.g. batchnorm) use; every
    built-in primitive goes through it too.
    """
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.trainable = False
    out.is_leaf = False
    out.needs_grad = any(p.needs_grad for p in parents)
    out._tape = None
    tape = _active_tape()
    if tape is not None:
        if tape.check_finite and not np.all(np.isfinite(out_data)):
            raise NumericsError(f"non-finite values produced by primitive '{op}'")
        # Stamp the tape even when nothing upstream is trainable, so backward
        # on a fully-frozen graph is a valid no-op rather than a misuse error.
        out._tape = tape
        if out.needs_grad:
            tape.nodes.append(_Node(op, out, parents, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every trainable ancestor's ``grad``.

    ``loss`` must be a scalar recorded on the active tape. Intermediate
    gradients are kept in a per-call map, so repeated calls re-propagate a
    unit seed each time (gradients on parameters add up).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = _active_tape()
    if tape is None or loss._tape is not tape:
        raise ContractError("backward requires a loss produced on the active tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        contribs = node.backward_fn(g)
        if tape.check_finite:
            for c in contribs:
                if c is not None and not np.all(np.isfinite(c)):
                    raise NumericsError(f"non-finite gradient produced by primitive '{node.op}'")
        for p, c in zip(node.parents, contribs):
            if c is None or not p.needs_grad:
                continue
            if p.is_leaf:
                if p.trainable:
                    p.grad = c.copy() if p.grad is None else p.grad + c
            else:
                k = id(p)
                grads[k] = c if k not in grads else grads[k] + c


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Elementwise and shape primitives
# ---------------------------------------------------------------------------


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise InvalidShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def smul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("smul", a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0)
    mask = a.data > 0
    return record("relu", y, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp for large |x|.
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.data.shape, a.data.dtype
    return record(
        "sum", np.asarray(a.data.sum(), dtype=dtype), (a,),
        lambda g: (np.full(shape, g, dtype=dtype),),
    )


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise EmptyInputError("mean of an empty tensor")
    shape, dtype = a.data.shape, a.data.dtype
    return record(
        "mean", np.asarray(a.data.mean(), dtype=dtype), (a,),
        lambda g: (np.full(shape, g / n, dtype=dtype),),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise InvalidShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    ad, bd = a.data, b.data
    return record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise InvalidShapeError(f"transpose: expected 2-d tensor, got shape {a.data.shape}")
    return record("transpose", np.ascontiguousarray(a.data.T), (a,),
                  lambda g: (np.ascontiguousarray(g.T),))


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise EmptyInputError("concat of zero tensors")
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(sizes)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(outs)

    return record("concat", out, tuple(tensors), backward_fn)


def _narrow(a: Tensor, axis: int, start: int, size: int) -> Tensor:
    shape = a.data.shape
    sl = [slice(None)] * len(shape)
    sl[axis] = slice(start, start + size)
    sl = tuple(sl)
    out = np.ascontiguousarray(a.data[sl])

    def backward_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[sl] = g
        return (full,)

    return record("split", out, (a,), backward_fn)


def split(a: Tensor, sizes, axis: int):
    """Partition ``a`` along ``axis`` into consecutive blocks of the given sizes."""
    if sum(sizes) != a.data.shape[axis]:
        raise InvalidShapeError(
            f"split: sizes {list(sizes)} do not cover extent {a.data.shape[axis]} on axis {axis}")
    parts, start = [], 0
    for s in sizes:
        parts.append(_narrow(a, axis, start, s))
        start += s
    return tuple(parts)


def broadcast_repeat(a: Tensor, axis: int, n: int) -> Tensor:
    if a.data.shape[axis] != 1:
        raise InvalidShapeError(
            f"broadcast_repeat: axis {axis} of shape {a.data.shape} must have extent 1")
    out = np.repeat(a.data, n, axis=axis)
    return record("broadcast_repeat", out, (a,),
                  lambda g: (g.sum(axis=axis, keepdims=True),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if x.shape[axis] < 1:
        raise EmptyInputError("softmax along an empty axis")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return record("softmax", y, (a,), backward_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward_fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", y, (a,), backward_fn)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on raw logits, stable at any magnitude."""
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.data.shape:
        raise InvalidShapeError(
            f"bce_with_logits: target shape {t.shape} vs logits {logits.data.shape}")
    z = logits.data
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def backward_fn(g):
        s = 1.0 / (1.0 + np.exp(-np.clip(z, -60, 60)))
        return (g * (s - t),)

    return record("bce_with_logits", out, (logits,), backward_fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Column t of the result is table row ids[t]; backward scatter-adds."""
    from .errors import VocabularyError

    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise EmptyInputError(f"embedding: ids must be a non-empty sequence, got shape {ids.shape}")
    v = table.data.shape[0]
    if (ids < 0).any() or (ids >= v).any():
        bad = int(ids[(ids < 0) | (ids >= v)][0])
        raise VocabularyError(f"token id {bad} outside vocabulary of size {v}")
    out = np.ascontiguousarray(table.data[ids].T)

    def backward_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g.T)
        return (gt,)

    return record("embedding", out, (table,), backward_fn)


def conv1d_same(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    """Strided 1-d convolution with 'same' zero padding.

    x: (c_in, T), w: (c_out, c_in, k) with k odd, b: (c_out,).
    T_out = ceil(T / stride); total padding max((T_out-1)*stride + k - T, 0)
    with the smaller half on the left, so the ceil-length law holds for any
    stride (this is what makes the conv stack's downsampling arithmetic exact).
    """
    if x.data.ndim != 2:
        raise InvalidShapeError(f"conv1d_same: input must be (c_in, T), got {x.data.shape}")
    c_in, t_in = x.data.shape
    if t_in == 0:
        raise EmptyInputError("conv1d_same: empty time axis")
    if w.data.ndim != 3 or w.data.shape[1] != c_in:
        raise InvalidShapeError(
            f"conv1d_same: weight {w.data.shape} does not match input channels {c_in}")
    c_out, _, k = w.data.shape
    if k % 2 != 1:
        raise InvalidShapeError(f"conv1d_same: kernel size {k} must be odd")
    if stride < 1:
        raise InvalidShapeError(f"conv1d_same: stride {stride} must be >= 1")
    if b.data.shape != (c_out,):
        raise InvalidShapeError(f"conv1d_same: bias {b.data.shape} vs c_out {c_out}")

    t_out = -(-t_in // stride)
    pad_total = max((t_out - 1) * stride + k - t_in, 0)
    left = pad_total // 2
    right = pad_total - left
    xp = np.pad(x.data, ((0, 0), (left, right)))
    reach = (t_out - 1) * stride + 1

    patches = np.empty((c_in, k, t_out), dtype=x.data.dtype)
    for j in range(k):
        patches[:, j, :] = xp[:, j:j + reach:stride]
    pm = patches.reshape(c_in * k, t_out)
    wm = w.data.reshape(c_out, c_in * k)
    out = wm @ pm + b.data[:, None]

    def backward_fn(g):
        gw = (g @ pm.T).reshape(w.data.shape)
        gb = g.sum(axis=1)
        gp = (wm.T @ g).reshape(c_in, k, t_out)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j:j + reach:stride] += gp[:, j, :]
        gx = gxp[:, left:left + t_in]
        return (np.ascontiguousarray(gx), gw, gb)

    return record("conv1d_same", out, (x, w, b), backward_fn)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    ok: bool


@dataclass
class GradCheckReport:
    entries: list
    threshold: float

    @property
    def passed(self) -> bool:
        return all(e.ok for e in self.entries)

    @property
    def worst(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def failures(self):
        return [e for e in self.entries if not e.ok]

    def __str__(self):
        lines = [f"{'ok' if e.ok else 'FAIL':4s} {e.name:50s} max rel err {e.max_rel_err:.3e}"
                 for e in self.entries]
        return "\n".join(lines)


def grad_check(f, params: dict, eps: float = 1e-5, threshold: float = 1e-4,
               max_entries: int = 64, rng=None) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central finite differences.

    ``f`` must be a deterministic closure over the float64 tensors in
    ``params`` returning a scalar Tensor. Tensors larger than ``max_entries``
    are spot-checked on a deterministic random subset of entries; smaller ones
    exhaustively. The relative-error denominator is floored at 1e-6 so entries
    whose true gradient sits at the finite-difference noise floor do not
    produce spurious failures.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ContractError(f"grad_check requires float64 parameters ({name} is {p.data.dtype})")

    zero_grads(params.values())
    with Tape(check_finite=True):
        loss = f()
        backward(loss)

    def eval_loss():
        with no_grad():
            return f().item()

    entries = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_entries:
            idx = np.arange(n)
        else:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        analytic = (np.zeros_like(p.data) if p.grad is None else p.grad).reshape(-1)
        worst = 0.0
        for i in idx:
            keep = flat[i]
            flat[i] = keep + eps
            up = eval_loss()
            flat[i] = keep - eps
            down = eval_loss()
            flat[i] = keep
            numeric = (up - down) / (2.0 * eps)
            denom = max(abs(analytic[i]), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
        entries.append(GradCheckEntry(name, worst, worst < threshold))
    return GradCheckReport(entries, threshold)
