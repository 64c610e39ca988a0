"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Graphs are built eagerly (define-by-run): every operation on a :class:`Tensor`
returns a new node holding its forward value and a reference to the op that
produced it.  :func:`grad` walks the graph in reverse creation order, which is
a valid reverse topological order, so every node is visited exactly once.

:func:`deeplift_multipliers` reuses the same graph machinery to propagate
DeepLIFT multipliers between a graph evaluated at an input and a structurally
identical graph evaluated at a reference.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "as_tensor",
    "grad",
    "deeplift_multipliers",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "concat",
    "take_rows",
    "sum",
    "mean",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "reciprocal",
    "softmax",
    "log_softmax",
    "l2norm",
    "gradient_reversal",
]

# Below this input difference the Rescale rule uses the local derivative.
RESCALE_EPS = 1e-12

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the graph: non-scalar root, mismatched reference graph, ..."""


def _check_finite(value: np.ndarray, where: str) -> None:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite value produced by {where}")


class Tensor:
    """A node in the computation graph.

    Leaves are created directly; interior nodes come from the op functions in
    this module (or the operator overloads, which call them).
    """

    __slots__ = ("data", "requires_grad", "parents", "op", "uid")
    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _op=None):
        arr = np.asarray(data, dtype=np.float64)
        if _op is None:
            _check_finite(arr, "leaf construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = _parents
        self.op: _Op | None = _op
        self.uid = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        kind = self.op.name if self.op is not None else "leaf"
        return f"Tensor({kind}, shape={self.shape})"

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
        return mul(self, reciprocal(as_tensor(other)))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return _apply(_GetItem(index), self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class _Op:
    """Base op.

    ``kind`` selects the DeepLIFT rule:

    * ``linear``: multipliers propagate exactly like gradients.
    * ``bilinear``: products of two graph values; multipliers are the
      gradient evaluated at the midpoint of input and reference, which makes
      summation-to-delta exact.
    * ``unary``: elementwise nonlinearity, Rescale rule.
    * ``custom``: the op overrides :meth:`deeplift`.
    """

    name = "op"
    kind = "linear"

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, g: np.ndarray, out: np.ndarray, *xs: np.ndarray) -> tuple[np.ndarray, ...]:
        raise NotImplementedError

    def derivative(self, out: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Elementwise derivative, only for ``unary`` ops."""
        raise NotImplementedError

    def deeplift(self, g, out, out_ref, xs, xs_ref):
        if self.kind == "linear":
            return self.vjp(g, out, *xs)
        if self.kind == "bilinear":
            mid = [(a + b) * 0.5 for a, b in zip(xs, xs_ref)]
            return self.vjp(g, None, *mid)
        if self.kind == "unary":
            (x,), (r,) = xs, xs_ref
            dx = x - r
            small = np.abs(dx) < RESCALE_EPS
            safe = np.where(small, 1.0, dx)
            m = np.where(small, self.derivative(out, x), (out - out_ref) / safe)
            return (g * m,)
        raise NotImplementedError(f"no DeepLIFT rule for {self.name}")


def _apply(op: _Op, *parents: Tensor) -> Tensor:
    xs = [p.data for p in parents]
    try:
        out = op.forward(*xs)
    except ValueError as exc:
        shapes = ", ".join(str(x.shape) for x in xs)
        raise ShapeError(f"{op.name}: incompatible operand shapes {shapes}") from exc
    out = np.asarray(out, dtype=np.float64)
    _check_finite(out, op.name)
    return Tensor(out, any(p.requires_grad for p in parents), _parents=parents, _op=op)


# ----------------------------------------------------------------------------
# elementwise arithmetic


class _Add(_Op):
    name = "add"

    def forward(self, a, b):
        return a + b

    def vjp(self, g, out, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class _Sub(_Op):
    name = "sub"

    def forward(self, a, b):
        return a - b

    def vjp(self, g, out, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


class _Mul(_Op):
    name = "mul"
    kind = "bilinear"

    def forward(self, a, b):
        return a * b

    def vjp(self, g, out, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class _Scale(_Op):
    name = "scale"

    def __init__(self, c: float):
        self.c = c

    def forward(self, a):
        return a * self.c

    def vjp(self, g, out, a):
        return (g * self.c,)


def add(a, b) -> Tensor:
    return _apply(_Add(), as_tensor(a), as_tensor(b))


def sub(a, b) -> Tensor:
    return _apply(_Sub(), as_tensor(a), as_tensor(b))


def mul(a, b) -> Tensor:
    return _apply(_Mul(), as_tensor(a), as_tensor(b))


def scale(a, c: float) -> Tensor:
    """Multiply by a constant scalar (not part of the graph)."""
    return _apply(_Scale(float(c)), as_tensor(a))


# ----------------------------------------------------------------------------
# linear algebra and shape ops


class _MatMul(_Op):
    name = "matmul"
    kind = "bilinear"

    def forward(self, a, b):
        if a.ndim == 0 or b.ndim == 0:
            raise ValueError("matmul needs at least 1-d operands")
        return np.matmul(a, b)

    def vjp(self, g, out, a, b):
        a2 = a[None, :] if a.ndim == 1 else a
        b2 = b[:, None] if b.ndim == 1 else b
        g2 = g
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if b.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        ga = _unbroadcast(ga, a2.shape).reshape(a.shape)
        gb = _unbroadcast(gb, b2.shape).reshape(b.shape)
        return ga, gb


class _Transpose(_Op):
    name = "transpose"

    def __init__(self, axes):
        self.axes = None if axes is None else tuple(axes)

    def forward(self, a):
        return np.transpose(a, self.axes)

    def vjp(self, g, out, a):
        if self.axes is None:
            return (np.transpose(g),)
        return (np.transpose(g, np.argsort(self.axes)),)


class _Reshape(_Op):
    name = "reshape"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        return a.reshape(self.shape)

    def vjp(self, g, out, a):
        return (g.reshape(a.shape),)


class _BroadcastTo(_Op):
    name = "broadcast_to"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        return np.broadcast_to(a, self.shape).copy()

    def vjp(self, g, out, a):
        return (_unbroadcast(g, a.shape),)


class _Concat(_Op):
    name = "concat"

    def __init__(self, axis: int):
        self.axis = axis

    def forward(self, *xs):
        return np.concatenate(xs, axis=self.axis)

    def vjp(self, g, out, *xs):
        sizes = [x.shape[self.axis] for x in xs]
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=self.axis))


class _GetItem(_Op):
    name = "getitem"

    def __init__(self, index):
        self.index = index

    def forward(self, a):
        return np.array(a[self.index])

    def vjp(self, g, out, a):
        full = np.zeros_like(a)
        np.add.at(full, self.index, g)
        return (full,)


class _TakeRows(_Op):
    name = "take_rows"

    def __init__(self, ids: np.ndarray):
        self.ids = ids

    def forward(self, table):
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= table.shape[0]):
            raise IndexError(
                f"row id out of range [0, {table.shape[0]}): "
                f"min={self.ids.min()}, max={self.ids.max()}"
            )
        return table[self.ids]

    def vjp(self, g, out, table):
        full = np.zeros_like(table)
        np.add.at(full, self.ids, g)
        return (full,)


class _Sum(_Op):
    name = "sum"

    def __init__(self, axis, keepdims):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, a):
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def vjp(self, g, out, a):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, a.shape).copy(),)


class _Mean(_Sum):
    name = "mean"

    def forward(self, a):
        return np.mean(a, axis=self.axis, keepdims=self.keepdims)

    def vjp(self, g, out, a):
        (full,) = super().vjp(g, out, a)
        count = a.size if self.axis is None else np.prod(
            [a.shape[i] for i in np.atleast_1d(self.axis)]
        )
        return (full / count,)


def matmul(a, b) -> Tensor:
    """``np.matmul`` semantics, including broadcast batch dimensions."""
    return _apply(_MatMul(), as_tensor(a), as_tensor(b))


def transpose(a, axes=None) -> Tensor:
    return _apply(_Transpose(axes), as_tensor(a))


def reshape(a, shape) -> Tensor:
    return _apply(_Reshape(shape), as_tensor(a))


def broadcast_to(a, shape) -> Tensor:
    return _apply(_BroadcastTo(shape), as_tensor(a))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    return _apply(_Concat(axis), *[as_tensor(x) for x in xs])


def take_rows(table, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer id array."""
    return _apply(_TakeRows(np.asarray(ids, dtype=np.int64)), as_tensor(table))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    return _apply(_Sum(axis, keepdims), as_tensor(a))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return _apply(_Mean(axis, keepdims), as_tensor(a))


# ----------------------------------------------------------------------------
# elementwise nonlinearities


class _Unary(_Op):
    kind = "unary"

    def vjp(self, g, out, x):
        return (g * self.derivative(out, x),)


class _Relu(_Unary):
    name = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0)

    def derivative(self, out, x):
        return (x > 0).astype(np.float64)


class _Sigmoid(_Unary):
    name = "sigmoid"

    def forward(self, x):
        # split branches keep exp() from overflowing
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    def derivative(self, out, x):
        return out * (1.0 - out)


class _Tanh(_Unary):
    name = "tanh"

    def forward(self, x):
        return np.tanh(x)

    def derivative(self, out, x):
        return 1.0 - out * out


class _Exp(_Unary):
    name = "exp"

    def forward(self, x):
        return np.exp(x)

    def derivative(self, out, x):
        return out


class _Log(_Unary):
    name = "log"

    def forward(self, x):
        if (x <= 0).any():
            raise NonFiniteError("log of non-positive value")
        return np.log(x)

    def derivative(self, out, x):
        return 1.0 / x


class _Sqrt(_Unary):
    name = "sqrt"

    def forward(self, x):
        if (x < 0).any():
            raise NonFiniteError("sqrt of negative value")
        return np.sqrt(x)

    def derivative(self, out, x):
        if (out == 0).any():
            raise NonFiniteError("sqrt derivative at zero")
        return 0.5 / out


class _Reciprocal(_Unary):
    name = "reciprocal"

    def forward(self, x):
        if (x == 0).any():
            raise NonFiniteError("reciprocal of zero")
        return 1.0 / x

    def derivative(self, out, x):
        return -out * out


def relu(x) -> Tensor:
    return _apply(_Relu(), as_tensor(x))


def sigmoid(x) -> Tensor:
    return _apply(_Sigmoid(), as_tensor(x))


def tanh(x) -> Tensor:
    return _apply(_Tanh(), as_tensor(x))


def exp(x) -> Tensor:
    return _apply(_Exp(), as_tensor(x))


def log(x) -> Tensor:
    return _apply(_Log(), as_tensor(x))


def sqrt(x) -> Tensor:
    return _apply(_Sqrt(), as_tensor(x))


def reciprocal(x) -> Tensor:
    return _apply(_Reciprocal(), as_tensor(x))


# ----------------------------------------------------------------------------
# vector nonlinearities with composite DeepLIFT rules


def _rescale(d_out, d_in, fallback):
    small = np.abs(d_in) < RESCALE_EPS
    return np.where(small, fallback, d_out / np.where(small, 1.0, d_in))


def _shifted_lse(x, shift, axis):
    top = x.max(axis=axis, keepdims=True)
    return top - shift + np.log(np.exp(x - top).sum(axis=axis, keepdims=True))


class _Softmax(_Op):
    name = "softmax"
    kind = "custom"

    def __init__(self, axis: int):
        self.axis = axis

    def forward(self, x):
        z = np.exp(x - x.max(axis=self.axis, keepdims=True))
        return z / z.sum(axis=self.axis, keepdims=True)

    def vjp(self, g, out, x):
        dot = (g * out).sum(axis=self.axis, keepdims=True)
        return (out * (g - dot),)

    def deeplift(self, g, out, out_ref, xs, xs_ref):
        # softmax = exp(x - lse(x)); lse(x) = log(sum(e)) with e = exp(x - shift).
        # Each stage takes the Rescale rule, so the chain sums to delta exactly, and
        # working in log space keeps far-apart inputs and references finite.
        (x,), (r,) = xs, xs_ref
        ax = self.axis
        shift = np.maximum(x.max(axis=ax, keepdims=True), r.max(axis=ax, keepdims=True))
        e, e_r = np.exp(x - shift), np.exp(r - shift)
        s, s_r = e.sum(axis=ax, keepdims=True), e_r.sum(axis=ax, keepdims=True)
        lse, lse_r = _shifted_lse(x, shift, ax), _shifted_lse(r, shift, ax)
        u, u_r = x - shift - lse, r - shift - lse_r
        m_p = _rescale(out - out_ref, u - u_r, out)
        m_e = _rescale(e - e_r, x - r, e)
        m_log = _rescale(lse - lse_r, s - s_r, 2.0 / (s + s_r))
        g_p = g * m_p
        return (g_p - g_p.sum(axis=ax, keepdims=True) * m_log * m_e,)


class _LogSoftmax(_Op):
    name = "log_softmax"
    kind = "custom"

    def __init__(self, axis: int):
        self.axis = axis

    def forward(self, x):
        shifted = x - x.max(axis=self.axis, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=self.axis, keepdims=True))

    def vjp(self, g, out, x):
        p = np.exp(out)
        return (g - p * g.sum(axis=self.axis, keepdims=True),)


class _L2Norm(_Op):
    name = "l2norm"
    kind = "custom"

    def __init__(self, axis: int, keepdims: bool):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, x):
        return np.sqrt((x * x).sum(axis=self.axis, keepdims=self.keepdims))

    def _expand(self, a):
        return a if self.keepdims else np.expand_dims(a, self.axis)

    def vjp(self, g, out, x):
        out_k = self._expand(out)
        if (out_k == 0).any():
            raise NonFiniteError("l2norm gradient at the zero vector")
        return (self._expand(g) * x / out_k,)

    def deeplift(self, g, out, out_ref, xs, xs_ref):
        (x,), (r,) = xs, xs_ref
        n, n_r = self._expand(out), self._expand(out_ref)
        sq = (x * x).sum(axis=self.axis, keepdims=True)
        sq_r = (r * r).sum(axis=self.axis, keepdims=True)
        with np.errstate(divide="ignore"):
            fallback = np.where(n > 0, 0.5 / np.where(n > 0, n, 1.0), 0.0)
        m_sqrt = _rescale(n - n_r, sq - sq_r, fallback)
        # square is Rescale-exact: (x^2 - r^2) / (x - r) = x + r
        return (self._expand(g) * m_sqrt * (x + r),)


def softmax(x, axis: int = -1) -> Tensor:
    return _apply(_Softmax(axis), as_tensor(x))


def log_softmax(x, axis: int = -1) -> Tensor:
    return _apply(_LogSoftmax(axis), as_tensor(x))


def l2norm(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    return _apply(_L2Norm(axis, keepdims), as_tensor(x))


# ----------------------------------------------------------------------------
# gradient reversal


class _GradientReversal(_Op):
    name = "gradient_reversal"

    def __init__(self, lam: float):
        self.lam = lam

    def forward(self, x):
        return x

    def vjp(self, g, out, x):
        return (-self.lam * g,)

    def deeplift(self, g, out, out_ref, xs, xs_ref):
        # the forward map is the identity, so differences pass through unchanged
        return (g,)


def gradient_reversal(x, lam: float = 1.0) -> Tensor:
    """Identity on the forward pass; scales incoming gradients by ``-lam``."""
    if not lam > 0:
        raise ValueError(f"gradient reversal strength must be > 0, got {lam}")
    return _apply(_GradientReversal(float(lam)), as_tensor(x))


# ----------------------------------------------------------------------------
# graph traversal


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.uid in seen:
            continue
        seen[node.uid] = node
        stack.extend(node.parents)
    # creation order is topological; reverse it for the backward sweep
    return sorted(seen.values(), key=lambda t: t.uid, reverse=True)


def _scalar_root(output: Tensor) -> None:
    if not isinstance(output, Tensor):
        raise GraphError("output must be a Tensor produced by a forward pass")
    if output.data.size != 1:
        raise GraphError(f"backward needs a scalar output, got shape {output.shape}")


def grad(output: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``output`` with respect to each of ``inputs``.

    Accumulation happens in a dict local to this call, so graphs that share
    parameter leaves can be differentiated concurrently.
    """
    _scalar_root(output)
    for t in inputs:
        if not t.requires_grad:
            raise GraphError(f"{t!r} does not require grad")
    grads: dict[int, np.ndarray] = {output.uid: np.ones_like(output.data)}
    wanted = {t.uid for t in inputs}
    done: dict[int, np.ndarray] = {}
    for node in _reachable(output):
        if node.op is None:
            continue
        g = grads.pop(node.uid, None)
        if g is None:
            continue
        if node.uid in wanted:
            done[node.uid] = g
        parent_grads = node.op.vjp(g, node.data, *[p.data for p in node.parents])
        for parent, pg in zip(node.parents, parent_grads):
            if not parent.requires_grad:
                continue
            if parent.uid in grads:
                grads[parent.uid] = grads[parent.uid] + pg
            else:
                grads[parent.uid] = pg
    done.update((k, v) for k, v in grads.items() if k in wanted)
    return [done.get(t.uid, np.zeros_like(t.data)) for t in inputs]


def _pair_graphs(output: Tensor, output_ref: Tensor) -> dict[int, Tensor]:
    """Match every node under ``output`` with its twin under ``output_ref``."""
    pair: dict[int, Tensor] = {}
    stack = [(output, output_ref)]
    while stack:
        node, ref = stack.pop()
        known = pair.get(node.uid)
        if known is not None:
            if known is not ref:
                raise GraphError(f"{node!r} pairs with two different reference nodes")
            continue
        same_op = (node.op is None) == (ref.op is None) and (
            node.op is None or node.op.name == ref.op.name
        )
        if not same_op or node.shape != ref.shape or len(node.parents) != len(ref.parents):
            raise GraphError(f"reference graph does not mirror input graph at {node!r} vs {ref!r}")
        pair[node.uid] = ref
        stack.extend(zip(node.parents, ref.parents))
    return pair


def deeplift_multipliers(
    output: Tensor,
    output_ref: Tensor,
    inputs: Sequence[Tensor],
    inputs_ref: Sequence[Tensor],
) -> list[np.ndarray]:
    """DeepLIFT (Rescale rule) multipliers of ``output`` w.r.t. ``inputs``.

    ``output_ref`` must come from the same code path evaluated on
    ``inputs_ref``; nodes of the two graphs are paired structurally, starting
    from the roots.  Attributions are ``m * (x - x_ref)`` and sum to
    ``output - output_ref``.
    """
    _scalar_root(output)
    _scalar_root(output_ref)
    pair = _pair_graphs(output, output_ref)
    for x, r in zip(inputs, inputs_ref):
        if x.uid in pair and pair[x.uid] is not r:
            raise GraphError(f"{x!r} is not paired with its reference input")

    mults: dict[int, np.ndarray] = {output.uid: np.ones_like(output.data)}
    wanted = {t.uid for t in inputs}
    done: dict[int, np.ndarray] = {}
    for node in _reachable(output):
        if node.op is None:
            continue
        g = mults.pop(node.uid, None)
        if g is None:
            continue
        if node.uid in wanted:
            done[node.uid] = g
        ref = pair[node.uid]
        parent_m = node.op.deeplift(
            g,
            node.data,
            ref.data,
            [p.data for p in node.parents],
            [p.data for p in ref.parents],
        )
        for parent, pm in zip(node.parents, parent_m):
            if parent.uid in mults:
                mults[parent.uid] = mults[parent.uid] + pm
            else:
                mults[parent.uid] = pm
    done.update((k, v) for k, v in mults.items() if k in wanted)
    return [done.get(t.uid, np.zeros_like(t.data)) for t in inputs]
