"""Reverse-mode automatic differentiation on dense float64 arrays.

Every operation builds `Node` objects linked by parent references and
recorded, in creation order, on the active `Tape`. Backward rules are
themselves written in terms of these operations, so gradients are ordinary
node graphs and can be differentiated again; `hvp` exploits this to compute
Hessian-vector products by double backward.

The same op functions accept plain numpy arrays and then evaluate eagerly
without recording. Library code uses this to run the identical arithmetic
with or without a tape, which keeps taped and untaped forward passes
bit-identical.
"""

from __future__ import annotations

import threading
from typing import Callable

import numpy as np

Array = np.ndarray

_STACK = threading.local()


def as_tensor(x) -> Array:
    """Coerce to a float64 ndarray (scalars become shape-() arrays)."""
    arr = np.asarray(x, dtype=np.float64)
    return arr


def _check_finite(name: str, value: Array) -> None:
    if not np.all(np.isfinite(value)):
        raise ValueError(f"{name}: non-finite values are not allowed")


def _active_tape():
    stack = getattr(_STACK, "stack", None)
    return stack[-1] if stack else None


class Node:
    """One value in a differentiable computation.

    `parents` are the nodes this value was computed from, `_fw` recomputes
    the value from parent values (used by tape replay), and `_vjp` maps an
    adjoint node to one adjoint contribution per parent. Leaves (inputs and
    constants) have no parents and no recompute rule.
    """

    __slots__ = ("value", "parents", "op", "_fw", "_vjp")
    __array_ufunc__ = None  # keep numpy from hijacking reflected operators

    def __init__(self, value: Array, parents: tuple = (), op: str = "const",
                 fw: Callable | None = None):
        self.value = value
        self.parents = parents
        self.op = op
        self._fw = fw
        self._vjp = None
        tape = _active_tape()
        if tape is not None:
            tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Ordered record of one computation: every node, parents first.

    Entering the tape as a context manager routes node creation here; the
    same tape may be re-entered later to append more nodes (a utility head,
    a backward pass) on top of an existing forward.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}
        self.outputs: dict[str, Node] = {}

    def input(self, name: str, value) -> Node:
        value = as_tensor(value)
        _check_finite(f"input '{name}'", value)
        with self:
            node = Node(value, (), "input")
        self.inputs[name] = node
        return node

    def __enter__(self):
        stack = getattr(_STACK, "stack", None)
        if stack is None:
            stack = _STACK.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _STACK.stack.pop()
        return False

    def replay(self) -> bool:
        """Recompute every node from its parents; True iff all values match
        the stored ones bit for bit."""
        fresh: dict[int, Array] = {}
        for node in self.nodes:
            if node._fw is None:
                fresh[id(node)] = node.value
                continue
            parent_vals = [fresh.get(id(p), p.value) for p in node.parents]
            value = node._fw(*parent_vals)
            if value.shape != node.value.shape or value.tobytes() != node.value.tobytes():
                return False
            fresh[id(node)] = value
        return True


def _as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return Node(as_tensor(x), (), "const")


def _value(x) -> Array:
    return x.value if isinstance(x, Node) else as_tensor(x)


def _any_node(*args) -> bool:
    return any(isinstance(a, Node) for a in args)


def _broadcast_shape(op: str, a_shape, b_shape):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a_shape} and {b_shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g, shape):
    """Sum an adjoint back down to `shape` (inverse of numpy broadcasting)."""
    g_shape = g.shape if isinstance(g, Node) else g.shape
    if g_shape == shape:
        return g
    extra = len(g_shape) - len(shape)
    if extra > 0:
        g = sum(g, axis=tuple(range(extra)))
        g_shape = g.shape
    axes = tuple(i for i, (gs, s) in enumerate(zip(g_shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = sum(g, axis=axes, keepdims=True)
    return g


def add(a, b):
    def fw(av, bv):
        _broadcast_shape("add", av.shape, bv.shape)
        return av + bv

    if not _any_node(a, b):
        return fw(as_tensor(a), as_tensor(b))
    a, b = _as_node(a), _as_node(b)
    out = Node(fw(a.value, b.value), (a, b), "add", fw)
    out._vjp = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    return out


def sub(a, b):
    def fw(av, bv):
        _broadcast_shape("sub", av.shape, bv.shape)
        return av - bv

    if not _any_node(a, b):
        return fw(as_tensor(a), as_tensor(b))
    a, b = _as_node(a), _as_node(b)
    out = Node(fw(a.value, b.value), (a, b), "sub", fw)
    out._vjp = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape))
    return out


def neg(x):
    if not isinstance(x, Node):
        return -as_tensor(x)
    out = Node(-x.value, (x,), "neg", lambda xv: -xv)
    out._vjp = lambda g: (neg(g),)
    return out


def mul(a, b):
    def fw(av, bv):
        _broadcast_shape("mul", av.shape, bv.shape)
        return av * bv

    if not _any_node(a, b):
        return fw(as_tensor(a), as_tensor(b))
    a, b = _as_node(a), _as_node(b)
    out = Node(fw(a.value, b.value), (a, b), "mul", fw)
    out._vjp = lambda g: (_unbroadcast(mul(g, b), a.shape),
                          _unbroadcast(mul(g, a), b.shape))
    return out


def reciprocal(x):
    def fw(xv):
        if np.any(xv == 0.0):
            raise ValueError("reciprocal: zero input")
        return 1.0 / xv

    if not isinstance(x, Node):
        return fw(as_tensor(x))
    out = Node(fw(x.value), (x,), "reciprocal", fw)
    out._vjp = lambda g: (neg(mul(g, mul(out, out))),)
    return out


def divide(a, b):
    return mul(a, reciprocal(b))


def matmul(a, b):
    def fw(av, bv):
        if av.ndim == 0 or bv.ndim == 0 or av.ndim > 2 or bv.ndim > 2:
            raise ValueError(f"matmul: unsupported ranks {av.ndim} @ {bv.ndim}")
        if av.shape[-1] != bv.shape[0]:
            raise ValueError(f"matmul: shapes {av.shape} @ {bv.shape} do not align")
        return np.matmul(av, bv)

    if not _any_node(a, b):
        return fw(as_tensor(a), as_tensor(b))
    a, b = _as_node(a), _as_node(b)
    out = Node(fw(a.value, b.value), (a, b), "matmul", fw)
    na, nb = a.ndim, b.ndim

    def vjp(g):
        if na == 2 and nb == 2:
            return matmul(g, transpose(b)), matmul(transpose(a), g)
        if na == 2 and nb == 1:
            m, k = a.shape
            return (mul(reshape(g, (m, 1)), reshape(b, (1, k))),
                    matmul(transpose(a), g))
        if na == 1 and nb == 2:
            k, n = b.shape
            return (matmul(b, g),
                    mul(reshape(a, (k, 1)), reshape(g, (1, n))))
        return mul(g, b), mul(g, a)  # 1-D dot

    out._vjp = vjp
    return out


def exp(x):
    def fw(xv):
        with np.errstate(over="ignore"):
            value = np.exp(xv)
        if not np.all(np.isfinite(value)):
            raise ValueError("exp: overflow")
        return value

    if not isinstance(x, Node):
        return fw(as_tensor(x))
    out = Node(fw(x.value), (x,), "exp", fw)
    out._vjp = lambda g: (mul(g, out),)
    return out


def log(x):
    def fw(xv):
        if np.any(xv <= 0.0):
            raise ValueError("log: input must be positive")
        return np.log(xv)

    if not isinstance(x, Node):
        return fw(as_tensor(x))
    out = Node(fw(x.value), (x,), "log", fw)
    out._vjp = lambda g: (mul(g, reciprocal(x)),)
    return out


def _sigmoid_fw(xv):
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    if not isinstance(x, Node):
        return _sigmoid_fw(as_tensor(x))
    out = Node(_sigmoid_fw(x.value), (x,), "sigmoid", _sigmoid_fw)
    out._vjp = lambda g: (mul(g, mul(out, sub(1.0, out))),)
    return out


def tanh(x):
    if not isinstance(x, Node):
        return np.tanh(as_tensor(x))
    out = Node(np.tanh(x.value), (x,), "tanh", np.tanh)
    out._vjp = lambda g: (mul(g, sub(1.0, mul(out, out))),)
    return out


def softplus(x):
    def fw(xv):
        return np.logaddexp(0.0, xv)

    if not isinstance(x, Node):
        return fw(as_tensor(x))
    out = Node(fw(x.value), (x,), "softplus", fw)
    out._vjp = lambda g: (mul(g, sigmoid(x)),)
    return out


def relu(x):
    def fw(xv):
        return np.maximum(xv, 0.0)

    if not isinstance(x, Node):
        return fw(as_tensor(x))
    out = Node(fw(x.value), (x,), "relu", fw)
    # Mask frozen at forward time; the subgradient at exactly 0 is 0, and the
    # mask contributes no second derivative.
    mask = (x.value > 0.0).astype(np.float64)
    out._vjp = lambda g: (mul(g, mask),)
    return out


def silu(x):
    return mul(x, sigmoid(x))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - numpy-style name on purpose
    xv = _value(x)
    if axis is None:
        axes = tuple(range(xv.ndim))
    elif isinstance(axis, int):
        axes = (axis % xv.ndim,)
    else:
        axes = tuple(a % xv.ndim for a in axis)
    kd_shape = tuple(1 if i in axes else s for i, s in enumerate(xv.shape))

    def fw(v):
        return np.sum(v, axis=axes, keepdims=keepdims)

    if not isinstance(x, Node):
        return fw(xv)
    out = Node(fw(x.value), (x,), "sum", fw)
    src_shape = x.shape
    out._vjp = lambda g: (broadcast_to(reshape(g, kd_shape), src_shape),)
    return out


def mean(x, axis=None, keepdims=False):
    xv_shape = _value(x).shape
    if axis is None:
        count = int(np.prod(xv_shape)) if xv_shape else 1
    elif isinstance(axis, int):
        count = xv_shape[axis % len(xv_shape)]
    else:
        count = 1
        for a in axis:
            count *= xv_shape[a % len(xv_shape)]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    shape = tuple(shape)

    def fw(xv):
        if int(np.prod(xv.shape)) != int(np.prod(shape)):
            raise ValueError(f"reshape: cannot reshape {xv.shape} to {shape}")
        return np.reshape(xv, shape)

    if not isinstance(x, Node):
        return fw(as_tensor(x))
    if x.shape == shape:
        return x
    out = Node(fw(x.value), (x,), "reshape", fw)
    src_shape = x.shape
    out._vjp = lambda g: (reshape(g, src_shape),)
    return out


def transpose(x, axes=None):
    def fw(xv):
        return np.ascontiguousarray(np.transpose(xv, axes))

    if not isinstance(x, Node):
        return fw(as_tensor(x))
    out = Node(fw(x.value), (x,), "transpose", fw)
    inv = None if axes is None else tuple(np.argsort(axes))
    out._vjp = lambda g: (transpose(g, inv),)
    return out


def broadcast_to(x, shape):
    shape = tuple(shape)

    def fw(xv):
        _broadcast_shape("broadcast_to", xv.shape, shape)
        return np.ascontiguousarray(np.broadcast_to(xv, shape))

    if not isinstance(x, Node):
        return fw(as_tensor(x))
    if x.shape == shape:
        return x
    out = Node(fw(x.value), (x,), "broadcast_to", fw)
    src_shape = x.shape
    out._vjp = lambda g: (_unbroadcast(g, src_shape),)
    return out


def gather(x, indices):
    idx = np.asarray(indices, dtype=np.int64)
    xv = _value(x)
    size = xv.size
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ValueError(f"gather: index out of range for size {size}")

    def fw(v):
        return v.reshape(-1)[idx]

    if not isinstance(x, Node):
        return fw(xv)
    out = Node(fw(x.value), (x,), "gather", fw)
    src_shape = x.shape
    out._vjp = lambda g: (reshape(scatter_add(g, idx, size), src_shape),)
    return out


def scatter_add(src, indices, size):
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ValueError(f"scatter_add: index out of range for size {size}")

    def fw(sv):
        if sv.shape != idx.shape:
            raise ValueError(f"scatter_add: source shape {sv.shape} != index shape {idx.shape}")
        out = np.zeros(size, dtype=np.float64)
        np.add.at(out, idx.reshape(-1), sv.reshape(-1))
        return out

    if not isinstance(src, Node):
        return fw(as_tensor(src))
    out = Node(fw(src.value), (src,), "scatter_add", fw)
    out._vjp = lambda g: (gather(g, idx),)
    return out


def index(x, i):
    """Scalar element x.flat[i]."""
    return gather(x, np.asarray(int(i), dtype=np.int64))


def pad2d(x, pads):
    pt, pb, pl, pr = (int(p) for p in pads)
    if min(pt, pb, pl, pr) < 0:
        raise ValueError("pad2d: negative padding")

    def fw(xv):
        if xv.ndim != 3:
            raise ValueError(f"pad2d: expected a (channels, h, w) array, got shape {xv.shape}")
        return np.pad(xv, ((0, 0), (pt, pb), (pl, pr)))

    if not isinstance(x, Node):
        return fw(as_tensor(x))
    out = Node(fw(x.value), (x,), "pad2d", fw)
    _, h, w = x.shape
    out._vjp = lambda g: (slice2d(g, pt, h, pl, w),)
    return out


def slice2d(x, row0, height, col0, width):
    row0, height, col0, width = int(row0), int(height), int(col0), int(width)

    def fw(xv):
        if xv.ndim != 3:
            raise ValueError(f"slice2d: expected a (channels, h, w) array, got shape {xv.shape}")
        if row0 < 0 or col0 < 0 or row0 + height > xv.shape[1] or col0 + width > xv.shape[2]:
            raise ValueError(f"slice2d: window out of bounds for shape {xv.shape}")
        return np.ascontiguousarray(xv[:, row0:row0 + height, col0:col0 + width])

    if not isinstance(x, Node):
        return fw(as_tensor(x))
    out = Node(fw(x.value), (x,), "slice2d", fw)
    _, h, w = x.shape
    out._vjp = lambda g: (pad2d(g, (row0, h - row0 - height, col0, w - col0 - width)),)
    return out


# ---------------------------------------------------------------------------
# composites


def softmax(x):
    """Softmax of a 1-D vector, max-subtracted for stability.

    The subtracted max is detached; softmax is shift-invariant, so this
    changes neither the value nor any derivative.
    """
    xv = _value(x)
    if xv.ndim != 1:
        raise ValueError(f"softmax: expected a 1-D vector, got shape {xv.shape}")
    e = exp(sub(x, float(xv.max())))
    return mul(e, reciprocal(sum(e)))


def logsumexp(x):
    """log(sum(exp(x))) of a 1-D vector via the shifted, overflow-free form."""
    xv = _value(x)
    if xv.ndim != 1:
        raise ValueError(f"logsumexp: expected a 1-D vector, got shape {xv.shape}")
    m = float(xv.max())
    return add(log(sum(exp(sub(x, m)))), m)


def global_avg_pool(x):
    """Mean over the two trailing spatial axes of a (channels, h, w) array."""
    xv = _value(x)
    if xv.ndim != 3:
        raise ValueError(f"global_avg_pool: expected (channels, h, w), got shape {xv.shape}")
    return mean(x, axis=(1, 2))


def _conv_indices(cin, hp, wp, kh, kw):
    ho, wo = hp - kh + 1, wp - kw + 1
    pos_r = np.arange(ho)[:, None, None, None, None]
    pos_c = np.arange(wo)[None, :, None, None, None]
    ch = np.arange(cin)[None, None, :, None, None]
    off_r = np.arange(kh)[None, None, None, :, None]
    off_c = np.arange(kw)[None, None, None, None, :]
    flat = ch * (hp * wp) + (pos_r + off_r) * wp + (pos_c + off_c)
    return flat.reshape(ho * wo, cin * kh * kw), ho, wo


def conv2d(x, w, padding="valid"):
    """2-D convolution (cross-correlation), stride 1.

    x: (in_channels, h, w); w: (out_channels, in_channels, kh, kw).
    padding 'valid' shrinks the output, 'same' zero-pads to keep h and w.
    """
    xv, wv = _value(x), _value(w)
    if xv.ndim != 3 or wv.ndim != 4:
        raise ValueError(f"conv2d: expected (cin, h, w) and (cout, cin, kh, kw), "
                         f"got {xv.shape} and {wv.shape}")
    cin, h, width = xv.shape
    cout, cin_w, kh, kw = wv.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: input has {cin} channels but kernel expects {cin_w}")
    if padding == "same":
        pt, pl = (kh - 1) // 2, (kw - 1) // 2
        x = pad2d(x, (pt, kh - 1 - pt, pl, kw - 1 - pl))
        h, width = h + kh - 1, width + kw - 1
    elif padding != "valid":
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    if kh > h or kw > width:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{width}")
    idx, ho, wo = _conv_indices(cin, h, width, kh, kw)
    cols = gather(x, idx)                       # (ho*wo, cin*kh*kw)
    wmat = reshape(w, (cout, cin * kh * kw))
    out = matmul(cols, transpose(wmat))         # (ho*wo, cout)
    return reshape(transpose(out), (cout, ho, wo))


# ---------------------------------------------------------------------------
# differentiation


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order  # ancestors before descendants


def grad_node(output: Node, wrt: Node) -> Node:
    """Adjoint of a scalar `output` with respect to `wrt`, as a node graph.

    The result is itself differentiable, which is what makes double
    backward (and so `hvp`) possible. Unreachable `wrt` yields exact zeros.
    """
    if output.value.shape != ():
        raise ValueError(f"gradient: output must be scalar, got shape {output.value.shape}")
    order = _toposort(output)
    adjoint: dict[int, Node] = {id(output): _as_node(np.ones(()))}
    for node in reversed(order):
        g = adjoint.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, contrib in zip(node.parents, node._vjp(g)):
            if contrib is None:
                continue
            held = adjoint.get(id(parent))
            adjoint[id(parent)] = contrib if held is None else add(held, contrib)
    result = adjoint.get(id(wrt))
    if result is None:
        return _as_node(np.zeros(wrt.value.shape))
    return result


def _resolve(table: dict[str, Node], key) -> Node:
    if isinstance(key, Node):
        return key
    if key in table:
        return table[key]
    raise KeyError(f"no node named {key!r} on this tape")


def forward(graph: Callable, inputs: dict) -> tuple[dict, Tape]:
    """Run `graph` on named inputs, recording every node on a fresh tape.

    `graph` is called with one keyword argument per input and returns either
    a single node or a dict of named nodes.
    """
    tape = Tape()
    with tape:
        in_nodes = {name: tape.input(name, value) for name, value in inputs.items()}
        result = graph(**in_nodes)
    if isinstance(result, Node):
        result = {"out": result}
    if not isinstance(result, dict) or not all(isinstance(v, Node) for v in result.values()):
        raise TypeError("forward: graph must return a Node or a dict of Nodes")
    tape.outputs.update(result)
    return {name: node.value for name, node in result.items()}, tape


def gradient(tape: Tape, output, wrt) -> Array:
    """Gradient of a scalar tape output with respect to a tape input."""
    out_node = _resolve(tape.outputs, output)
    wrt_node = _resolve(tape.inputs, wrt)
    with tape:
        g = grad_node(out_node, wrt_node)
    return g.value


def hvp(tape: Tape, output, wrt, v) -> Array:
    """Hessian-vector product H @ v of a scalar output w.r.t. one input.

    Computed as the gradient of <gradient(output), v>; needs nothing beyond
    the backward rules already being differentiable node graphs.
    """
    out_node = _resolve(tape.outputs, output)
    wrt_node = _resolve(tape.inputs, wrt)
    v = as_tensor(v)
    if v.shape != wrt_node.value.shape:
        raise ValueError(f"hvp: v has shape {v.shape}, expected {wrt_node.value.shape}")
    with tape:
        g = grad_node(out_node, wrt_node)
        s = sum(mul(g, v))
        h = grad_node(s, wrt_node)
    return h.value


def finite_diff_gradient(f: Callable, x, h) -> Array:
    """Central-difference gradient of a scalar function; the test oracle.

    `h` may be a scalar or a per-coordinate array of step sizes.
    """
    x = as_tensor(x)
    steps = np.broadcast_to(as_tensor(h), x.shape)
    g = np.empty_like(x)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xp[i] += steps[i]
        xm = x.copy()
        xm[i] -= steps[i]
        g[i] = (float(f(xp)) - float(f(xm))) / (2.0 * steps[i])
    return g
