"""Dense float64 tensors with a dynamic-tape reverse-mode differentiator.

Every operation on a :class:`Tensor` that needs a gradient is appended to the
innermost active :class:`Tape` together with a vector-Jacobian product closure.
:func:`backward` walks the tape in reverse and returns the adjoint of every
gradient-requiring leaf::

    w = parameter(np.ones((3, 2)))
    with Tape() as tape:
        loss = (x @ w).sum()
    grads = backward(tape, loss)
    grads[w]                     # ndarray, same shape as w

Outside a tape, or when no operand requires a gradient, operations just
compute values.  Broadcasting follows numpy rules.
"""

import contextlib

import numpy as np

from .errors import ContractError, DegenerateRowError, DimensionError

EPS_NORM = 1e-12
EPS_LN = 1e-5

KERNELS = (
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "relu", "exp",
    "log", "sqrt", "sum", "reshape", "getitem", "concat", "where",
    "row_softmax", "log_softmax", "l2_normalize_rows",
)

_TAPES = []
_FAULTS = {}


class Tape:
    """Append-only record of differentiable operations.

    Nodes only reference tensors created before them, so the node list is a
    topological order by construction.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self.nodes)


class _Node:
    __slots__ = ("kernel", "output", "inputs", "vjp")

    def __init__(self, kernel, output, inputs, vjp):
        self.kernel = kernel
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class Tensor:
    """A float64 array that can take part in a recorded computation."""

    __array_priority__ = 1000.0

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.tape_id = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{tag})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x):
    return Tensor(as_tensor(x).data)


@contextlib.contextmanager
def inject_fault(kernel, scale=1.5):
    """Scale the recorded vector-Jacobian product of ``kernel`` (test hook)."""
    if kernel not in KERNELS:
        raise ContractError(f"unknown kernel {kernel!r}")
    _FAULTS[kernel] = scale
    try:
        yield
    finally:
        _FAULTS.pop(kernel, None)


def _record(kernel, data, inputs, vjp):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.name = None
    out.tape_id = None
    out._tape = None
    if _TAPES and any(t.requires_grad for t in inputs):
        tape = _TAPES[-1]
        if kernel in _FAULTS:
            scale = _FAULTS[kernel]
            inner = vjp

            def vjp(g, _inner=inner, _s=scale):
                return tuple(None if r is None else _s * r for r in _inner(g))

        out.requires_grad = True
        out.tape_id = len(tape.nodes)
        out._tape = tape
        tape.nodes.append(_Node(kernel, out, inputs, vjp))
    return out


def backward(tape, root, wrt=None):
    """Adjoints of ``root`` with respect to every leaf it depends on.

    Returns a dict keyed by leaf tensor.  Tensors listed in ``wrt`` that the
    root does not depend on get an all-zero entry.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    return backward_from(tape, root, np.ones_like(root.data), wrt)


def backward_from(tape, output, cotangent, wrt=None):
    """Vector-Jacobian product of a tensor-valued ``output`` with ``cotangent``."""
    if output._tape is not tape or output.tape_id is None:
        raise ContractError("root tensor is not recorded on this tape")
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape != output.shape:
        raise ContractError(f"cotangent shape {cotangent.shape} != output shape {output.shape}")

    root = output
    adjoints = {id(root): cotangent}
    leaves = {}
    for node in reversed(tape.nodes[: root.tape_id + 1]):
        g = adjoints.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ContractError(
                    f"{node.kernel}: adjoint shape {gi.shape} != operand shape {inp.shape}"
                )
            key = id(inp)
            adjoints[key] = adjoints[key] + gi if key in adjoints else gi
            if inp._tape is not tape:
                leaves[key] = inp

    grads = {leaf: adjoints[key] for key, leaf in leaves.items()}
    for p in wrt or ():
        if p not in grads:
            grads[p] = np.zeros_like(p.data)
    return grads


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        "div", a.data / b.data, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a):
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def relu(a):
    a = as_tensor(a)
    # subgradient 0 at the kink
    on = a.data > 0
    return _record("relu", np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _record("exp", y, (a,), lambda g: (g * y,))


def log(a):
    a = as_tensor(a)
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    y = np.sqrt(a.data)
    return _record("sqrt", y, (a,), lambda g: (0.5 * g / y,))


def where(cond, a, b):
    """Select from ``a`` where ``cond`` is true, else from ``b``."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        "where", np.where(cond, a.data, b.data), (a, b),
        lambda g: (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        ),
    )


# -- linear algebra and shape -----------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _record(
        "matmul", a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _record("transpose", a.data.T.copy(), (a,), lambda g: (g.T.copy(),))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.array(np.broadcast_to(g, shape)),)

    return _record("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, index):
    """Indexing, slicing and boolean/integer-array selection."""
    a = as_tensor(a)
    if isinstance(index, Tensor):
        raise ContractError("index with an ndarray, not a Tensor")

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _record("getitem", np.array(a.data[index]), (a,), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}"
        ) from exc
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", data, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)))


# -- row-wise kernels ---------------------------------------------------------

def row_softmax(x, mask=None):
    """Softmax over the last axis; masked-out entries are exactly zero."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = as_tensor(mask).data != 0 if isinstance(mask, Tensor) else np.asarray(mask, dtype=bool)
        mask = np.broadcast_to(mask, z.shape)
        if not mask.any(axis=-1).all():
            bad = np.argwhere(~mask.any(axis=-1)).tolist()
            raise DegenerateRowError(f"row_softmax: fully masked rows at {bad[:10]}")
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("row_softmax", y, (x,), vjp)


def log_softmax(x):
    """Numerically stable log-softmax over the last axis."""
    x = as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", y, (x,), vjp)


def l2_normalize_rows(x):
    """Unit-normalize along the last axis; rows with norm < EPS_NORM pass through."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    degenerate = norm < EPS_NORM
    safe = np.where(degenerate, 1.0, norm)
    y = x.data / safe

    def vjp(g):
        proj = (g - y * (g * y).sum(axis=-1, keepdims=True)) / safe
        return (np.where(degenerate, g, proj),)

    return _record("l2_normalize_rows", y, (x,), vjp)


def layer_norm_rows(x, gain, bias, eps=EPS_LN):
    """Normalize the last axis to zero mean / unit population variance, then scale and shift."""
    x = as_tensor(x)
    n = x.shape[-1] if x.ndim else 0
    if n < 2:
        raise DimensionError(f"layer_norm_rows needs a trailing dimension >= 2, got {x.shape}")
    centered = x - mean(x, axis=-1, keepdims=True)
    var = mean(centered * centered, axis=-1, keepdims=True)
    return centered / sqrt(var + eps) * gain + bias


# -- optimizer ----------------------------------------------------------------

class SgdState:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient."""

    def __init__(self, learning_rate=1e-3, momentum=0.9, weight_decay=1e-4):
        if not learning_rate >= 0:
            raise ContractError(f"learning_rate must be non-negative, got {learning_rate}")
        if not 0 <= momentum < 1:
            raise ContractError(f"momentum must lie in [0, 1), got {momentum}")
        if not weight_decay >= 0:
            raise ContractError(f"weight_decay must be non-negative, got {weight_decay}")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}


def sgd_step(params, grads, state):
    """In-place update ``v <- mu*v + g + wd*p;  p <- p - lr*v``."""
    for p in params:
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"sgd_step: gradient shape {g.shape} != parameter shape {p.shape}")
        v = state.velocity.get(p)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + g + state.weight_decay * p.data
        state.velocity[p] = v
        p.data = p.data - state.learning_rate * v
    return params
