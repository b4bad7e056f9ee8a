"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable primitive is a pair of closures: ``forward(*arrays)``
returns ``(out, ctx)`` and ``backward(ctx, grad)`` returns one adjoint per
input (``None`` for inputs that need no gradient).  Outputs remember the
:class:`Node` that produced them, so ``backward`` can walk the graph from a
scalar loss.  A :class:`Tape` additionally records every primitive call in
execution order, which makes the graph replayable and inspectable (the cost
model and the gradient checker both use this).
"""

import contextlib
import threading

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

__all__ = [
    "Tensor",
    "Parameter",
    "Node",
    "Tape",
    "no_grad",
    "is_grad_enabled",
    "apply_op",
    "backward",
    "finite_difference_check",
    "parameter_check",
    "relative_error",
    "matmul",
    "relu",
    "as_tensor",
]

_FLOATS = (np.float32, np.float64)


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.tapes = []


_state = _State()


def is_grad_enabled():
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    """One recorded primitive application."""

    __slots__ = ("op", "inputs", "forward", "backward", "ctx", "attrs")

    def __init__(self, op, inputs, forward, backward, ctx, attrs):
        self.op = op
        self.inputs = inputs
        self.forward = forward
        self.backward = backward
        self.ctx = ctx
        self.attrs = attrs

    def __repr__(self):
        shapes = [t.shape for t in self.inputs]
        return f"Node({self.op}, inputs={shapes})"


class Tape:
    """Ordered record of primitive calls made while the tape is active.

    Use as a context manager.  Entries are ``(node, output)`` pairs; since a
    node is appended only after its inputs exist, the list is topologically
    ordered by construction.  Tapes nest: every active tape sees every call.
    """

    def __init__(self):
        self.entries = []

    def __enter__(self):
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.remove(self)
        return False

    def record(self, node, out):
        self.entries.append((node, out))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def nodes(self):
        return [node for node, _ in self.entries]

    @property
    def outputs(self):
        return [out for _, out in self.entries]

    def replay(self):
        """Recompute every recorded output from the current leaf values.

        Returns the list of recomputed arrays in tape order.  Inputs produced
        by an earlier entry are taken from the replayed value, everything else
        (leaves, parameters, constants) from its current ``data``.
        """
        fresh = {}
        results = []
        for node, out in self.entries:
            args = [fresh.get(id(t), t.data) for t in node.inputs]
            value, _ = node.forward(*args)
            fresh[id(out)] = value
            results.append(value)
        return results


def _record(node, out):
    for tape in _state.tapes:
        tape.record(node, out)


class Tensor:
    """N-dimensional float array that can take part in differentiation."""

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOATS:
            arr = arr.astype(np.float64)
        if any(n < 0 for n in arr.shape):
            raise DimensionError(f"invalid shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    # -- array-like surface -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.dtype)

    def backward(self, grad=None, tape=None):
        backward(self, grad=grad, tape=tape)

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def relu(self):
        return relu(self)

    def __getitem__(self, index):
        return getitem(self, index)


class Parameter(Tensor):
    """Learned leaf tensor.

    ``name`` is filled in by the owning module tree (slash-separated path).
    ``decay`` marks whether weight decay applies to it.
    """

    __slots__ = ("name", "decay")

    def __init__(self, data, name="", decay=False, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.decay = decay

    def __repr__(self):
        return f"Parameter({self.name or '?'}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _coerce(a, b):
    """Promote python scalars to tensors of the partner's dtype."""
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.dtype != b.dtype:
        raise TypeError(f"mixed dtypes in one graph: {a.dtype} and {b.dtype}")
    return a, b


def apply_op(op, inputs, forward, backward_fn, **attrs):
    """Run ``forward`` on the input arrays and wire up the adjoint.

    This is the single entry point every primitive goes through.
    """
    out_data, ctx = forward(*(t.data for t in inputs))
    out = Tensor(out_data, dtype=out_data.dtype)
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    node = Node(op, tuple(inputs), forward, backward_fn, ctx, attrs)
    if needs:
        out.requires_grad = True
        out.node = node
    if _state.tapes:
        _record(node, out)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------------


def add(a, b):
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape

    def fwd(x, y):
        return x + y, None

    def bwd(ctx, g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return apply_op("add", (a, b), fwd, bwd)


def sub(a, b):
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape

    def fwd(x, y):
        return x - y, None

    def bwd(ctx, g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return apply_op("sub", (a, b), fwd, bwd)


def mul(a, b):
    a, b = _coerce(a, b)

    def fwd(x, y):
        return x * y, (x, y)

    def bwd(ctx, g):
        x, y = ctx
        return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

    return apply_op("mul", (a, b), fwd, bwd)


def reciprocal(a):
    def fwd(x):
        out = 1.0 / x
        return out, out

    def bwd(out, g):
        return (-g * out * out,)

    return apply_op("reciprocal", (a,), fwd, bwd)


def power(a, exponent):
    p = float(exponent)

    def fwd(x):
        return x**p, x

    def bwd(x, g):
        return (g * p * x ** (p - 1),)

    return apply_op("pow", (a,), fwd, bwd, exponent=p)


def exp(a):
    def fwd(x):
        out = np.exp(x)
        return out, out

    def bwd(out, g):
        return (g * out,)

    return apply_op("exp", (a,), fwd, bwd)


def log(a):
    def fwd(x):
        return np.log(x), x

    def bwd(x, g):
        return (g / x,)

    return apply_op("log", (a,), fwd, bwd)


def relu(a):
    """max(x, 0); the subgradient at 0 is taken as 0."""

    def fwd(x):
        mask = x > 0
        return x * mask, mask

    def bwd(mask, g):
        return (g * mask,)

    return apply_op("relu", (a,), fwd, bwd)


# -- reductions and shape ----------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False):
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def fwd(x):
        return np.asarray(x.sum(axis=axes, keepdims=keepdims)), None

    def bwd(ctx, g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return apply_op("sum", (a,), fwd, bwd, axis=axes)


def tmean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    old = a.shape

    def fwd(x):
        return x.reshape(shape), None

    def bwd(ctx, g):
        return (g.reshape(old),)

    return apply_op("reshape", (a,), fwd, bwd, shape=tuple(shape))


def transpose(a, axes=None):
    inv = None if axes is None else tuple(np.argsort(axes))

    def fwd(x):
        return np.transpose(x, axes), None

    def bwd(ctx, g):
        return (np.transpose(g, inv),)

    return apply_op("transpose", (a,), fwd, bwd, axes=axes)


def matmul(a, b):
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    a, b = _coerce(a, b)

    def fwd(x, y):
        return x @ y, (x, y)

    def bwd(ctx, g):
        x, y = ctx
        return g @ y.T, x.T @ g

    return apply_op("matmul", (a, b), fwd, bwd)


def getitem(a, index):
    """Basic (slice / integer) indexing; the adjoint scatters into zeros."""
    shape, dtype = a.shape, a.dtype

    def fwd(x):
        return np.array(x[index]), None

    def bwd(ctx, g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return apply_op("getitem", (a,), fwd, bwd, index=index)


def concat(tensors, axis=1):
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fwd(*xs):
        return np.concatenate(xs, axis=axis), None

    def bwd(ctx, g):
        return tuple(np.split(g, splits, axis=axis))

    return apply_op("concat", tuple(tensors), fwd, bwd, axis=axis)


# -- reverse sweep -------------------------------------------------------------


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(loss, grad=None, tape=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``loss`` must be a scalar unless an explicit output ``grad`` is given.
    When ``tape`` is passed its recorded order is used for the sweep instead
    of a graph traversal.  Repeated calls accumulate.
    """
    if grad is None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype)
        if grad.shape != loss.shape:
            raise DimensionError(f"seed grad {grad.shape} does not match {loss.shape}")
    if not loss.requires_grad:
        return

    if tape is not None:
        order = [out for node, out in tape.entries if out.node is node]
        if not any(out is loss for out in order):
            raise ContractError("loss was not recorded on the given tape")
    else:
        order = _topological(loss)

    if loss.node is None:
        loss.grad = grad.copy() if loss.grad is None else loss.grad + grad
        return
    grads = {id(loss): grad}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None or t.node is None:
            continue
        input_grads = t.node.backward(t.node.ctx, g)
        for inp, ig in zip(t.node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                continue
            key = id(inp)
            grads[key] = grads[key] + ig if key in grads else ig


# -- finite differences --------------------------------------------------------


def relative_error(analytic, numeric, atol=0.0):
    """max |a - n| / (|a| + |n| + 1e-12) over all coordinates.

    Coordinates with ``|a| + |n| <= atol`` count as agreeing; this is for
    derivatives that vanish identically, where both sides are pure noise.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    err = np.abs(a - n) / (np.abs(a) + np.abs(n) + 1e-12)
    err[np.abs(a) + np.abs(n) <= atol] = 0.0
    return float(np.max(err))


def _central_differences(evaluate, values, eps):
    flat = values.reshape(-1)
    numeric = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = evaluate()
        flat[i] = orig - eps
        fm = evaluate()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite value while perturbing coordinate {i}", index=i)
        numeric[i] = (fp - fm) / (2 * eps)
    return numeric


def finite_difference_check(f, point, eps=1e-6, atol=0.0):
    """Compare the adjoint of scalar ``f`` at ``point`` to central differences.

    Returns the maximum relative error over the coordinates of ``point``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, copy=True)
    if base.dtype not in _FLOATS:
        base = base.astype(np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    if out.size != 1:
        raise ContractError(f"f must be scalar-valued, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericalError("non-finite value at the unperturbed point")
    backward(out)
    analytic = np.zeros_like(base) if x.grad is None else x.grad
    if not np.isfinite(analytic).all():
        bad = int(np.flatnonzero(~np.isfinite(analytic.ravel()))[0])
        raise NumericalError(f"non-finite adjoint at coordinate {bad}", index=bad)

    probe = base.copy()

    def evaluate():
        with no_grad():
            return float(f(Tensor(probe)).data)

    numeric = _central_differences(evaluate, probe, eps)
    return relative_error(analytic, numeric, atol)


def parameter_check(loss_fn, params, eps=1e-6, atol=0.0):
    """Finite-difference check of ``loss_fn()`` against each parameter.

    Parameters are perturbed in place and restored.  Returns a dict mapping
    parameter name (or index) to its maximum relative error.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = loss_fn()
    if out.size != 1:
        raise ContractError(f"loss must be scalar, got shape {out.shape}")
    backward(out)
    errors = {}
    for k, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

        def evaluate():
            with no_grad():
                return float(loss_fn().data)

        numeric = _central_differences(evaluate, p.data, eps)
        errors[getattr(p, "name", "") or str(k)] = relative_error(analytic, numeric, atol)
    return errors
