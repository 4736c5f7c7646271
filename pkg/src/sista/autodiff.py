"""Dense 2-D matrix arithmetic with a reverse-mode differentiation tape.

Every quantity is a float64 matrix (scalars are 1x1, vectors are 1xn rows).
A :class:`Tensor` either lives on a :class:`Tape` (tracked) or is a constant.
Operations on tracked tensors append a node to the tape; nodes only ever
reference earlier nodes, so reverse iteration over the tape is a valid
topological order for the backward pass.

    >>> tape = Tape()
    >>> x = tape.variable([[3.0]])
    >>> y = x * x
    >>> float(tape.backward(y)[x])
    6.0
"""

import numpy as np

from .errors import ConfigError, DegenerateInputError, NumericError, ShapeError, UsageError


def as_matrix(value):
    """Copy ``value`` into a 2-D float64 array (scalars -> 1x1, 1-D -> row)."""
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim > 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    for axis in (0, 1):
        if shape[axis] == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    if grad.shape != shape:
        raise ShapeError(f"cannot reduce gradient of shape {grad.shape} to {shape}")
    return grad


class Tensor:
    """A matrix value, optionally recorded on a tape."""

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 1000

    def __init__(self, value, tape=None, index=None):
        value = as_matrix(value)
        if not np.all(np.isfinite(value)):
            raise NumericError("non-finite entry in matrix")
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    @property
    def rows(self):
        return self.value.shape[0]

    @property
    def cols(self):
        return self.value.shape[1]

    @property
    def tracked(self):
        return self.tape is not None

    def item(self):
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.value[0, 0])

    def __float__(self):
        return self.item()

    def __repr__(self):
        kind = "tracked" if self.tracked else "const"
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
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return take(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)


def tensor(value):
    """Wrap ``value`` as a constant unless it already is a Tensor."""
    return value if isinstance(value, Tensor) else Tensor(value)


class _Node:
    __slots__ = ("parents", "vjp")

    def __init__(self, parents, vjp):
        self.parents = parents
        self.vjp = vjp


class Gradients:
    """Adjoints from one backward pass, looked up by tensor."""

    def __init__(self, tape, adjoints):
        self._tape = tape
        self._adjoints = adjoints

    def __getitem__(self, t):
        if t.tape is not self._tape:
            raise UsageError("tensor is not recorded on this tape")
        grad = self._adjoints[t.index]
        return np.zeros(t.shape) if grad is None else grad

    def __contains__(self, t):
        return t.tape is self._tape


class Tape:
    """Ordered record of primitive operations for one loss evaluation."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def variable(self, value):
        """Register an input to differentiate with respect to."""
        return self._record(value, (), None)

    def _record(self, value, parents, vjp):
        t = Tensor(value, self, len(self.nodes))
        self.nodes.append(_Node(parents, vjp))
        return t

    def backward(self, output):
        """Propagate d(output)/d(node) back through the tape.

        Returns a :class:`Gradients` mapping; tensors the output does not
        depend on get a zero matrix.
        """
        if not isinstance(output, Tensor) or output.tape is not self:
            raise UsageError("output must be recorded on this tape")
        if output.shape != (1, 1):
            raise UsageError(f"backward needs a scalar output, got shape {output.shape}")
        adjoints = [None] * len(self.nodes)
        adjoints[output.index] = np.ones((1, 1))
        for idx in range(output.index, -1, -1):
            grad = adjoints[idx]
            node = self.nodes[idx]
            if grad is None or node.vjp is None:
                continue
            for parent, pgrad in zip(node.parents, node.vjp(grad)):
                if parent.tape is not self or pgrad is None:
                    continue
                pgrad = _unbroadcast(pgrad, parent.shape)
                prev = adjoints[parent.index]
                adjoints[parent.index] = pgrad if prev is None else prev + pgrad
        return Gradients(self, adjoints)


def primitive(value, parents, vjp):
    """Build the result of an operation on ``parents``.

    ``vjp(g)`` maps the output adjoint to one adjoint per parent (entries may
    be None). The result is recorded only if some parent is tracked.
    """
    tapes = {id(p.tape): p.tape for p in parents if p.tape is not None}
    if not tapes:
        return Tensor(value)
    if len(tapes) > 1:
        raise UsageError("operands are recorded on different tapes")
    (tape,) = tapes.values()
    return tape._record(value, tuple(parents), vjp)


def _binary_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = tensor(a), tensor(b)
    _binary_shape(a, b, "add")
    return primitive(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = tensor(a), tensor(b)
    _binary_shape(a, b, "sub")
    return primitive(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = tensor(a), tensor(b)
    _binary_shape(a, b, "mul")
    av, bv = a.value, b.value
    return primitive(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b):
    a, b = tensor(a), tensor(b)
    _binary_shape(a, b, "div")
    av, bv = a.value, b.value
    if np.any(bv == 0.0):
        raise NumericError("division by zero")
    out = av / bv
    return primitive(out, (a, b), lambda g: (g / bv, -g * out / bv))


def matmul(a, b):
    """Matrix product ``a @ b``."""
    a, b = tensor(a), tensor(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return primitive(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a):
    a = tensor(a)
    return primitive(a.value.T, (a,), lambda g: (g.T,))


def take(a, key):
    """Index ``a`` with a numpy key; the result must stay 2-D."""
    a = tensor(a)
    out = a.value[key]
    if out.ndim != 2:
        raise ShapeError("indexing must keep two dimensions (use slices or index lists)")

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, key, g)
        return (full,)

    return primitive(out, (a,), vjp)


def concat_rows(parts):
    """Stack matrices with equal column counts on top of each other."""
    parts = [tensor(p) for p in parts]
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {sorted(cols)}")
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return primitive(np.vstack([p.value for p in parts]), tuple(parts), vjp)


def reduce_sum(a, axis=None):
    a = tensor(a)
    if axis is None:
        out = a.value.sum().reshape(1, 1)
    else:
        out = a.value.sum(axis=axis, keepdims=True)
    shape = a.shape
    return primitive(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reduce_mean(a, axis=None):
    a = tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    return reduce_sum(a, axis) / float(count)


def exp(a):
    a = tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)  # overflow surfaces as NumericError below
    return primitive(out, (a,), lambda g: (g * out,))


def log(a):
    a = tensor(a)
    if np.any(a.value <= 0.0):
        raise NumericError("log of a non-positive entry")
    av = a.value
    return primitive(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    a = tensor(a)
    if np.any(a.value <= 0.0):
        raise NumericError("sqrt of a non-positive entry (derivative undefined)")
    out = np.sqrt(a.value)
    return primitive(out, (a,), lambda g: (g / (2.0 * out),))


def tanh(a):
    a = tensor(a)
    out = np.tanh(a.value)
    return primitive(out, (a,), lambda g: (g * (1.0 - out * out),))


def _check_temperature(temperature):
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")


def row_softmax(m, temperature=1.0):
    """Softmax of ``m / temperature`` along each row (max-subtracted)."""
    _check_temperature(temperature)
    m = tensor(m)
    z = m.value / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return ((out * (g - (g * out).sum(axis=1, keepdims=True))) / temperature,)

    return primitive(out, (m,), vjp)


def row_log_softmax(m, temperature=1.0):
    """Log of :func:`row_softmax`, computed without forming the softmax first."""
    _check_temperature(temperature)
    m = tensor(m)
    z = m.value / temperature
    z = z - z.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    soft = np.exp(out)

    def vjp(g):
        return ((g - soft * g.sum(axis=1, keepdims=True)) / temperature,)

    return primitive(out, (m,), vjp)


def normalize_rows(m):
    """Scale each row to unit L2 norm. Zero rows are not allowed."""
    m = tensor(m)
    norms = np.sqrt((m.value * m.value).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize a zero row")
    out = m.value / norms

    def vjp(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norms,)

    return primitive(out, (m,), vjp)


def grad_check(f, x, h=1e-5):
    """Largest relative gap between tape and central-difference gradients.

    ``f`` maps a Tensor to a 1x1 Tensor (or float) and must accept both a
    tracked variable and an untracked constant. The error for entry j is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not h > 0:
        raise ConfigError("finite-difference step must be positive")
    x = as_matrix(x)
    tape = Tape()
    xv = tape.variable(x)
    out = tensor(f(xv))
    if out.tape is None:
        analytic = np.zeros_like(x)
    else:
        analytic = tape.backward(out)[xv]

    def evaluate(point):
        try:
            val = float(tensor(f(Tensor(point))).item())
        except NumericError as exc:
            raise NumericError(f"function is not finite near the check point: {exc}") from exc
        if not np.isfinite(val):
            raise NumericError("function returned a non-finite value")
        return val

    worst = 0.0
    for idx in np.ndindex(x.shape):
        plus = x.copy()
        minus = x.copy()
        plus[idx] += h
        minus[idx] -= h
        numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * h)
        err = abs(analytic[idx] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
