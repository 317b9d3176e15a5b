#
# python-spad: structured pruning adapters.
#
# This program is free software: you can redistribute it and/or modify it under
# the terms of the GNU Lesser General Public License as published by the Free
# Software Foundation, either version 3 of the License, or (at your option) any
# later version.
#
# This program is distributed in the hope that it will be useful, but WITHOUT
# ANY WARRANTY; without even the implied warranty of MERCHANTABILITY or FITNESS
# FOR A PARTICULAR PURPOSE.  See the GNU Lesser General Public License for more
# details.
#
# You should have received a copy of the GNU General Public License along with
# this program.  If not, see <http://www.gnu.org/licenses/>.
#

"""
Dense float64 tensors with reverse-mode automatic differentiation.

Operations record themselves on the active :class:`Tape` of the calling
thread; :func:`backward` replays that tape in reverse and fills in the
``grad`` slot of every tensor the loss depends on.

>>> from spad.tensor import Tensor, Tape, mul, reduce_sum, backward
>>> w = Tensor([1.0, 2.0], requires_grad=True, name="w")
>>> with Tape():
...     loss = reduce_sum(mul(w, Tensor([3.0, 4.0])))
>>> backward(loss)
>>> w.grad.tolist()
[3.0, 4.0]

Gradients of products with a tensor itself follow the product rule:

>>> w = Tensor([1.0, -2.0], requires_grad=True)
>>> with Tape():
...     loss = reduce_sum(mul(w, w))
>>> backward(loss)
>>> w.grad.tolist()
[2.0, -4.0]

Larger computations are described as an ordered list of :class:`Node`
entries, each naming its output and the names of its inputs, and evaluated
with :func:`forward_graph`, which opens a tape for the caller:

>>> from spad.tensor import Node, forward_graph, identity, matmul
>>> forward_graph(Tensor([1.0, 2.0, 3.0]), [Node("out", identity)]).data.tolist()
[1.0, 2.0, 3.0]
>>> graph = [Node("y", matmul, ("input", "w"))]
>>> inputs = {"input": Tensor([[1.0, 2.0], [3.0, 4.0]]), "w": Tensor([[1.0], [1.0]])}
>>> forward_graph(inputs, graph).data.tolist()
[[3.0], [7.0]]

Operand mismatches name the offending node:

>>> forward_graph(Tensor([[1.0, 2.0]]), [Node("proj", matmul, ("input", "input"))])
Traceback (most recent call last):
...
spad.tensor.GraphShapeError: node 'proj': matmul: cannot multiply (1, 2) by (1, 2)

A loss computed without a tape cannot be differentiated:

>>> backward(reduce_sum(Tensor([1.0])))  # doctest: +IGNORE_EXCEPTION_DETAIL
Traceback (most recent call last):
...
BackwardError: loss was not produced under a tape

"""

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class TensorError(ValueError):
    """Raised when a tensor cannot be constructed from the given data"""


class GraphError(ValueError):
    """Raised when a computation description is malformed"""


class GraphShapeError(GraphError):
    """Raised when operand shapes do not fit an operation"""


class BackwardError(RuntimeError):
    """Raised when backward() is called on a loss it cannot differentiate"""


class NonFiniteError(ArithmeticError):
    """Raised at step boundaries when NaN or Inf values are found"""


_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    """Return the innermost tape open on the calling thread, or None."""
    stack = _tape_stack()
    if stack:
        return stack[-1]
    return None


class Tape(object):
    """
    Records operations for reverse-mode differentiation.

    A tape is confined to the thread that created it. Use it as a context
    manager; operations on tensors requiring gradients record themselves
    while it is open. :func:`forward_graph` additionally stores every named
    node output in :attr:`values`.

    """
    def __init__(self):
        self.records = []
        self.values = {}
        self.thread = threading.get_ident()

    def __enter__(self):
        if threading.get_ident() != self.thread:
            raise BackwardError("tape is confined to the thread that created it")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc_info):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.records)

    def __repr__(self):
        return "<Tape %u records>" % len(self.records)

    def record(self, out, parents, backward_fn):
        out._tape = self
        out._index = len(self.records)
        self.records.append((out, parents, backward_fn))


class Tensor(object):
    """
    A dense n-dimensional float64 array with an optional gradient slot.

    :param data: anything numpy can turn into a float64 array; copied
    :param requires_grad: True for leaves that should receive gradients
    :param name: label used in error messages

    """
    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if 0 in arr.shape:
            raise TensorError("tensor extents must be positive, got " +
                              str(arr.shape))
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None
        self._index = None

    @classmethod
    def _wrap(cls, arr):
        out = cls.__new__(cls)
        out.data = np.asarray(arr, dtype=np.float64)
        out.grad = None
        out.requires_grad = False
        out.name = None
        out._tape = None
        out._index = None
        return out

    def __repr__(self):
        label = " " + self.name if self.name else ""
        flags = " grad" if self.requires_grad else ""
        return "<Tensor%s shape %s%s>" % (label, str(self.shape), flags)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """Return a copy of this tensor outside any tape."""
        return Tensor(self.data, name=self.name)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def check_finite(value, what):
    """
    Raise :exc:`NonFiniteError` naming *what* if value (a Tensor or array)
    holds NaN or Inf.

    """
    data = value.data if isinstance(value, Tensor) else np.asarray(value)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite values in " + str(what))


def _result(data, parents, backward_fn):
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def identity(x):
    return _result(x.data, (x,), lambda g: (g,))


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise GraphShapeError("add: cannot broadcast %s and %s" % (a.shape, b.shape))
    return _result(data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise GraphShapeError("sub: cannot broadcast %s and %s" % (a.shape, b.shape))
    return _result(data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise GraphShapeError("mul: cannot broadcast %s and %s" % (a.shape, b.shape))
    return _result(data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise GraphShapeError("matmul: cannot multiply %s by %s" % (a.shape, b.shape))
    return _result(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x):
    if x.ndim != 2:
        raise GraphShapeError("transpose: expected a matrix, got " + str(x.shape))
    return _result(x.data.T, (x,), lambda g: (g.T,))


def reshape(x, shape):
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise GraphShapeError("reshape: cannot view %s as %s" % (x.shape, shape))
    return _result(data, (x,), lambda g: (g.reshape(x.shape),))


def relu(x):
    alive = x.data > 0
    return _result(np.where(alive, x.data, 0.0), (x,), lambda g: (g * alive,))


def reduce_sum(x):
    return _result(np.array(x.data.sum()), (x,),
                   lambda g: (np.full(x.shape, float(g)),))


def reduce_mean(x):
    count = x.size
    return _result(np.array(x.data.mean()), (x,),
                   lambda g: (np.full(x.shape, float(g) / count),))


def conv2d(x, w, stride=1, padding=0):
    """
    2-D cross-correlation of an NCHW batch with an OIKK kernel, using
    im2col so that both passes are single matrix products.

    """
    x, w = as_tensor(x), as_tensor(w)
    if (x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or
            w.shape[2] != w.shape[3]):
        raise GraphShapeError("conv2d: cannot apply kernel %s to input %s" %
                              (w.shape, x.shape))
    n, c, h, wd = x.shape
    o, k = w.shape[0], w.shape[2]
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    if xp.shape[2] < k or xp.shape[3] < k:
        raise GraphShapeError("conv2d: kernel %s larger than padded input %s" %
                              (w.shape, xp.shape))

    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(o, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if padding:
            gxp = gxp[:, :, padding:padding + h, padding:padding + wd]
        return gxp, gw

    return _result(np.ascontiguousarray(out), (x, w), backward_fn)


def batch_norm(x, gamma, beta, running_mean, running_var, training=True,
               momentum=0.1, eps=1e-5):
    """
    Batch normalisation over the channel axis of an NC or NCHW batch.

    In training mode batch statistics are used and the running estimates
    (plain arrays) are updated in place; otherwise the running estimates
    are used and nothing is mutated.

    """
    if x.ndim == 2:
        axes, view = (0,), (1, -1)
    elif x.ndim == 4:
        axes, view = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise GraphShapeError("batch_norm: expected NC or NCHW input, got " + str(x.shape))
    if x.shape[1] != gamma.shape[0]:
        raise GraphShapeError("batch_norm: %u channels against %u parameters" %
                              (x.shape[1], gamma.shape[0]))
    count = x.size // x.shape[1]

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean.copy(), running_var.copy()

    inv = (1.0 / np.sqrt(var + eps)).reshape(view)
    xhat = (x.data - mean.reshape(view)) * inv
    out = gamma.data.reshape(view) * xhat + beta.data.reshape(view)

    def backward_fn(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(view)
        if training:
            gx = inv / count * (count * gxhat
                                - gxhat.sum(axis=axes, keepdims=True)
                                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward_fn)


def global_avg_pool(x):
    if x.ndim != 4:
        raise GraphShapeError("global_avg_pool: expected NCHW input, got " + str(x.shape))
    area = x.shape[2] * x.shape[3]
    return _result(x.data.mean(axis=(2, 3)), (x,),
                   lambda g: (np.broadcast_to(g[:, :, None, None] / area, x.shape).copy(),))


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy of NC logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise GraphShapeError("softmax_cross_entropy: logits %s against labels %s" %
                              (logits.shape, labels.shape))
    n, classes = logits.shape
    if labels.min() < 0 or labels.max() >= classes:
        raise GraphShapeError("softmax_cross_entropy: labels outside [0, %u)" % classes)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)

    def backward_fn(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return _result(np.array(-logp[rows, labels].mean()), (logits,), backward_fn)


class Node(object):
    """
    One entry of a computation description: the name of its output, the
    operation producing it and the names of the values it consumes.

    """
    def __init__(self, name, op, inputs=("input",)):
        self.name = name
        self.op = op
        self.inputs = tuple(inputs)

    def __repr__(self):
        return "<Node %s <- %s>" % (self.name, ",".join(self.inputs))


def forward_graph(inputs, graph, tape=None):
    """
    Evaluate a computation description.

    :param inputs: a Tensor (bound to the name "input") or a dict of
                   named tensors
    :param graph: ordered iterable of :class:`Node`; a node may only consume
                  graph inputs or outputs of earlier nodes, so an acceptable
                  description is acyclic by construction
    :param tape: tape to record on; a new one is opened if not given
    :returns: the output of the last node (the input for an empty graph)
    :raises: GraphError, GraphShapeError

    """
    if isinstance(inputs, Tensor):
        inputs = {"input": inputs}
    values = dict(inputs)
    out = values.get("input")
    if tape is None:
        tape = Tape()

    with tape:
        for node in graph:
            if node.name in values:
                raise GraphError("node %r: name defined twice" % node.name)
            try:
                args = [values[name] for name in node.inputs]
            except KeyError as e:
                raise GraphError("node %r: input %r is not produced by an "
                                 "earlier node" % (node.name, e.args[0]))
            try:
                out = node.op(*args)
            except ValueError as e:
                raise GraphShapeError("node %r: %s" % (node.name, e))
            values[node.name] = out

    tape.values.update(values)
    return out


def backward(loss, params=()):
    """
    Fill gradients by replaying the tape that produced *loss* in reverse.

    Leaf gradients accumulate into ``grad``; intermediate tensors on the
    tape get fresh gradients on every call. Each parameter in *params* the
    loss does not reach receives an all-zero gradient.

    :raises: BackwardError

    """
    tape = loss._tape
    if tape is None:
        raise BackwardError("loss was not produced under a tape")
    if loss.size != 1:
        raise BackwardError("loss must be a scalar, got shape " + str(loss.shape))
    if threading.get_ident() != tape.thread:
        raise BackwardError("tape is confined to the thread that created it")

    records = tape.records[:loss._index + 1]
    for out, _, _ in records:
        out.grad = None
    loss.grad = np.ones_like(loss.data)

    for out, parents, backward_fn in reversed(records):
        if out.grad is None:
            continue
        for parent, grad in zip(parents, backward_fn(out.grad)):
            if grad is None or not parent.requires_grad:
                continue
            grad = _unbroadcast(np.asarray(grad, dtype=np.float64), parent.shape)
            if parent.grad is None:
                parent.grad = np.array(grad)
            else:
                parent.grad = parent.grad + grad

    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
