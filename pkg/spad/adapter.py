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
Weighted layer representations for linear and conv2d layers.

A :class:`DenseLayer` holds a trainable (fine-pruned) weight. A
:class:`LoraLayer` adds a parallel low-rank adapter ``W_down @ W_up`` to a
frozen source weight ``W_s``. A :class:`SploraLayer` is a low-rank adapter
whose factors share the channel masks of the source weight, so that the
fused weight

  W_s * (m_row m_col^T) + (W_down * m_row 1^T) @ (W_up * 1 m_col^T)

is as structurally sparse as the pruned source weight. For convolutions the
adapter is a pair of 1x1 convolutions; its product lands on the centre tap
of the kernel when fused.

>>> import numpy as np
>>> from spad.adapter import SploraLayer, effective_weight, apply_masks, compact
>>> layer = SploraLayer(np.eye(2), [[1.0], [0.0]], [[0.0, 1.0]])
>>> effective_weight(layer).data.tolist()
[[1.0, 1.0], [0.0, 1.0]]
>>> apply_masks(layer, [1, 0], [1, 1])
>>> effective_weight(layer).data.tolist()
[[1.0, 1.0], [0.0, 0.0]]
>>> layer.W_down.data.tolist()
[[1.0], [0.0]]

Compaction deletes masked rows and columns, leaving a smaller dense layer:

>>> small = compact(layer)
>>> small
<DenseLayer linear 1x2>
>>> small.weight.data.tolist()
[[1.0, 1.0]]

The source weight is frozen:

>>> layer.W_s[0, 0] = 5.0
Traceback (most recent call last):
...
ValueError: assignment destination is read-only

"""

import numpy as np

from .compat import get_rng
from .tensor import Tensor, add, conv2d, matmul, mul, reshape, transpose

DEFAULT_INIT_RANGE = 1e-4


class AdapterError(ValueError):
    """Raised on invalid adapter construction, ranks or masks."""


def _mask(mask, length, what):
    if mask is None:
        return np.ones(length)
    arr = np.asarray(mask, dtype=np.float64)
    if arr.shape != (length,):
        raise AdapterError("%s has shape %r, expected (%u,)" % (what, arr.shape, length))
    if not np.all((arr == 0) | (arr == 1)):
        raise AdapterError("%s is not binary" % what)
    return arr


def _outer(m_row, m_col, ndim):
    outer = np.outer(m_row, m_col)
    return outer.reshape(outer.shape + (1,) * (ndim - 2))


def hadamard_masked(W, m_row, m_col):
    """Elementwise form of masking: ``W * (m_row m_col^T)``."""
    W = np.asarray(W, dtype=np.float64)
    return W * _outer(np.asarray(m_row, dtype=np.float64),
                      np.asarray(m_col, dtype=np.float64), W.ndim)


def projection_masked(W, m_row, m_col):
    """Projection form of masking: ``diag(m_row) @ W @ diag(m_col)``."""
    return (np.diag(np.asarray(m_row, dtype=np.float64)) @
            np.asarray(W, dtype=np.float64) @
            np.diag(np.asarray(m_col, dtype=np.float64)))


class _WeightedLayer(object):
    """Geometry and masks common to every weighted layer."""

    def _init_geometry(self, shape, kind, stride, padding, m_row, m_col, name):
        if len(shape) not in (2, 4) or (len(shape) == 4 and shape[2] != shape[3]):
            raise AdapterError("weight of shape %r is neither a matrix nor a "
                               "square kernel" % (shape,))
        self.kind = kind or ("conv2d" if len(shape) == 4 else "linear")
        if (self.kind == "conv2d") != (len(shape) == 4):
            raise AdapterError("%s layer with a weight of shape %r" % (self.kind, shape))
        self.shape = tuple(shape)
        self.out_channels, self.in_channels = shape[:2]
        self.kernel = shape[2] if len(shape) == 4 else None
        self.stride = stride
        self.padding = padding
        self.name = name
        self.m_row = _mask(m_row, self.out_channels, "row mask")
        self.m_col = _mask(m_col, self.in_channels, "column mask")

    def __repr__(self):
        return "<%s %s %ux%u>" % (self.__class__.__name__, self.kind,
                                  self.out_channels, self.in_channels)

    @property
    def alive_rows(self):
        return int(np.count_nonzero(self.m_row))

    @property
    def alive_cols(self):
        return int(np.count_nonzero(self.m_col))

    def _mask_tensor(self):
        return Tensor(_outer(self.m_row, self.m_col, len(self.shape)))

    def _fully_alive(self):
        return self.m_row.all() and self.m_col.all()

    def apply_masks(self, m_row, m_col):
        """
        Store new row and column masks and zero the entries they remove.
        Applying the same masks twice changes nothing.

        """
        self.m_row = _mask(m_row, self.out_channels, "row mask")
        self.m_col = _mask(m_col, self.in_channels, "column mask")
        self._zero_masked()

    def forward(self, x, weight=None):
        """Apply the layer to x with its fused weight (or the given one)."""
        if weight is None:
            weight = self.weight_tensor()
        if self.kind == "conv2d":
            return conv2d(x, weight, self.stride, self.padding)
        return matmul(x, transpose(weight))


class DenseLayer(_WeightedLayer):
    """
    A plain weight, trainable unless frozen. Masked entries of a trainable
    weight are zeroed when masks are applied; every weight is multiplied by
    its masks again in the forward pass, so masked entries get no gradient.

    """
    def __init__(self, weight, kind=None, stride=1, padding=0, m_row=None,
                 m_col=None, trainable=True, name=None):
        weight = np.array(weight, dtype=np.float64)
        self._init_geometry(weight.shape, kind, stride, padding, m_row, m_col, name)
        self.trainable = trainable
        self.weight = Tensor(weight, requires_grad=trainable,
                             name=(name or "dense") + ".weight")
        self._zero_masked()

    def _zero_masked(self):
        # frozen weights are shared between tasks and only masked on use
        if self.trainable and not self._fully_alive():
            self.weight.data *= _outer(self.m_row, self.m_col, len(self.shape))

    def parameters(self):
        return [self.weight] if self.trainable else []

    def effective_weight(self):
        return hadamard_masked(self.weight.data, self.m_row, self.m_col)

    def weight_tensor(self):
        if self._fully_alive():
            return self.weight
        return mul(self.weight, self._mask_tensor())

    def copy(self):
        return DenseLayer(self.weight.data, self.kind, self.stride, self.padding,
                          self.m_row, self.m_col, self.trainable, self.name)


class _LowRankLayer(_WeightedLayer):
    def __init__(self, W_s, W_down, W_up, kind=None, stride=1, padding=0,
                 m_row=None, m_col=None, name=None):
        W_s = np.array(W_s, dtype=np.float64)
        self._init_geometry(W_s.shape, kind, stride, padding, m_row, m_col, name)
        W_s.flags.writeable = False
        self.W_s = W_s
        prefix = name or "adapter"
        self.W_down = Tensor(W_down, requires_grad=True, name=prefix + ".down")
        self.W_up = Tensor(W_up, requires_grad=True, name=prefix + ".up")
        if self.W_down.ndim != 2 or self.W_up.ndim != 2 or \
                self.W_down.shape[0] != self.out_channels or \
                self.W_up.shape[1] != self.in_channels or \
                self.W_down.shape[1] != self.W_up.shape[0]:
            raise AdapterError("factors %r and %r do not fit a %ux%u weight" %
                               (self.W_down.shape, self.W_up.shape,
                                self.out_channels, self.in_channels))
        self._zero_masked()

    @property
    def rank(self):
        return self.W_down.shape[1]

    def parameters(self):
        return [self.W_down, self.W_up]

    def _embed(self, delta):
        if self.kernel is None:
            return delta
        out = np.zeros(self.shape)
        c = self.kernel // 2
        out[:, :, c, c] = delta
        return out

    def _embed_tensor(self, delta):
        if self.kernel is None:
            return delta
        centre = np.zeros((1, 1, self.kernel, self.kernel))
        centre[0, 0, self.kernel // 2, self.kernel // 2] = 1.0
        return mul(reshape(delta, (self.out_channels, self.in_channels, 1, 1)),
                   Tensor(centre))

    def _source(self):
        return hadamard_masked(self.W_s, self.m_row, self.m_col)

    def effective_weight(self):
        down = self.W_down.data * self.m_row[:, None]
        up = self.W_up.data * self.m_col[None, :]
        return self._source() + self._embed(down @ up)

    def weight_tensor(self):
        down, up = self.W_down, self.W_up
        if not self._fully_alive():
            down = mul(down, Tensor(self.m_row[:, None]))
            up = mul(up, Tensor(self.m_col[None, :]))
        return add(Tensor(self._source()), self._embed_tensor(matmul(down, up)))

    def copy(self):
        return self.__class__(self.W_s, self.W_down.data, self.W_up.data,
                              self.kind, self.stride, self.padding,
                              self.m_row, self.m_col, self.name)


class SploraLayer(_LowRankLayer):
    """
    A frozen source weight with a low-rank adapter sharing its channel
    masks. Rows of ``W_down`` and columns of ``W_up`` at masked channels
    are zeroed whenever masks are applied.

    """
    def _zero_masked(self):
        self.W_down.data *= self.m_row[:, None]
        self.W_up.data *= self.m_col[None, :]


class LoraLayer(_LowRankLayer):
    """A frozen source weight with an unmasked parallel low-rank adapter."""

    def _zero_masked(self):
        if not self._fully_alive():
            raise AdapterError("LoRA layers carry no channel masks")

    def copy(self):
        return LoraLayer(self.W_s, self.W_down.data, self.W_up.data,
                         self.kind, self.stride, self.padding, name=self.name)


def _init_factors(W_s, r, seed, rng, init_range):
    W_s = np.asarray(W_s, dtype=np.float64)
    if W_s.ndim not in (2, 4):
        raise AdapterError("source weight of shape %r" % (W_s.shape,))
    n, m = W_s.shape[:2]
    if not 1 <= r <= min(n, m):
        raise AdapterError("rank %r outside [1, %u] for a %ux%u weight" %
                           (r, min(n, m), n, m))
    if init_range <= 0:
        raise AdapterError("init range must be positive")
    if rng is None:
        rng = get_rng(seed)
    fan_in = m * (W_s.shape[2] ** 2 if W_s.ndim == 4 else 1)
    W_down = rng.normal(0.0, np.sqrt(2.0 / fan_in), (n, r))
    W_up = rng.uniform(-init_range, init_range, (r, m))
    return W_s, W_down, W_up


def init_splora(W_s, r, seed=None, rng=None, init_range=DEFAULT_INIT_RANGE,
                kind=None, stride=1, padding=0, name=None):
    """
    Wrap W_s in a :class:`SploraLayer` of rank r with near-zero initial
    product: ``W_up ~ U(-init_range, init_range)`` and ``W_down`` drawn
    He-style with the fan-in of the source layer. Masks start all-ones.

    :raises: AdapterError if r is outside ``[1, min(n, m)]``

    """
    W_s, W_down, W_up = _init_factors(W_s, r, seed, rng, init_range)
    return SploraLayer(W_s, W_down, W_up, kind, stride, padding, name=name)


def init_lora(W_s, r, seed=None, rng=None, init_range=DEFAULT_INIT_RANGE,
              kind=None, stride=1, padding=0, name=None):
    """As :func:`init_splora`, for an unmasked :class:`LoraLayer`."""
    W_s, W_down, W_up = _init_factors(W_s, r, seed, rng, init_range)
    return LoraLayer(W_s, W_down, W_up, kind, stride, padding, name=name)


def effective_weight(layer):
    """The fused, masked weight of any weighted layer, as a Tensor."""
    return Tensor(layer.effective_weight())


def apply_masks(layer, m_row, m_col):
    layer.apply_masks(m_row, m_col)


def compact(layer):
    """
    Return a :class:`DenseLayer` holding only the surviving rows and
    columns of the layer's fused weight.

    :raises: AdapterError if a mask removes every channel

    """
    rows = np.flatnonzero(layer.m_row)
    cols = np.flatnonzero(layer.m_col)
    if not len(rows) or not len(cols):
        raise AdapterError("compacting %s would leave an empty weight" %
                           (layer.name or repr(layer)))
    weight = layer.effective_weight()[rows][:, cols]
    return DenseLayer(weight, layer.kind, layer.stride, layer.padding,
                      name=layer.name)
