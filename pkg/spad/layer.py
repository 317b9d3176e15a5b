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
Layer specifications and the LayerSpec string form used in manifests.

A layer spec string has the format::

  name(in/out)<kind>[KxK/stride/padding] +adapt +prune <- input1,input2

The kernel part is given for conv2d layers only. ``+adapt`` marks a layer
that receives an adapter in adapter mode, ``+prune`` a layer whose output
channels may be removed. The input list defaults to the preceding layer
(or the network input for the first layer).

>>> from spad.layer import for_spec
>>> spec = for_spec("conv2(16/32)<conv2d>[3x3/2/1] +adapt +prune <- relu1")
>>> spec
LayerSpec('conv2', 'conv2d', 16, 32, kernel=3, stride=2, padding=1, adaptable=True, prunable=True, inputs=('relu1',))
>>> str(spec)
'conv2(16/32)<conv2d>[3x3/2/1] +adapt +prune <- relu1'
>>> spec.weight_shape()
(32, 16, 3, 3)

Batch norm, activation, pooling and residual junction layers keep their
channel count:

>>> for_spec("sum1(32/32)<add> <- bn2,down1").inputs
('bn2', 'down1')
>>> for_spec("bn1(16/32)<batchnorm>")
Traceback (most recent call last):
...
spad.layer.LayerSpecError: bn1: batchnorm layers keep their channel count (16 != 32)

"""

import re

KINDS = ("linear", "conv2d", "batchnorm", "relu", "pool", "head", "add")

WEIGHTED_KINDS = ("linear", "conv2d")
"""Kinds owning a weight matrix that can be adapted and channel-pruned."""

_layerspec_re = re.compile(r'^([A-Za-z_][\w.\-]*)\((\d+)/(\d+)\)<(\w+)>'
                           r'(?:\[(\d+)x(\d+)(?:/(\d+))?(?:/(\d+))?\])?'
                           r'((?:\s+\+\w+)*)'
                           r'(?:\s*<-\s*([\w.\-,\s]+))?\s*$')


class LayerSpecError(ValueError):
    """Raised when a layer spec string or its fields are invalid."""


class LayerSpec(object):
    """
    Shape-only description of one layer: its kind, channel counts, kernel
    geometry, flags, and the names of the layers feeding it.

    LayerSpecs should be obtained with :func:`for_spec` or
    :func:`for_channels`.

    """
    def __init__(self, name, kind, in_channels, out_channels, kernel=None,
                 stride=1, padding=0, adaptable=False, prunable=False, inputs=None):
        self.name = name
        self.kind = kind
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.adaptable = adaptable
        self.prunable = prunable
        self.inputs = tuple(inputs) if inputs else ()
        self._validate()

    def _fail(self, msg):
        raise LayerSpecError("%s: %s" % (self.name, msg))

    def _validate(self):
        if self.kind not in KINDS:
            self._fail("unknown kind %r" % self.kind)
        if self.in_channels <= 0 or self.out_channels <= 0:
            self._fail("channel counts must be positive")
        if self.kind in ("batchnorm", "relu", "pool", "add") and \
                self.in_channels != self.out_channels:
            self._fail("%s layers keep their channel count (%u != %u)" %
                       (self.kind, self.in_channels, self.out_channels))
        if self.kind == "conv2d":
            if not self.kernel or self.kernel <= 0:
                self._fail("conv2d layers need a kernel size")
            if self.stride <= 0 or self.padding < 0:
                self._fail("bad stride or padding")
        elif self.kernel is not None:
            self._fail("only conv2d layers take a kernel")
        if self.adaptable:
            if self.kind not in WEIGHTED_KINDS:
                self._fail("only linear and conv2d layers can be adapted")
            if self.kind == "conv2d" and (self.kernel % 2 == 0 or
                                          self.padding != (self.kernel - 1) // 2):
                # the 1x1 adapter branch must line up with the kernel centre
                self._fail("adapted convolutions need an odd kernel with 'same' padding")
        if self.prunable and self.kind not in WEIGHTED_KINDS:
            self._fail("only linear and conv2d layers own prunable channels")
        if self.kind == "add" and len(self.inputs) == 1:
            self._fail("add layers need at least two inputs")
        if self.kind != "add" and len(self.inputs) > 1:
            self._fail("only add layers take several inputs")

    def __eq__(self, other):
        return isinstance(other, LayerSpec) and str(self) == str(other)

    def __hash__(self):
        return hash(str(self))

    def __repr__(self):
        return ("LayerSpec(%r, %r, %u, %u, kernel=%r, stride=%u, padding=%u, "
                "adaptable=%r, prunable=%r, inputs=%r)" %
                (self.name, self.kind, self.in_channels, self.out_channels,
                 self.kernel, self.stride, self.padding, self.adaptable,
                 self.prunable, self.inputs))

    def __str__(self):
        out = "%s(%u/%u)<%s>" % (self.name, self.in_channels,
                                 self.out_channels, self.kind)
        if self.kind == "conv2d":
            out += "[%ux%u/%u/%u]" % (self.kernel, self.kernel,
                                      self.stride, self.padding)
        if self.adaptable:
            out += " +adapt"
        if self.prunable:
            out += " +prune"
        if self.inputs:
            out += " <- " + ",".join(self.inputs)
        return out

    @property
    def weighted(self):
        return self.kind in WEIGHTED_KINDS

    def weight_shape(self):
        """Shape of this layer's weight, or None for weightless kinds."""
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels, self.kernel, self.kernel)
        if self.kind in ("linear", "head"):
            return (self.out_channels, self.in_channels)
        return None

    def fan_in(self):
        return self.in_channels * (self.kernel or 1) ** 2

    def with_inputs(self, inputs):
        return self.for_channels(self.in_channels, self.out_channels, inputs)

    def for_channels(self, in_channels, out_channels, inputs=None):
        """Return a copy of this spec with different channel counts."""
        return self.__class__(self.name, self.kind, in_channels, out_channels,
                              self.kernel, self.stride, self.padding,
                              self.adaptable, self.prunable,
                              self.inputs if inputs is None else inputs)


def for_spec(spec):
    """
    Parse a layer spec string.

    :param spec: layer spec string
    :returns: a :class:`LayerSpec`
    :raises: LayerSpecError

    """
    m = _layerspec_re.match(spec.strip())
    if not m:
        raise LayerSpecError("cannot parse layer spec %r" % spec)
    (name, cin, cout, kind, kh, kw, stride, padding, flags, inputs) = m.groups()

    kernel = None
    if kh:
        if kh != kw:
            raise LayerSpecError("%s: only square kernels are supported" % name)
        kernel = int(kh)

    flags = flags.split()
    for flag in flags:
        if flag not in ("+adapt", "+prune"):
            raise LayerSpecError("%s: unknown flag %r" % (name, flag))

    if inputs:
        inputs = tuple(i.strip() for i in inputs.split(",") if i.strip())

    return LayerSpec(name, kind, int(cin), int(cout), kernel,
                     int(stride) if stride else 1,
                     int(padding) if padding else 0,
                     "+adapt" in flags, "+prune" in flags, inputs)
