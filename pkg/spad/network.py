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
Networks built from architecture manifests, and static parameter and FLOP
accounting.

:func:`build` turns a manifest into a trainable network with He-initialised
weights. A network starts in ``finetune`` mode, where every weight is
trained; :meth:`Network.adapt` turns it into an adapter network (``splora``
or ``lora``) whose source weights are frozen.

>>> import numpy as np
>>> from spad.manifest import from_text
>>> from spad.network import build, count_params, count_flops
>>> m = from_text('''
... name: mlp-4-8-2
... input_shape: 4
... num_classes: 2
... layers:
...     fc1(4/8)<linear> +adapt +prune
...     relu1(8/8)<relu>
...     head(8/2)<head>
... ''')
>>> net = build(m, seed=1)
>>> net
<Network mlp-4-8-2 finetune>
>>> count_params(m).total
50
>>> net.forward(np.ones((3, 4))).shape
(3, 2)
>>> count_flops(m)
96

In adapter mode only the low-rank factors, normalisation and head are
learned:

>>> adapted = net.adapt("splora", rank=2, seed=2)
>>> adapted.count_params().per_layer["fc1"]
24
>>> [p.name for p in adapted.parameters()]
['fc1.down', 'fc1.up', 'head.weight', 'head.bias']

"""

import hashlib
import logging
from collections import OrderedDict, namedtuple
from functools import reduce

import numpy as np

from . import adapter
from .adapter import DenseLayer, LoraLayer, SploraLayer
from .compat import get_rng
from .layer import WEIGHTED_KINDS
from .manifest import ArchitectureManifest
from .masks import ChannelMaskSet
from .tensor import (Node, Tape, Tensor, add, batch_norm, forward_graph,
                     global_avg_pool, matmul, mul, relu, softmax_cross_entropy,
                     transpose)

logger = logging.getLogger(__name__)

METHODS = ("finetune", "splora", "lora")

ParamCount = namedtuple("ParamCount", ["per_layer", "total"])


class NetworkError(ValueError):
    """Raised when a network is used in a way its state does not allow."""


class BatchNorm(object):
    """Per-channel batch normalisation with running statistics."""

    def __init__(self, channels, name, gamma=None, beta=None,
                 running_mean=None, running_var=None, momentum=0.1, eps=1e-5):
        self.name = name
        self.gamma = Tensor(np.ones(channels) if gamma is None else gamma,
                            requires_grad=True, name=name + ".gamma")
        self.beta = Tensor(np.zeros(channels) if beta is None else beta,
                           requires_grad=True, name=name + ".beta")
        self.running_mean = np.zeros(channels) if running_mean is None \
            else np.array(running_mean, dtype=np.float64)
        self.running_var = np.ones(channels) if running_var is None \
            else np.array(running_var, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps

    def __repr__(self):
        return "<BatchNorm %s: %u channels>" % (self.name, self.gamma.shape[0])

    def parameters(self):
        return [self.gamma, self.beta]

    def tensors(self):
        return [("gamma", self.gamma.data), ("beta", self.beta.data),
                ("running_mean", self.running_mean),
                ("running_var", self.running_var)]

    def forward(self, x, training, detached=False):
        gamma, beta = self.gamma, self.beta
        if detached:
            gamma, beta = gamma.detach(), beta.detach()
        return batch_norm(x, gamma, beta, self.running_mean, self.running_var,
                          training, self.momentum, self.eps)

    def select(self, channels):
        return BatchNorm(len(channels), self.name, self.gamma.data[channels],
                         self.beta.data[channels], self.running_mean[channels],
                         self.running_var[channels], self.momentum, self.eps)

    def copy(self):
        return self.select(np.arange(self.gamma.shape[0]))


class Head(object):
    """The classifier: a linear map with bias, always trained."""

    def __init__(self, weight, bias, name):
        self.name = name
        self.weight = Tensor(weight, requires_grad=True, name=name + ".weight")
        self.bias = Tensor(bias, requires_grad=True, name=name + ".bias")

    def __repr__(self):
        return "<Head %s: %ux%u>" % ((self.name,) + self.weight.shape)

    def parameters(self):
        return [self.weight, self.bias]

    def tensors(self):
        return [("weight", self.weight.data), ("bias", self.bias.data)]

    def forward(self, x, detached=False):
        weight, bias = self.weight, self.bias
        if detached:
            weight, bias = weight.detach(), bias.detach()
        return add(matmul(x, transpose(weight)), bias)

    def select(self, cols):
        return Head(self.weight.data[:, cols], self.bias.data, self.name)

    def copy(self):
        return Head(self.weight.data, self.bias.data, self.name)


class Network(object):
    """
    A network instance: per-layer parameter objects keyed by layer name,
    the channel masks, and the training method.

    Networks should be obtained with :func:`build`, :meth:`adapt`,
    :meth:`fuse` or by loading a checkpoint.

    """
    def __init__(self, manifest, layers, method="finetune", masks=None):
        if method not in METHODS:
            raise NetworkError("unknown method %r" % method)
        self.manifest = manifest
        self.layers = OrderedDict(layers)
        self.method = method
        self.masks = masks if masks is not None else ChannelMaskSet(manifest)
        self.training = True
        for spec in manifest:
            if spec.kind in ("batchnorm", "head") or spec.weighted:
                if spec.name not in self.layers:
                    raise NetworkError("no parameters for layer %s" % spec.name)

    def __repr__(self):
        return "<Network %s %s>" % (self.manifest.name, self.method)

    @property
    def adapted(self):
        return self.method != "finetune"

    def ranks(self):
        """Rank of each low-rank layer, by layer name."""
        return OrderedDict((name, layer.rank) for name, layer in self.layers.items()
                           if isinstance(layer, (SploraLayer, LoraLayer)))

    def weighted_layers(self):
        for spec in self.manifest.weighted_layers():
            yield spec, self.layers[spec.name]

    def parameters(self):
        """Trainable tensors in manifest order."""
        out = []
        for spec in self.manifest:
            layer = self.layers.get(spec.name)
            if layer is not None:
                out.extend(layer.parameters())
        return out

    def copy(self):
        net = Network(self.manifest,
                      [(name, layer.copy()) for name, layer in self.layers.items()],
                      self.method, self.masks.copy())
        net.training = self.training
        return net

    def apply_masks(self, masks=None):
        """
        Install a new :class:`~spad.masks.ChannelMaskSet` (or re-apply the
        current one) and push its row and column masks to every weighted
        layer.

        """
        if masks is not None:
            if masks.manifest.digest() != self.manifest.digest():
                raise NetworkError("masks were built for manifest %s" %
                                   masks.manifest.name)
            self.masks = masks
        for name, m_row, m_col in self.masks.layer_masks():
            self.layers[name].apply_masks(m_row, m_col)

    def adapt(self, method, rank, seed=None, rng=None,
              init_range=adapter.DEFAULT_INIT_RANGE):
        """
        Return an adapter network whose source weights are this network's
        fused weights. Adaptable layers narrower than *rank* get the widest
        rank they support; other weighted layers are frozen.

        :param method: "splora" or "lora"
        :raises: NetworkError

        """
        if self.adapted:
            raise NetworkError("network is already in %s mode" % self.method)
        if method not in ("splora", "lora"):
            raise NetworkError("can not adapt with method %r" % method)
        if method == "lora" and self.masks.alive_channels() != \
                self.masks.prunable_channels():
            raise NetworkError("LoRA adapters can not be put on a pruned network")
        if rng is None:
            rng = get_rng(seed)
        init = adapter.init_splora if method == "splora" else adapter.init_lora

        layers = OrderedDict()
        for spec in self.manifest:
            layer = self.layers.get(spec.name)
            if layer is None:
                continue
            if not spec.weighted:
                layers[spec.name] = layer.copy()
                continue
            W_s = layer.effective_weight()
            if spec.adaptable:
                r = min(rank, spec.in_channels, spec.out_channels)
                if r != rank:
                    logger.debug("%s: rank %u clamped to %u", spec.name, rank, r)
                new = init(W_s, r, rng=rng, init_range=init_range, kind=spec.kind,
                           stride=spec.stride, padding=spec.padding, name=spec.name)
            else:
                new = DenseLayer(W_s, spec.kind, spec.stride, spec.padding,
                                 trainable=False, name=spec.name)
            layers[spec.name] = new

        net = Network(self.manifest, layers, method, self.masks.copy())
        if method == "splora":
            net.apply_masks()
        logger.info("adapted %s with %s rank %u: %u learned parameters",
                    self.manifest.name, method, rank, net.count_params().total)
        return net

    def _op(self, spec, fused, weights, detached, training):
        name = spec.name
        layer = self.layers.get(name)

        if spec.weighted:
            def op(x):
                if weights is not None and name in weights:
                    w = weights[name]
                elif fused or detached:
                    w = Tensor(layer.effective_weight())
                else:
                    w = layer.weight_tensor()
                return layer.forward(x, w)
            return op

        if spec.kind == "batchnorm":
            mask = self.masks.node_mask(name)

            def op(x):
                y = layer.forward(x, training, detached or fused)
                if mask.all():
                    return y
                view = (1, -1) + (1,) * (x.ndim - 2)
                return mul(y, Tensor(mask.astype(np.float64).reshape(view)))
            return op

        if spec.kind == "head":
            return lambda x: layer.forward(x, detached or fused)
        if spec.kind == "relu":
            return relu
        if spec.kind == "pool":
            return global_avg_pool
        if spec.kind == "add":
            return lambda *xs: reduce(add, xs)
        raise NetworkError("%s: no operation for kind %r" % (name, spec.kind))

    def graph(self, fused=False, weights=None, detached=False, training=None):
        """
        The computation description of this network.

        :param fused: use constant fused weights instead of the trainable
                      factors (nothing is recorded for parameters)
        :param weights: optional mapping of layer name to weight Tensor,
                        overriding the fused weights of those layers
        :param detached: use constant copies of every parameter
        :param training: batch statistics (True) or running ones (False);
                         defaults to :attr:`training`

        """
        if training is None:
            training = self.training
        return [Node(spec.name, self._op(spec, fused, weights, detached, training),
                     spec.inputs) for spec in self.manifest]

    def _input(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if tuple(x.shape[1:]) != self.manifest.input_shape:
            raise NetworkError("input of shape %r for a network expecting (N,) + %r" %
                               (x.shape, self.manifest.input_shape))
        return x

    def forward(self, x, training=None, tape=None, fused=False, weights=None,
                detached=False):
        """Return the logits for a batch x."""
        return forward_graph(self._input(x),
                             self.graph(fused, weights, detached, training), tape)

    def loss(self, x, y, tape=None, **kwargs):
        """Mean softmax cross-entropy of the logits for x against labels y."""
        if tape is None:
            tape = Tape()
        logits = self.forward(x, tape=tape, **kwargs)
        with tape:
            return softmax_cross_entropy(logits, y)

    def predict(self, x, batch_size=256):
        """Predicted classes for x, in evaluation mode."""
        out = []
        for start in range(0, len(x), batch_size):
            logits = self.forward(x[start:start + batch_size], training=False,
                                  fused=True)
            out.append(np.argmax(logits.data, axis=1))
        return np.concatenate(out)

    def evaluate(self, dataset, batch_size=256):
        """Classification accuracy on a :class:`~spad.data.Dataset`."""
        return float(np.mean(self.predict(dataset.x, batch_size) == dataset.y))

    def fuse(self):
        """
        Return a compacted standalone network: every weighted layer holds
        only its fused surviving rows and columns, and batch norms and the
        head keep only surviving channels. The result carries no adapter
        structures and no masks.

        """
        specs, layers = [], OrderedDict()
        for spec in self.manifest:
            out_alive = np.flatnonzero(self.masks.node_mask(spec.name))
            in_alive = np.flatnonzero(self.masks.node_mask(spec.inputs[0]))
            if spec.kind == "head":
                out_alive = np.arange(spec.out_channels)
            specs.append(spec.for_channels(len(in_alive), len(out_alive)))
            layer = self.layers.get(spec.name)
            if spec.weighted:
                layers[spec.name] = adapter.compact(layer)
            elif spec.kind == "batchnorm":
                layers[spec.name] = layer.select(out_alive)
            elif spec.kind == "head":
                layers[spec.name] = layer.select(in_alive)
        manifest = self.manifest.renamed(self.manifest.name + "-fused", specs)
        net = Network(manifest, layers, "finetune")
        net.training = self.training
        return net

    def count_params(self):
        return count_params(self.manifest, self.method, self.ranks(), self.masks)

    def count_flops(self):
        return count_flops(self.manifest, self.masks)

    def tensors(self):
        """
        Yield ``(name, array)`` for the normalisation and head tensors, which
        are learned in every mode.

        """
        for spec in self.manifest:
            if spec.kind in ("batchnorm", "head"):
                for suffix, arr in self.layers[spec.name].tensors():
                    yield "%s.%s" % (spec.name, suffix), arr

    def weights_digest(self):
        """SHA-256 over the source (or dense) weights of weighted layers."""
        h = hashlib.sha256()
        for spec, layer in self.weighted_layers():
            data = layer.W_s if hasattr(layer, "W_s") else layer.weight.data
            h.update(np.ascontiguousarray(data).tobytes())
        return h.hexdigest()


def build(manifest, seed):
    """
    Build a fine-tunable network for a manifest. Linear, conv2d and head
    weights are drawn from a He (fan-in) normal distribution; head biases
    and batch-norm shifts start at zero, batch-norm scales at one.

    :raises: NetworkError if seed is None

    """
    if seed is None:
        raise NetworkError("a seed is required to build a network")
    rng = get_rng(seed)
    layers = OrderedDict()
    for spec in manifest:
        shape = spec.weight_shape()
        if shape is not None:
            weight = rng.normal(0.0, np.sqrt(2.0 / spec.fan_in()), shape)
        if spec.weighted:
            layers[spec.name] = DenseLayer(weight, spec.kind, spec.stride,
                                           spec.padding, name=spec.name)
        elif spec.kind == "head":
            layers[spec.name] = Head(weight, np.zeros(spec.out_channels), spec.name)
        elif spec.kind == "batchnorm":
            layers[spec.name] = BatchNorm(spec.out_channels, spec.name)
    return Network(manifest, layers, "finetune")


def _alive(masks, name):
    return int(np.count_nonzero(masks.node_mask(name)))


def count_params(manifest, method="finetune", rank=None, masks=None):
    """
    Count learned parameters.

    In ``finetune`` mode every surviving weight is learned. In adapter
    modes each adaptable layer learns ``r * (rows + cols)`` factor entries
    (``splora`` counts surviving rows and columns, ``lora`` all of them)
    and other weighted layers are frozen. Batch-norm scales and shifts and
    the head are learned in every mode.

    :param rank: an int, or a mapping of layer name to rank
    :param masks: a :class:`~spad.masks.ChannelMaskSet`; all-ones if omitted
    :returns: ParamCount(per_layer, total)

    """
    if method not in METHODS:
        raise NetworkError("unknown method %r" % method)
    if masks is None:
        masks = ChannelMaskSet(manifest)
    elif masks.manifest.digest() != manifest.digest():
        raise NetworkError("masks were built for manifest %s" % masks.manifest.name)

    per_layer = OrderedDict()
    for spec in manifest:
        if spec.weighted:
            rows, cols = _alive(masks, spec.name), _alive(masks, spec.inputs[0])
            if method == "finetune":
                count = rows * cols * (spec.kernel or 1) ** 2
            elif not spec.adaptable:
                count = 0
            else:
                if hasattr(rank, "get"):
                    r = rank.get(spec.name)
                elif rank is not None:
                    # same clamp as Network.adapt
                    r = min(rank, spec.in_channels, spec.out_channels)
                else:
                    r = None
                if r is None:
                    raise NetworkError("no rank for adapted layer %s" % spec.name)
                if method == "lora":
                    rows, cols = spec.out_channels, spec.in_channels
                count = r * (rows + cols)
        elif spec.kind == "batchnorm":
            count = 2 * _alive(masks, spec.name)
        elif spec.kind == "head":
            count = (_alive(masks, spec.inputs[0]) + 1) * spec.out_channels
        else:
            continue
        per_layer[spec.name] = count
    return ParamCount(per_layer, sum(per_layer.values()))


def layer_flops(manifest, masks=None, input_shape=None):
    """
    Yield ``(layer name, FLOPs)`` for every linear, conv2d and head layer of
    a single forward pass: ``2*k*k*c_in*c_out*H_out*W_out`` for
    convolutions and ``2*n*m`` for linear maps, using surviving channels.

    """
    if input_shape is not None and tuple(input_shape) != manifest.input_shape:
        manifest = ArchitectureManifest(manifest.name, input_shape,
                                        manifest.num_classes, manifest.layers,
                                        manifest.residual_groups)
        masks = None if masks is None else ChannelMaskSet(manifest, masks.masks)
    if masks is None:
        masks = ChannelMaskSet(manifest)
    for spec in manifest:
        if spec.kind not in WEIGHTED_KINDS + ("head",):
            continue
        rows = spec.out_channels if spec.kind == "head" else _alive(masks, spec.name)
        cols = _alive(masks, spec.inputs[0])
        flops = 2 * rows * cols
        if spec.kind == "conv2d":
            _, h, w = manifest.shape(spec.name)
            flops *= spec.kernel ** 2 * h * w
        yield spec.name, flops


def count_flops(manifest, masks=None, input_shape=None):
    """Total FLOPs of one forward pass; see :func:`layer_flops`."""
    return sum(flops for _, flops in layer_flops(manifest, masks, input_shape))
