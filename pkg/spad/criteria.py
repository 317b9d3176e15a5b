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
Channel saliency criteria and the channel score table.

A :class:`Criterion` names a scoring rule and a per-layer normalisation:

  ========= ============================================== ===============
  kind      score of an output channel                     normalisation
  ========= ============================================== ===============
  weight    L_p norm of the channel's fused weights (p=1)  none
  magnitude mean absolute fused weight                     none
  gradient  mean absolute loss gradient of fused weights   none
  taylor    abs(mean over batch of activation * grad)      l2_per_layer
  lrp       epsilon-rule relevance through the channel     l1_per_layer
  ========= ============================================== ===============

Scores are always computed on fused weights, so adapter networks are scored
exactly like the fine-pruned networks they stand for.

>>> import numpy as np
>>> from spad.criteria import weight_norm_scores, taylor_saliency, normalize_scores
>>> weight_norm_scores(np.array([[1.0, -1.0], [3.0, 0.0]])).tolist()
[2.0, 3.0]
>>> s = taylor_saliency(np.array([[1.0, 2.0]]), np.array([[0.5, -0.5]]))
>>> s.tolist()
[0.5, 1.0]
>>> np.round(normalize_scores(s, "l2_per_layer"), 3).tolist()
[0.447, 0.894]

"""

import logging
from collections import OrderedDict, namedtuple

import numpy as np

from .compat import parallel_map
from .tensor import Tape, Tensor, backward, forward_graph, mul, reduce_sum

logger = logging.getLogger(__name__)

CRITERIA = ("weight", "magnitude", "gradient", "taylor", "lrp")

NORMALIZATIONS = ("none", "l2_per_layer", "l1_per_layer")

CRITERION_IDS = {"none": 0, "weight": 1, "magnitude": 2, "gradient": 3,
                 "taylor": 4, "lrp": 5}

_DEFAULT_NORMALIZATION = {"taylor": "l2_per_layer", "lrp": "l1_per_layer"}

_ALIASES = {"weight_norm": "weight"}

SCORING_CHUNK = 64

DEFAULT_EPSILON = 1e-6


class CriterionError(ValueError):
    """Raised for unknown criteria or normalisations."""


class ScoringError(ValueError):
    """Raised when channels can not be scored with the given inputs."""


class LrpError(ValueError):
    """Raised when relevance can not be propagated through a layer."""


class Criterion(object):
    """
    A channel scoring rule.

    :param kind: one of weight (alias weight_norm), magnitude, gradient,
                 taylor, lrp
    :param normalization: none, l2_per_layer or l1_per_layer; defaults to
                          l2_per_layer for taylor, l1_per_layer for lrp and
                          none otherwise
    :param p: norm order for the weight criterion
    :param epsilon: stabiliser for the lrp criterion

    """
    def __init__(self, kind, normalization=None, p=1, epsilon=DEFAULT_EPSILON):
        kind = _ALIASES.get(kind, kind)
        if kind not in CRITERIA:
            raise CriterionError("unknown criterion %r (known: %s)" %
                                 (kind, ", ".join(CRITERIA)))
        if normalization is None:
            normalization = _DEFAULT_NORMALIZATION.get(kind, "none")
        if normalization not in NORMALIZATIONS:
            raise CriterionError("unknown normalization %r" % normalization)
        if epsilon <= 0:
            raise CriterionError("epsilon must be positive")
        self.kind = kind
        self.normalization = normalization
        self.p = p
        self.epsilon = epsilon

    def __repr__(self):
        return "<Criterion %s %s>" % (self.kind, self.normalization)

    def __str__(self):
        return self.kind

    def __eq__(self, other):
        return isinstance(other, Criterion) and \
            (self.kind, self.normalization, self.p, self.epsilon) == \
            (other.kind, other.normalization, other.p, other.epsilon)

    def __hash__(self):
        return hash((self.kind, self.normalization))

    @property
    def id(self):
        return CRITERION_IDS[self.kind]

    @property
    def needs_batch(self):
        return self.kind in ("gradient", "taylor", "lrp")


def for_name(name):
    if isinstance(name, Criterion):
        return name
    return Criterion(name)


def for_id(ident):
    for name, i in CRITERION_IDS.items():
        if i == ident and name != "none":
            return Criterion(name)
    return None


ScoreEntry = namedtuple("ScoreEntry", ["group", "name", "layer_index", "scores"])


class ChannelScoreTable(object):
    """
    One entry per prunable coupling group: the group index, its name, the
    manifest index of its first member and one score per channel.

    """
    def __init__(self, entries):
        self.entries = list(entries)
        self._by_group = dict((e.group, e) for e in self.entries)

    def __repr__(self):
        return "<ChannelScoreTable %u groups, %u channels>" % (
            len(self.entries), sum(len(e.scores) for e in self.entries))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, group):
        return self._by_group[group]

    def scores(self, group):
        return self._by_group[group].scores

    def scaled(self, group, factor):
        """Return a copy with one group's scores multiplied by factor."""
        return ChannelScoreTable(
            e._replace(scores=e.scores * factor) if e.group == group else e
            for e in self.entries)


def normalize_scores(scores, normalization):
    scores = np.asarray(scores, dtype=np.float64)
    if normalization == "none":
        return scores
    if normalization == "l2_per_layer":
        norm = np.sqrt(np.sum(scores ** 2))
    elif normalization == "l1_per_layer":
        norm = np.sum(np.abs(scores))
    else:
        raise CriterionError("unknown normalization %r" % normalization)
    if norm == 0:
        return scores
    return scores / norm


def weight_norm_scores(weight, p=1):
    rows = np.abs(np.asarray(weight).reshape(weight.shape[0], -1))
    return np.sum(rows ** p, axis=1) ** (1.0 / p)


def magnitude_scores(weight):
    return np.mean(np.abs(np.asarray(weight).reshape(weight.shape[0], -1)), axis=1)


def taylor_saliency(activation, grad):
    """
    ``|mean over batch (and space) of activation * grad|`` per channel, for
    NC or NCHW arrays.

    """
    prod = np.asarray(activation) * np.asarray(grad)
    axes = (0,) + tuple(range(2, prod.ndim))
    return np.abs(prod.mean(axis=axes))


def score_table(masks, layer_scores, normalization="none"):
    """
    Build a :class:`ChannelScoreTable` from raw per-layer channel scores.
    Each layer's scores are normalised on their own; a coupled group
    scores each channel with the mean over its member layers.

    :param masks: the network's :class:`~spad.masks.ChannelMaskSet`
    :param layer_scores: mapping of layer name to one score per output channel

    """
    manifest = masks.manifest
    entries = []
    for g in masks.groups:
        if not g.prunable:
            continue
        members = [normalize_scores(layer_scores[name], normalization)
                   for name in g.members if name in layer_scores]
        if not members:
            raise ScoringError("no scores for coupling group %s" % g.name)
        scores = np.mean(members, axis=0)
        if not np.all(np.isfinite(scores)):
            raise ScoringError("non-finite scores for coupling group %s" % g.name)
        entries.append(ScoreEntry(g.index, g.name, manifest.index(g.members[0]),
                                  scores))
    return ChannelScoreTable(entries)


def _batch_arrays(batch):
    if batch is None:
        return None, None
    if hasattr(batch, "x"):
        return batch.x, batch.y
    x, y = batch
    return np.asarray(x), (None if y is None else np.asarray(y))


def _prunable_layers(network):
    return [name for g in network.masks.groups if g.prunable for name in g.members]


def _gradient_pass(network, names, x, y, want):
    """
    Forward and backward one chunk on constant fused weights. Returns the
    summed per-sample quantity for each layer: weight gradients for
    ``gradient``, activation-gradient products for ``taylor``.

    """
    leaves = OrderedDict(
        (spec.name, Tensor(layer.effective_weight(), requires_grad=True))
        for spec, layer in network.weighted_layers())
    tape = Tape()
    loss = network.loss(x, y, tape=tape, training=False, weights=leaves,
                        detached=True)
    backward(loss)
    n = len(x)
    out = {}
    for name in names:
        if want == "gradient":
            out[name] = leaves[name].grad * n
        else:
            act = tape.values[name]
            prod = act.data * act.grad * n
            out[name] = prod.sum(axis=(0,) + tuple(range(2, prod.ndim)))
    return out


def _chunks(x, y, size=SCORING_CHUNK):
    return [(x[i:i + size], None if y is None else y[i:i + size])
            for i in range(0, len(x), size)]


def _summed(results):
    total = {}
    for result in results:
        for name, value in result.items():
            total[name] = total[name] + value if name in total else value
    return total


def score_channels(network, criterion, batch=None):
    """
    Score every channel of every prunable coupling group.

    The network is not modified: scoring runs in evaluation mode on
    constant copies of the fused weights.

    :param criterion: a :class:`Criterion` or criterion name
    :param batch: a Dataset or ``(x, y)`` pair; required for gradient,
                  taylor and lrp
    :returns: a :class:`ChannelScoreTable`
    :raises: ScoringError

    """
    criterion = for_name(criterion)
    names = _prunable_layers(network)
    x, y = _batch_arrays(batch)
    if criterion.needs_batch and (x is None or not len(x)):
        raise ScoringError("criterion %s needs a nonempty scoring batch" % criterion)

    if criterion.kind in ("weight", "magnitude"):
        def score(name):
            weight = network.layers[name].effective_weight()
            if criterion.kind == "weight":
                return weight_norm_scores(weight, criterion.p)
            return magnitude_scores(weight)
        raw = dict(zip(names, parallel_map(score, names)))
    elif criterion.kind in ("gradient", "taylor"):
        if y is None:
            raise ScoringError("criterion %s needs labels" % criterion)
        sums = _summed(parallel_map(
            lambda chunk: _gradient_pass(network, names, chunk[0], chunk[1],
                                         criterion.kind),
            _chunks(x, y)))
        raw = {}
        for name in names:
            if criterion.kind == "gradient":
                grad = sums[name] / len(x)
                raw[name] = magnitude_scores(grad)
            else:
                spatial = int(np.prod(network.manifest.shape(name)[1:]))
                raw[name] = np.abs(sums[name] / (len(x) * spatial))
    else:
        relevance = lrp_relevance(network, x, criterion.epsilon)
        raw = dict((name, np.abs(relevance[name])) for name in names)

    table = score_table(network.masks, raw, criterion.normalization)
    logger.debug("scored %u groups with %r", len(table), criterion)
    return table


def _stabilize(z, epsilon):
    return z + epsilon * np.where(z >= 0, 1.0, -1.0)


def lrp_epsilon_linear(a, W, R_out, epsilon=DEFAULT_EPSILON, bias=None):
    """
    Epsilon-rule relevance of the inputs of ``z = a @ W.T (+ bias)``.

    >>> import numpy as np
    >>> R = lrp_epsilon_linear(np.array([[1.0, 1.0]]), np.eye(2),
    ...                        np.array([[1.0, 1.0]]), epsilon=1e-12)
    >>> np.allclose(R, [[1.0, 1.0]])
    True

    """
    z = a @ W.T
    if bias is not None:
        z = z + bias
    s = R_out / _stabilize(z, epsilon)
    return a * (s @ W)


def _relevance_through(op, inputs, R_out, epsilon):
    leaves = [Tensor(a, requires_grad=True) for a in inputs]
    tape = Tape()
    with tape:
        z = op(*leaves)
        s = R_out / _stabilize(z.data, epsilon)
        total = reduce_sum(mul(z, Tensor(s)))
    backward(total)
    return [leaf.data * leaf.grad for leaf in leaves]


_LINEAR_RULE_KINDS = ("linear", "conv2d", "head", "batchnorm", "pool", "add")

LayerRelevance = namedtuple("LayerRelevance", ["output", "relevance", "inputs"])


def lrp_relevance(network, x, epsilon=DEFAULT_EPSILON, trace=None):
    """
    Propagate the predicted-class logit back through the network with the
    epsilon rule and return, for every linear and conv2d layer, the
    relevance of each output channel summed over space and averaged over
    the batch.

    Weighted layers, batch norm (in evaluation mode), pooling and residual
    junctions redistribute relevance in proportion to each input's
    contribution; ReLU passes it through unchanged.

    :param trace: optional dict, filled with a :class:`LayerRelevance`
                  (layer output, relevance reaching it, relevance handed to
                  each input) per layer visited
    :raises: LrpError for layer kinds without a rule

    """
    if epsilon <= 0:
        raise LrpError("epsilon must be positive")
    x = np.asarray(x, dtype=np.float64)
    nodes = network.graph(fused=True, training=False)
    tape = Tape()
    logits = forward_graph(Tensor(x), nodes, tape).data
    values = tape.values

    start = np.zeros_like(logits)
    rows = np.arange(len(logits))
    winners = np.argmax(logits, axis=1)
    start[rows, winners] = logits[rows, winners]

    specs = list(network.manifest)
    R = {specs[-1].name: start}
    channels = {}
    for node, spec in reversed(list(zip(nodes, specs))):
        r = R.pop(spec.name, None)
        if r is None:
            continue
        if spec.weighted:
            channels[spec.name] = r.reshape(r.shape[0], r.shape[1], -1).sum(axis=2).mean(axis=0)
        if spec.kind == "relu":
            shares = [r]
        elif spec.kind in _LINEAR_RULE_KINDS:
            shares = _relevance_through(node.op, [values[i].data for i in spec.inputs],
                                        r, epsilon)
        else:
            raise LrpError("layer %s: no relevance rule for kind %r" %
                           (spec.name, spec.kind))
        if trace is not None:
            trace[spec.name] = LayerRelevance(values[spec.name].data, r, shares)
        for src, share in zip(spec.inputs, shares):
            R[src] = R[src] + share if src in R else share

    for spec in network.manifest.weighted_layers():
        channels.setdefault(spec.name, np.zeros(spec.out_channels))
    return channels
