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
Shape-only architecture manifests.

A manifest lists the layers of a network as layer spec strings (see
:mod:`spad.layer`), the input shape and the class count, and optionally
names residual groups: producers whose output channels share one mask.
Producers feeding the same ``add`` junction are coupled automatically;
naming a residual group makes the coupling explicit and checks that its
members have equal widths.

>>> from spad.manifest import from_text
>>> m = from_text('''
... schema_version: 1
... name: mlp-4-8-2
... input_shape: 4
... num_classes: 2
... layers:
...     fc1(4/8)<linear> +adapt +prune
...     relu1(8/8)<relu>
...     head(8/2)<head>
... ''')
>>> m
<ArchitectureManifest mlp-4-8-2: 3 layers, 2 coupling groups>
>>> [str(l) for l in m]
['fc1(4/8)<linear> +adapt +prune <- input', 'relu1(8/8)<relu> <- fc1', 'head(8/2)<head> <- relu1']
>>> m.coupling_groups()[0]
<CouplingGroup 0 fc1: 8 channels prunable>
>>> m.channel_source("relu1"), m.channel_source("input")
(0, None)

The manifests shipped with spad are available by name:

>>> from spad.manifest import for_name
>>> r50 = for_name("resnet50")
>>> r50.shape("layer4.2.relu3")
(2048, 4, 4)
>>> len(r50.digest())
32

Channel arithmetic is checked edge by edge:

>>> from_text('''
... name: broken
... input_shape: 4
... num_classes: 2
... layers:
...     fc1(4/8)<linear>
...     head(4/2)<head>
... ''')
Traceback (most recent call last):
...
spad.manifest.ManifestError: <string>:7: edge head <- fc1: 8 channels feed a layer expecting 4

"""

import hashlib
import os.path
from collections import OrderedDict

from . import layer, specfile
from .specfile import SpecfileError

SCHEMA_VERSION = 1

INPUT = "input"

_bundled_dir = os.path.join(os.path.dirname(os.path.abspath(__file__)), "manifests")


class ManifestError(SpecfileError):
    """Raised when a manifest is malformed or structurally inconsistent."""


class CouplingGroup(object):
    """
    A set of producer layers whose output channels share one mask. Groups
    that include a non-prunable layer, or that are joined to the network
    input by a residual junction, can not be pruned.

    """
    def __init__(self, index, name, members, channels, prunable):
        self.index = index
        self.name = name
        self.members = tuple(members)
        self.channels = channels
        self.prunable = prunable

    def __repr__(self):
        return "<CouplingGroup %u %s: %u channels%s>" % (
            self.index, self.name, self.channels,
            " prunable" if self.prunable else "")


class _UnionFind(object):
    def __init__(self):
        self.parent = {}

    def find(self, key):
        self.parent.setdefault(key, key)
        while self.parent[key] != key:
            self.parent[key] = self.parent[self.parent[key]]
            key = self.parent[key]
        return key

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


class ArchitectureManifest(object):
    """
    An ordered list of :class:`~spad.layer.LayerSpec` with the network
    input shape, the class count and the residual groups.

    :param layers: iterable of LayerSpec; missing input lists default to
                   the preceding layer
    :param residual_groups: mapping of group name to member layer names
    :param lines: optional mapping of layer name to source line, for errors
    :raises: ManifestError

    """
    def __init__(self, name, input_shape, num_classes, layers,
                 residual_groups=None, schema_version=SCHEMA_VERSION,
                 source=None, lines=None):
        self.name = name
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.schema_version = schema_version
        self.residual_groups = OrderedDict(
            (k, tuple(v)) for k, v in (residual_groups or {}).items())
        self._source = source
        self._lines = lines or {}

        self.layers = []
        self._index = {}
        previous = INPUT
        for spec in layers:
            if not spec.inputs:
                spec = spec.with_inputs((previous,))
            self.layers.append(spec)
            previous = spec.name

        self._validate()

    def _fail(self, msg, name=None):
        return ManifestError(msg, self._lines.get(name), self._source)

    def _validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise self._fail("unsupported schema_version %r" % self.schema_version)
        if len(self.input_shape) not in (1, 3) or min(self.input_shape) <= 0:
            raise self._fail("input_shape must be C or C H W, got %r" %
                             (self.input_shape,))
        if not self.layers:
            raise self._fail("manifest has no layers")

        self._shapes = {INPUT: self.input_shape}
        consumed = set()
        for i, spec in enumerate(self.layers):
            if spec.name == INPUT or spec.name in self._index:
                raise self._fail("duplicate layer name %r" % spec.name, spec.name)
            self._index[spec.name] = i
            for src in spec.inputs:
                if src not in self._shapes:
                    raise self._fail("edge %s <- %s: %s is not defined before %s" %
                                     (spec.name, src, src, spec.name), spec.name)
                consumed.add(src)
            if spec.kind == "add" and len(spec.inputs) < 2:
                raise self._fail("%s: add layers need at least two inputs" %
                                 spec.name, spec.name)
            self._shapes[spec.name] = self._out_shape(spec)

        for spec in self.layers[:-1]:
            if spec.name not in consumed:
                raise self._fail("output of %s is never used" % spec.name, spec.name)
        last = self.layers[-1]
        if last.out_channels != self.num_classes:
            raise self._fail("last layer %s has %u outputs for %u classes" %
                             (last.name, last.out_channels, self.num_classes),
                             last.name)

        self._couple()
        if self._source_of[last.name] is not None and \
                self._groups[self._source_of[last.name]].prunable:
            raise self._fail("output channels of %s must not be prunable" %
                             last.name, last.name)

    def _out_shape(self, spec):
        shapes = [self._shapes[src] for src in spec.inputs]
        for src, shape in zip(spec.inputs, shapes):
            if shape[0] != spec.in_channels:
                raise self._fail("edge %s <- %s: %u channels feed a layer expecting %u" %
                                 (spec.name, src, shape[0], spec.in_channels),
                                 spec.name)
        shape = shapes[0]
        if spec.kind == "conv2d":
            if len(shape) != 3:
                raise self._fail("edge %s <- %s: conv2d needs C H W input" %
                                 (spec.name, spec.inputs[0]), spec.name)
            h, w = [(x + 2 * spec.padding - spec.kernel) // spec.stride + 1
                    for x in shape[1:]]
            if h <= 0 or w <= 0:
                raise self._fail("%s: kernel does not fit a %ux%u input" %
                                 (spec.name, shape[1], shape[2]), spec.name)
            return (spec.out_channels, h, w)
        if spec.kind in ("linear", "head"):
            if len(shape) != 1:
                raise self._fail("edge %s <- %s: %s needs flat input, got %r" %
                                 (spec.name, spec.inputs[0], spec.kind, shape),
                                 spec.name)
            return (spec.out_channels,)
        if spec.kind == "pool":
            if len(shape) != 3:
                raise self._fail("edge %s <- %s: pool needs C H W input" %
                                 (spec.name, spec.inputs[0]), spec.name)
            return (spec.out_channels,)
        if spec.kind == "add":
            for src, other in zip(spec.inputs[1:], shapes[1:]):
                if other != shape:
                    raise self._fail("edge %s <- %s: shape %r does not match %r" %
                                     (spec.name, src, other, shape), spec.name)
        return shape

    def _couple(self):
        uf = _UnionFind()
        fixed = set([INPUT])
        source = {INPUT: INPUT}
        for spec in self.layers:
            if spec.weight_shape() is not None:
                source[spec.name] = uf.find(spec.name)
                if not spec.prunable:
                    fixed.add(spec.name)
            elif spec.kind == "add":
                for src in spec.inputs[1:]:
                    uf.union(source[spec.inputs[0]], source[src])
                source[spec.name] = source[spec.inputs[0]]
            else:
                source[spec.name] = source[spec.inputs[0]]

        for gname, members in self.residual_groups.items():
            widths = set()
            for member in members:
                spec = self._layer_or_none(member)
                if spec is None or not spec.weighted:
                    raise self._fail("residual group %s: %s is not a linear or "
                                     "conv2d layer" % (gname, member))
                widths.add(spec.out_channels)
                uf.union(members[0], member)
            if len(widths) > 1:
                raise self._fail("residual group %s mixes widths %s" %
                                 (gname, " and ".join(str(w) for w in sorted(widths))))

        fixed_roots = set(uf.find(k) for k in fixed)
        named = {}
        for gname, members in self.residual_groups.items():
            named.setdefault(uf.find(members[0]), gname)

        self._groups = []
        by_root = {}
        for spec in self.layers:
            if spec.weight_shape() is None:
                continue
            root = uf.find(spec.name)
            if root == uf.find(INPUT):
                continue
            if root not in by_root:
                by_root[root] = len(self._groups)
                self._groups.append([named.get(root, spec.name), [], spec.out_channels,
                                     root not in fixed_roots])
            group = self._groups[by_root[root]]
            if group[2] != spec.out_channels:
                raise self._fail("%s is coupled to %s but has %u channels, not %u" %
                                 (spec.name, group[1][0], spec.out_channels, group[2]),
                                 spec.name)
            group[1].append(spec.name)
        self._groups = [CouplingGroup(i, *g) for i, g in enumerate(self._groups)]

        self._source_of = {}
        for name, src in source.items():
            root = uf.find(src)
            self._source_of[name] = by_root.get(root)

    def _layer_or_none(self, name):
        i = self._index.get(name)
        return None if i is None else self.layers[i]

    def __repr__(self):
        return "<ArchitectureManifest %s: %u layers, %u coupling groups>" % (
            self.name, len(self.layers), len(self._groups))

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __eq__(self, other):
        return isinstance(other, ArchitectureManifest) and \
            self.to_text() == other.to_text()

    def __hash__(self):
        return hash(self.to_text())

    def layer(self, name):
        spec = self._layer_or_none(name)
        if spec is None:
            raise KeyError(name)
        return spec

    def index(self, name):
        return self._index[name]

    def weighted_layers(self):
        """Linear and conv2d layers, in manifest order."""
        return [spec for spec in self.layers if spec.weighted]

    def shape(self, name):
        """Per-sample output shape of a layer (or of the network input)."""
        return self._shapes[name]

    def coupling_groups(self):
        return list(self._groups)

    def channel_source(self, name):
        """
        Index of the coupling group that owns the channels of a layer's
        output, or None when they come straight from the network input.

        """
        return self._source_of[name]

    def to_text(self):
        """Canonical structured-text form; every input list is explicit."""
        pairs = [("schema_version", self.schema_version),
                 ("name", self.name),
                 ("input_shape", " ".join(str(x) for x in self.input_shape)),
                 ("num_classes", self.num_classes),
                 ("layers", [str(spec) for spec in self.layers])]
        if self.residual_groups:
            pairs.append(("residual_groups",
                          ["%s: %s" % (k, " ".join(v))
                           for k, v in self.residual_groups.items()]))
        return specfile.dump(pairs)

    def digest(self):
        """SHA-256 of the canonical text form."""
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()

    def hexdigest(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def renamed(self, name, layers=None):
        """Return a manifest with a new name, optionally with replaced layers."""
        return ArchitectureManifest(name, self.input_shape, self.num_classes,
                                    layers if layers is not None else self.layers,
                                    self.residual_groups, self.schema_version)


def from_text(text, source=None):
    """
    Parse a manifest from structured text.

    :raises: ManifestError

    """
    try:
        entries = specfile.parse(text, source)
    except SpecfileError as e:
        raise ManifestError(e.msg, e.lineno, e.source)

    def required(key):
        if key not in entries:
            raise ManifestError("missing key %r" % key, None, source)
        return entries[key]

    try:
        version = entries["schema_version"].int() if "schema_version" in entries \
            else SCHEMA_VERSION
        name = required("name").value
        input_shape = required("input_shape").ints()
        num_classes = required("num_classes").int()
    except SpecfileError as e:
        raise ManifestError(e.msg, e.lineno, e.source)

    specs = []
    lines = {}
    for lineno, text in (required("layers").items or []):
        try:
            spec = layer.for_spec(text)
        except layer.LayerSpecError as e:
            raise ManifestError(str(e), lineno, source)
        lines.setdefault(spec.name, lineno)
        specs.append(spec)

    groups = OrderedDict()
    if "residual_groups" in entries:
        for lineno, text in (entries["residual_groups"].items or []):
            gname, sep, members = text.partition(":")
            if not sep or not members.split():
                raise ManifestError("expected 'group: member member ...', got %r" %
                                    text, lineno, source)
            groups[gname.strip()] = members.split()

    return ArchitectureManifest(name, input_shape, num_classes, specs, groups,
                                version, source, lines)


def from_file(filename):
    with open(filename, encoding="utf-8") as f:
        return from_text(f.read(), source=filename)


def bundled_names():
    """Names of the manifests shipped with spad."""
    return sorted(os.path.splitext(f)[0] for f in os.listdir(_bundled_dir)
                  if f.endswith(".manifest"))


def for_name(name):
    """
    Load a manifest by bundled name (``mlp``, ``cnn4``, ``resnet18``,
    ``resnet50``) or by path.

    """
    if os.path.exists(name):
        return from_file(name)
    path = os.path.join(_bundled_dir, name + ".manifest")
    if not os.path.exists(path):
        raise ManifestError("no manifest named %r (bundled: %s)" %
                            (name, ", ".join(bundled_names())))
    return from_file(path)
