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
The SPAD container: task deltas and checkpoints.

A task delta stores what one task adds to a shared frozen base network:
channel masks, adapter factors, and normalisation and head tensors. A
checkpoint uses the same container to store a complete, self-describing
network. All values are little-endian.

Header (48 bytes)::

  magic      4s   b"SPAD"
  version    u16  1
  mode       u8   0 task delta, 1 checkpoint
  method     u8   0 finetune, 1 splora, 2 lora
  digest     32s  SHA-256 of the manifest's canonical text
  rank       u16  nominal adapter rank (0 if none)
  criterion  u8   criterion id (0 if none)
  (pad)      x
  density    f32  surviving channel fraction

followed by sections until the end of the file, each a 7-byte header
(kind u8, name length u16, payload length u32), the UTF-8 name and the
payload:

  ======== ===== ========================================================
  kind     value payload
  ======== ===== ========================================================
  MANIFEST 1     canonical manifest text (checkpoints only)
  MASKS    2     row mask then column mask of a layer, packed bitsets
                 (least significant bit first), each padded to a byte
  FACTORS  3     u32 rank, W_down (n x r) then W_up (r x m) as float32
  TENSOR   4     u8 dtype ('f' float32, 'd' float64), u8 ndim, u32 dims,
                 row-major data
  ======== ===== ========================================================

Deltas store factors and tensors as float32; checkpoints store float64.

>>> from spad.delta import TaskDelta
>>> TaskDelta.from_bytes(b"IPFX" + bytes(44))
Traceback (most recent call last):
...
spad.delta.BadMagic: not a SPAD file (magic b'IPFX')
>>> TaskDelta.from_bytes(b"SPAD\\x01\\x00")
Traceback (most recent call last):
...
spad.delta.TruncatedDelta: header needs 48 bytes, got 6

"""

import logging
import struct
from collections import OrderedDict
from io import open

import numpy as np

from . import manifest as manifest_mod
from .adapter import DenseLayer, LoraLayer, SploraLayer
from .compat import pack_bits, unpack_bits
from .criteria import for_name as criterion_for_name
from .masks import ChannelMaskSet, PruneError
from .network import BatchNorm, Head, Network

logger = logging.getLogger(__name__)

MAGIC = b"SPAD"
FORMAT_VERSION = 1

MODE_DELTA = 0
MODE_CHECKPOINT = 1

METHOD_IDS = {"finetune": 0, "splora": 1, "lora": 2}
METHOD_NAMES = dict((v, k) for k, v in METHOD_IDS.items())

SECTION_MANIFEST = 1
SECTION_MASKS = 2
SECTION_FACTORS = 3
SECTION_TENSOR = 4

_header_st = struct.Struct("<4sHBB32sHBxf")
_section_st = struct.Struct("<BHI")
_tensor_st = struct.Struct("<BB")
_rank_st = struct.Struct("<I")

_DTYPES = {ord("f"): np.dtype("<f4"), ord("d"): np.dtype("<f8")}


class SpadDecodeError(ValueError):
    """Raised when a SPAD file can not be decoded or applied."""
    code = 7


class BadMagic(SpadDecodeError):
    """Raised when a file does not start with the SPAD magic."""
    code = 3


class VersionMismatch(SpadDecodeError):
    """Raised for container versions this module does not read."""
    code = 4


class TruncatedDelta(SpadDecodeError):
    """Raised when a file ends inside a header or section."""
    code = 5


class ArchitectureMismatch(SpadDecodeError):
    """Raised when a delta was made for a different architecture."""
    code = 6


class SpadEncodeError(ValueError):
    """Raised when a network can not be stored in the requested form."""
    code = 8


def _nbytes(bits):
    return (bits + 7) // 8


class TaskDelta(object):
    """
    The decoded contents of a SPAD file.

    TaskDeltas should be obtained with :func:`extract_delta`,
    :func:`extract_checkpoint` or :meth:`from_bytes`.

    """
    def __init__(self, mode, method, digest, rank=0, criterion=0, density=1.0,
                 manifest_text=None):
        self.mode = mode
        self.method = method
        self.digest = digest
        self.rank = rank
        self.criterion = criterion
        self.density = density
        self.manifest_text = manifest_text
        self.masks = OrderedDict()
        self.factors = OrderedDict()
        self.tensors = OrderedDict()

    def __repr__(self):
        return "<TaskDelta %s %s r=%u density %.2f: %u masks, %u factors, %u tensors>" % (
            "checkpoint" if self.mode == MODE_CHECKPOINT else "delta",
            self.method, self.rank, self.density, len(self.masks),
            len(self.factors), len(self.tensors))

    def to_bytes(self):
        out = [_header_st.pack(MAGIC, FORMAT_VERSION, self.mode,
                               METHOD_IDS[self.method], self.digest,
                               self.rank, self.criterion, self.density)]

        def section(kind, name, payload):
            name = name.encode("utf-8")
            out.append(_section_st.pack(kind, len(name), len(payload)))
            out.append(name)
            out.append(payload)

        if self.manifest_text is not None:
            section(SECTION_MANIFEST, "manifest", self.manifest_text.encode("utf-8"))
        for name, (row, col) in self.masks.items():
            section(SECTION_MASKS, name, pack_bits(row) + pack_bits(col))
        for name, (down, up) in self.factors.items():
            section(SECTION_FACTORS, name,
                    _rank_st.pack(down.shape[1]) +
                    np.ascontiguousarray(down, dtype="<f4").tobytes() +
                    np.ascontiguousarray(up, dtype="<f4").tobytes())
        code = ord("d") if self.mode == MODE_CHECKPOINT else ord("f")
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            section(SECTION_TENSOR, name,
                    _tensor_st.pack(code, arr.ndim) +
                    struct.pack("<%uI" % arr.ndim, *arr.shape) +
                    np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf, manifest=None):
        """
        Decode a SPAD file. Mask and factor sections are sized from the
        manifest: the one embedded in a checkpoint, or the given one.

        :raises: SpadDecodeError or one of its subclasses

        """
        buf = bytes(buf)
        if len(buf) >= 4 and buf[:4] != MAGIC:
            raise BadMagic("not a SPAD file (magic %r)" % buf[:4])
        if len(buf) < _header_st.size:
            raise TruncatedDelta("header needs %u bytes, got %u" %
                                 (_header_st.size, len(buf)))
        (magic, version, mode, method, digest, rank, criterion,
         density) = _header_st.unpack_from(buf, 0)
        if version != FORMAT_VERSION:
            raise VersionMismatch("container version %u, expected %u" %
                                  (version, FORMAT_VERSION))
        if mode not in (MODE_DELTA, MODE_CHECKPOINT) or method not in METHOD_NAMES:
            raise SpadDecodeError("bad mode %u or method %u" % (mode, method))
        out = cls(mode, METHOD_NAMES[method], digest, rank, criterion, density)

        sections = []
        offset = _header_st.size
        while offset < len(buf):
            if offset + _section_st.size > len(buf):
                raise TruncatedDelta("section header cut at byte %u" % offset)
            kind, namelen, length = _section_st.unpack_from(buf, offset)
            offset += _section_st.size
            if offset + namelen + length > len(buf):
                raise TruncatedDelta("section at byte %u runs past the end" % offset)
            name = buf[offset:offset + namelen].decode("utf-8")
            offset += namelen
            sections.append((kind, name, buf[offset:offset + length]))
            offset += length

        for kind, name, payload in sections:
            if kind == SECTION_MANIFEST:
                out.manifest_text = payload.decode("utf-8")
        if out.manifest_text is not None:
            manifest = manifest_mod.from_text(out.manifest_text)
            if manifest.digest() != digest:
                raise ArchitectureMismatch("embedded manifest does not match digest")
        if manifest is None:
            raise SpadDecodeError("a manifest is needed to decode a task delta")
        if manifest.digest() != digest:
            raise ArchitectureMismatch("delta made for another architecture "
                                       "(digest %s, base %s)" %
                                       (digest.hex()[:12], manifest.hexdigest()[:12]))

        for kind, name, payload in sections:
            if kind == SECTION_MASKS:
                out.masks[name] = out._decode_masks(manifest, name, payload)
            elif kind == SECTION_FACTORS:
                out.factors[name] = out._decode_factors(manifest, name, payload)
            elif kind == SECTION_TENSOR:
                out.tensors[name] = out._decode_tensor(name, payload)
            elif kind != SECTION_MANIFEST:
                raise SpadDecodeError("unknown section kind %u (%s)" % (kind, name))
        return out

    @staticmethod
    def _spec(manifest, name):
        try:
            return manifest.layer(name)
        except KeyError:
            raise SpadDecodeError("section for unknown layer %s" % name)

    def _decode_masks(self, manifest, name, payload):
        spec = self._spec(manifest, name)
        n, m = spec.out_channels, spec.in_channels
        if len(payload) != _nbytes(n) + _nbytes(m):
            raise SpadDecodeError("%s: bitsets of %u bytes for %u rows and %u columns" %
                                  (name, len(payload), n, m))
        return (unpack_bits(payload[:_nbytes(n)], n),
                unpack_bits(payload[_nbytes(n):], m))

    def _decode_factors(self, manifest, name, payload):
        spec = self._spec(manifest, name)
        n, m = spec.out_channels, spec.in_channels
        if len(payload) < _rank_st.size:
            raise SpadDecodeError("%s: factor section too short" % name)
        r, = _rank_st.unpack_from(payload, 0)
        if len(payload) != _rank_st.size + 4 * r * (n + m):
            raise SpadDecodeError("%s: factor section of %u bytes for rank %u" %
                                  (name, len(payload), r))
        data = np.frombuffer(payload, dtype="<f4", offset=_rank_st.size)
        data = data.astype(np.float64)
        return data[:n * r].reshape(n, r), data[n * r:].reshape(r, m)

    def _decode_tensor(self, name, payload):
        if len(payload) < _tensor_st.size:
            raise SpadDecodeError("%s: tensor section too short" % name)
        code, ndim = _tensor_st.unpack_from(payload, 0)
        if code not in _DTYPES:
            raise SpadDecodeError("%s: unknown dtype code %r" % (name, chr(code)))
        dims_st = struct.Struct("<%uI" % ndim)
        start = _tensor_st.size + dims_st.size
        shape = dims_st.unpack_from(payload, _tensor_st.size)
        dtype = _DTYPES[code]
        if len(payload) != start + dtype.itemsize * int(np.prod(shape)):
            raise SpadDecodeError("%s: tensor data does not match shape %r" %
                                  (name, shape))
        return np.frombuffer(payload, dtype=dtype, offset=start).astype(
            np.float64).reshape(shape)


def _header(network, mode, criterion, manifest_text=None):
    ranks = network.ranks()
    if criterion is None:
        crit = 0
    else:
        crit = getattr(criterion, "id", None) or criterion_for_name(criterion).id
    return TaskDelta(mode, network.method, network.manifest.digest(),
                     max(ranks.values()) if ranks else 0, crit,
                     network.masks.channel_density(), manifest_text)


def _store_masks(delta, network):
    for name, m_row, m_col in network.masks.layer_masks():
        delta.masks[name] = (m_row, m_col)


def extract_delta(network, criterion=None):
    """
    The task delta of an adapter network: masks, factors, and the
    normalisation and head tensors.

    :raises: SpadEncodeError if the network is not in adapter mode

    """
    if not network.adapted:
        raise SpadEncodeError("task deltas need an adapter network; "
                              "save a checkpoint instead")
    delta = _header(network, MODE_DELTA, criterion)
    _store_masks(delta, network)
    for spec, layer in network.weighted_layers():
        if isinstance(layer, (SploraLayer, LoraLayer)):
            delta.factors[spec.name] = (layer.W_down.data, layer.W_up.data)
    for name, arr in network.tensors():
        delta.tensors[name] = arr
    return delta


def extract_checkpoint(network, criterion=None):
    """A self-describing float64 snapshot of any network."""
    delta = _header(network, MODE_CHECKPOINT, criterion, network.manifest.to_text())
    _store_masks(delta, network)
    for spec, layer in network.weighted_layers():
        if isinstance(layer, DenseLayer):
            suffix = "weight" if layer.trainable else "frozen"
            delta.tensors["%s.%s" % (spec.name, suffix)] = layer.weight.data
        else:
            delta.tensors[spec.name + ".source"] = layer.W_s
            delta.tensors[spec.name + ".down"] = layer.W_down.data
            delta.tensors[spec.name + ".up"] = layer.W_up.data
    for name, arr in network.tensors():
        delta.tensors[name] = arr
    return delta


def _mask_set(delta, manifest):
    masks = ChannelMaskSet(manifest)
    try:
        for name, (row, col) in delta.masks.items():
            source = manifest.channel_source(name)
            if source is not None:
                masks.set_group_mask(source, row)
    except PruneError as e:
        raise SpadDecodeError(str(e))
    for name, (row, col) in delta.masks.items():
        if not (np.array_equal(row, masks.row_mask(name)) and
                np.array_equal(col, masks.col_mask(name))):
            raise SpadDecodeError("%s: masks disagree with its coupling group" % name)
    return masks


def _set_tensors(network, tensors):
    for spec in network.manifest:
        if spec.kind not in ("batchnorm", "head"):
            continue
        layer = network.layers[spec.name]
        for suffix, current in layer.tensors():
            key = "%s.%s" % (spec.name, suffix)
            if key not in tensors:
                raise SpadDecodeError("missing tensor %s" % key)
            arr = tensors[key]
            if arr.shape != current.shape:
                raise SpadDecodeError("tensor %s has shape %r, expected %r" %
                                      (key, arr.shape, current.shape))
            current[...] = arr


def switch_task(network, delta):
    """
    Put a task delta onto an adapter network in place. Source weights are
    kept; everything the delta stores is replaced.

    :raises: SpadDecodeError or one of its subclasses

    """
    if delta.mode != MODE_DELTA:
        raise SpadDecodeError("expected a task delta, got a checkpoint")
    if delta.digest != network.manifest.digest():
        raise ArchitectureMismatch("delta made for another architecture")
    if delta.method != network.method:
        raise SpadDecodeError("%s delta on a %s network" % (delta.method, network.method))

    masks = _mask_set(delta, network.manifest)
    for spec, layer in list(network.weighted_layers()):
        if not isinstance(layer, (SploraLayer, LoraLayer)):
            continue
        if spec.name not in delta.factors:
            raise SpadDecodeError("missing factors for %s" % spec.name)
        down, up = delta.factors[spec.name]
        network.layers[spec.name] = layer.__class__(
            layer.W_s, down, up, spec.kind, spec.stride, spec.padding, name=spec.name)
    network.apply_masks(masks)
    _set_tensors(network, delta.tensors)


def load_delta(base, source):
    """
    Return a new adapter network made of base's fused weights and a task
    delta (a TaskDelta, bytes, or a path). base is not modified.

    :raises: SpadDecodeError or one of its subclasses

    """
    if base.adapted:
        raise SpadDecodeError("task deltas go onto a fine-tuned base network")
    delta = _coerce(source, base.manifest)
    if delta.digest != base.manifest.digest():
        raise ArchitectureMismatch("delta made for another architecture")
    if delta.method not in ("splora", "lora"):
        raise SpadDecodeError("task delta with method %s" % delta.method)

    cls = SploraLayer if delta.method == "splora" else LoraLayer
    layers = OrderedDict()
    for spec in base.manifest:
        layer = base.layers.get(spec.name)
        if layer is None:
            continue
        if not spec.weighted:
            layers[spec.name] = layer.copy()
        elif spec.name in delta.factors:
            down, up = delta.factors[spec.name]
            layers[spec.name] = cls(layer.effective_weight(), down, up, spec.kind,
                                    spec.stride, spec.padding, name=spec.name)
        else:
            layers[spec.name] = DenseLayer(layer.effective_weight(), spec.kind,
                                           spec.stride, spec.padding,
                                           trainable=False, name=spec.name)
    network = Network(base.manifest, layers, delta.method)
    switch_task(network, delta)
    logger.info("loaded %s delta (density %.2f) onto %s",
                delta.method, delta.density, base.manifest.name)
    return network


def load_checkpoint(source):
    """Rebuild a network from a checkpoint (TaskDelta, bytes, or path)."""
    delta = _coerce(source)
    if delta.mode != MODE_CHECKPOINT:
        raise SpadDecodeError("expected a checkpoint, got a task delta")
    manifest = manifest_mod.from_text(delta.manifest_text)

    def tensor(key):
        if key not in delta.tensors:
            raise SpadDecodeError("missing tensor %s" % key)
        return delta.tensors[key]

    layers = OrderedDict()
    for spec in manifest:
        name = spec.name
        if spec.weighted:
            geometry = (spec.kind, spec.stride, spec.padding)
            if name + ".source" in delta.tensors:
                cls = SploraLayer if delta.method == "splora" else LoraLayer
                layers[name] = cls(tensor(name + ".source"), tensor(name + ".down"),
                                   tensor(name + ".up"), *geometry, name=name)
            elif name + ".frozen" in delta.tensors:
                layers[name] = DenseLayer(tensor(name + ".frozen"), *geometry,
                                          trainable=False, name=name)
            else:
                layers[name] = DenseLayer(tensor(name + ".weight"), *geometry, name=name)
        elif spec.kind == "batchnorm":
            layers[name] = BatchNorm(spec.out_channels, name)
        elif spec.kind == "head":
            layers[name] = Head(np.zeros((spec.out_channels, spec.in_channels)),
                                np.zeros(spec.out_channels), name)
    network = Network(manifest, layers, delta.method)
    network.apply_masks(_mask_set(delta, manifest))
    _set_tensors(network, delta.tensors)
    return network


def _coerce(source, manifest=None):
    if isinstance(source, TaskDelta):
        return source
    if isinstance(source, (bytes, bytearray)):
        return TaskDelta.from_bytes(source, manifest)
    with open(source, "rb") as f:
        return TaskDelta.from_bytes(f.read(), manifest)


def save(delta, path):
    with open(path, "wb") as f:
        f.write(delta.to_bytes())


def save_delta(network, path, criterion=None):
    save(extract_delta(network, criterion), path)


def save_checkpoint(network, path, criterion=None):
    save(extract_checkpoint(network, criterion), path)


class TaskSwitcher(object):
    """
    One live adapter network on a shared base, switched between task
    deltas in place. The base network is never modified.

    """
    def __init__(self, base):
        self.base = base
        self.network = None
        self.current = None

    def __repr__(self):
        return "<TaskSwitcher %s: %s>" % (self.base.manifest.name,
                                          self.current or "no task")

    def switch(self, source):
        delta = _coerce(source, self.base.manifest)
        if self.network is None or self.network.method != delta.method:
            self.network = load_delta(self.base, delta)
        else:
            switch_task(self.network, delta)
        self.current = delta
        return self.network
