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
Channel masks over the coupling groups of a manifest.

There is one binary mask per coupling group. The row mask of a layer is the
mask of the group owning its output channels; its column mask is the mask
of the group owning the channels of its input.

>>> from spad.manifest import for_name
>>> from spad.masks import ChannelMaskSet
>>> masks = ChannelMaskSet(for_name("cnn4"))
>>> masks
<ChannelMaskSet cnn4: 144/144 channels alive>
>>> masks.prune(0, 3)
>>> int(masks.row_mask("conv1").sum()), int(masks.col_mask("conv2").sum())
(15, 15)
>>> int(masks.col_mask("conv1").sum())
3
>>> round(masks.channel_density(), 4)
0.9931

"""

import numpy as np


class PruneError(ValueError):
    """Raised when channels can not be pruned as requested."""


class ChannelMaskSet(object):
    """
    Binary channel masks, one per coupling group of *manifest*.

    :param masks: optional list of per-group masks; all-ones by default

    """
    def __init__(self, manifest, masks=None):
        self.manifest = manifest
        self.groups = manifest.coupling_groups()
        if masks is None:
            self.masks = [np.ones(g.channels, dtype=bool) for g in self.groups]
        else:
            masks = list(masks)
            if len(masks) != len(self.groups):
                raise PruneError("%u masks for %u coupling groups" %
                                 (len(masks), len(self.groups)))
            self.masks = []
            for g, mask in zip(self.groups, masks):
                self.masks.append(self._checked(g, mask))

    @staticmethod
    def _checked(group, mask):
        mask = np.asarray(mask)
        if mask.shape != (group.channels,):
            raise PruneError("group %s: mask of shape %r for %u channels" %
                             (group.name, mask.shape, group.channels))
        if not np.all((mask == 0) | (mask == 1)):
            raise PruneError("group %s: mask is not binary" % group.name)
        if not group.prunable and not mask.all():
            raise PruneError("group %s can not be pruned" % group.name)
        return mask.astype(bool)

    @classmethod
    def uniform(cls, manifest, density):
        """
        Masks keeping the first ``round(channels * density)`` channels (at
        least one) of every prunable group.

        """
        if not 0 < density <= 1:
            raise PruneError("density must lie in (0, 1], got %r" % density)
        out = cls(manifest)
        for g in out.groups:
            if g.prunable:
                keep = max(1, int(round(g.channels * density)))
                out.masks[g.index][keep:] = False
        return out

    def __repr__(self):
        return "<ChannelMaskSet %s: %u/%u channels alive>" % (
            self.manifest.name, self.alive_channels(), self.prunable_channels())

    def __eq__(self, other):
        return (isinstance(other, ChannelMaskSet) and
                self.manifest.digest() == other.manifest.digest() and
                all(np.array_equal(a, b) for a, b in zip(self.masks, other.masks)))

    def __ne__(self, other):
        return not self == other

    def copy(self):
        return self.__class__(self.manifest, [m.copy() for m in self.masks])

    def group_mask(self, index):
        return self.masks[index]

    def set_group_mask(self, index, mask):
        self.masks[index] = self._checked(self.groups[index], mask)

    def node_mask(self, name):
        """Mask over the output channels of a layer (or "input")."""
        source = self.manifest.channel_source(name)
        if source is None:
            return np.ones(self.manifest.shape(name)[0], dtype=bool)
        return self.masks[source]

    def row_mask(self, name):
        return self.node_mask(name)

    def col_mask(self, name):
        return self.node_mask(self.manifest.layer(name).inputs[0])

    def prune(self, group, channel):
        g = self.groups[group]
        if not g.prunable:
            raise PruneError("group %s can not be pruned" % g.name)
        self.masks[group][channel] = False

    def alive(self, group):
        return int(np.count_nonzero(self.masks[group]))

    def prunable_channels(self):
        return sum(g.channels for g in self.groups if g.prunable)

    def alive_channels(self):
        return sum(self.alive(g.index) for g in self.groups if g.prunable)

    def channel_density(self):
        """Surviving fraction of the channels of prunable groups."""
        total = self.prunable_channels()
        if not total:
            return 1.0
        return self.alive_channels() / total

    def weight_density(self):
        """Surviving fraction of the weights of linear and conv2d layers."""
        total = alive = 0
        for spec in self.manifest.weighted_layers():
            taps = (spec.kernel or 1) ** 2
            total += spec.in_channels * spec.out_channels * taps
            alive += (int(self.row_mask(spec.name).sum()) *
                      int(self.col_mask(spec.name).sum()) * taps)
        return alive / total

    def layer_masks(self):
        """Yield ``(layer name, row mask, column mask)`` for weighted layers."""
        for spec in self.manifest.weighted_layers():
            yield spec.name, self.row_mask(spec.name), self.col_mask(spec.name)
