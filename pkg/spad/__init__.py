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
Structured pruning adapters for Python 3.

This module trains low-rank adapters whose factors share the channel
masks of the frozen source network they adapt, so that an adapted task can
be pruned by whole channels and fused back into a small dense network.
It holds its own reverse-mode tensor engine (:mod:`spad.tensor`), so the
only runtime dependency is numpy.

Networks are described by shape-only manifests; see :mod:`spad.manifest`
and :mod:`spad.layer` for the format, and
:func:`spad.manifest.for_name` for the manifests shipped with the module.
:func:`spad.network.build` turns a manifest into a trainable network and
:meth:`spad.network.Network.adapt` puts adapters on it (see
:mod:`spad.adapter`). Channels are scored with the criteria in
:mod:`spad.criteria` and pruned by the schedule driver in
:mod:`spad.pruning`. Task deltas and checkpoints are stored in the SPAD
container (:mod:`spad.delta`); parameter and storage accounting lives in
:mod:`spad.accounting`.

This module is made available under the terms of the
`GNU Lesser General Public License <http://www.gnu.org/licenses/lgpl.html>`_,
version 3 or, at your option, any later version.

"""

from . import tensor
from . import manifest
from . import network
from . import adapter
from . import criteria
from . import pruning
from . import delta
from . import accounting
