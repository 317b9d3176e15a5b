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
Learned-parameter accounting: trade-off curves of learned weight fraction
against weight density, Table-style parameter and FLOP reports, and the
storage model for many tasks sharing one source network.

For one n x m weight whose rows and columns are pruned to fractions
``rho_r`` and ``rho_c`` (density ``d = rho_r * rho_c``), the fraction of
``n * m`` entries a task has to learn is

  ========= =================================
  method    learned fraction
  ========= =================================
  finetune  d
  lora      r * (n + m) / (n * m)
  splora    r * (rho_r * n + rho_c * m) / (n * m)
  ========= =================================

>>> from spad.accounting import tradeoff_curve, storage_breakeven
>>> p, = tradeoff_curve(768, 3072, 32, "splora", [1.0])
>>> round(p.learned_fraction, 5)
0.05208
>>> [round(p.learned_fraction, 2) for p in tradeoff_curve(768, 3072, 32, "finetune", [0.3, 0.5])]
[0.3, 0.5]
>>> [storage_breakeven(d) for d in (0.3, 1.0, 0.1)]
[4, 2, 11]

"""

import csv
import logging
import math
from collections import namedtuple

import numpy as np

from .network import METHODS, count_flops, count_params

logger = logging.getLogger(__name__)


class AccountingError(ValueError):
    """Raised for out-of-range sizes, ranks or densities."""


TradeoffPoint = namedtuple("TradeoffPoint", ["method", "density", "learned_fraction"])


def symmetric_retention(density):
    """Equal row and column retention: ``sqrt(density)`` on each side."""
    side = math.sqrt(density)
    return side, side


def tradeoff_curve(n, m, r, method, densities, retention=None):
    """
    Learned weight fraction of one n x m layer at each density.

    :param retention: callable mapping a density to the kept row and
                      column fractions; :func:`symmetric_retention` by
                      default
    :returns: a list of :class:`TradeoffPoint`
    :raises: AccountingError

    """
    if min(n, m) < 1 or (method != "finetune" and not 1 <= r <= min(n, m)):
        raise AccountingError("rank %r does not fit a %rx%r layer" % (r, n, m))
    if method not in METHODS:
        raise AccountingError("unknown method %r" % method)
    if retention is None:
        retention = symmetric_retention

    points = []
    for density in densities:
        if not 0 < density <= 1:
            raise AccountingError("density must lie in (0, 1], got %r" % density)
        if method == "finetune":
            learned = density
        elif method == "lora":
            learned = r * (n + m) / (n * m)
        else:
            rho_r, rho_c = retention(density)
            learned = r * (rho_r * n + rho_c * m) / (n * m)
        points.append(TradeoffPoint(method, density, learned))
    return points


def write_curve_csv(points, f):
    """Write points as CSV with columns method, density, learned_fraction."""
    writer = csv.writer(f, lineterminator="\n")
    writer.writerow(TradeoffPoint._fields)
    for p in points:
        writer.writerow((p.method, "%.4f" % p.density, "%.5f" % p.learned_fraction))


def storage_breakeven(mean_density):
    """
    Smallest task count T with ``T > 1 / mean_density``: from there on,
    one source network plus per-task deltas takes less space than a
    fine-pruned copy per task.

    :raises: AccountingError unless ``0 < mean_density <= 1``

    """
    if not 0 < mean_density <= 1:
        raise AccountingError("mean density must lie in (0, 1], got %r" % mean_density)
    return int(math.floor(1.0 / mean_density)) + 1


class StorageModel(object):
    """
    Storage for *tasks* task-specific models of one source network with
    source_size weights: a fine-pruned copy each (mean_density of the
    source) against one shared source plus a delta of delta_size each.

    """
    def __init__(self, tasks, mean_density, source_size, delta_size=0):
        if tasks < 1 or source_size < 1 or delta_size < 0:
            raise AccountingError("need tasks >= 1, source_size >= 1 and "
                                  "delta_size >= 0")
        if not 0 < mean_density <= 1:
            raise AccountingError("mean density must lie in (0, 1], got %r" %
                                  mean_density)
        self.tasks = tasks
        self.mean_density = mean_density
        self.source_size = source_size
        self.delta_size = delta_size

    def __repr__(self):
        return "<StorageModel %u tasks at density %.2f: %r>" % (
            self.tasks, self.mean_density, self.totals())

    def totals(self):
        """``(fine-pruned total, adapter total)`` in stored weights."""
        finepruned = self.tasks * self.mean_density * self.source_size
        adapters = self.source_size + self.tasks * self.delta_size
        return finepruned, adapters

    def saves_space(self):
        finepruned, adapters = self.totals()
        return adapters < finepruned


ReportRow = namedtuple("ReportRow", ["name", "method", "rank", "density",
                                     "weight_density", "delta_params", "flops"])


def report(network, method=None, masks=None, rank=None):
    """
    A report row for a :class:`~spad.network.Network`, or for a manifest
    with the given method, masks and rank.

    """
    if hasattr(network, "manifest"):
        manifest = network.manifest
        method = method or network.method
        masks = masks if masks is not None else network.masks
        ranks = network.ranks()
        if ranks:
            rank, rank_arg = max(ranks.values()), ranks
        else:
            rank_arg = rank
    else:
        manifest = network
        method = method or "finetune"
        rank_arg = rank
    params = count_params(manifest, method, rank_arg, masks)
    if masks is None:
        density = weight_density = 1.0
    else:
        density, weight_density = masks.channel_density(), masks.weight_density()
    return ReportRow(manifest.name, method, rank if method != "finetune" else None,
                     density, weight_density, params.total,
                     count_flops(manifest, masks))


def format_row(row, reference=None):
    """
    Render a report row; with a reference row, append how many times fewer
    parameters it learns.

    >>> format_row(ReportRow("resnet50", "splora", 8, 1.0, 1.0, 466338, 10**9),
    ...            ReportRow("resnet50", "finetune", None, 1.0, 1.0, 23520842, 10**9))
    'resnet50  splora(r=8)  density 1.00  dParams 466.3K  FLOPs 1,000.0M  (50.4x fewer)'

    """
    method = row.method if row.rank is None else "%s(r=%u)" % (row.method, row.rank)
    out = "%s  %s  density %.2f  dParams %sK  FLOPs %sM" % (
        row.name, method, row.density, "{:,.1f}".format(row.delta_params / 1e3),
        "{:,.1f}".format(row.flops / 1e6))
    if reference is not None:
        out += "  (%.1fx fewer)" % reduction_factor(reference.delta_params,
                                                   row.delta_params)
    return out


def reduction_factor(reference, other):
    """How many times smaller other is than reference."""
    if other <= 0:
        raise AccountingError("can not compare against %r" % other)
    return reference / other


def summarize(values):
    """
    Mean and sample standard deviation of repeated measurements.

    >>> summarize([1.0, 2.0, 3.0])
    (2.0, 1.0)

    """
    values = np.asarray(values, dtype=np.float64)
    if not len(values):
        raise AccountingError("nothing to summarize")
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return float(values.mean()), std
