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
Global channel selection and the iterative prune-train schedule.

A schedule first trains the network without pruning, then alternates prune
events and training blocks. Each prune event removes ``density_step`` of the
original prunable channels, chosen globally: all channel scores of all
coupling groups are ranked together and the lowest go first, keeping at
least one channel alive in every group.

>>> from spad.pruning import ScheduleConfig
>>> schedule = ScheduleConfig(batch_size=64)
>>> schedule.prune_events
19
>>> schedule.block_lr
0.0025
>>> [schedule.lr_for(epoch, 20) for epoch in (0, 5, 10, 15)] == \\
...     [0.0025, 0.0025 / 5, 0.0025 / 25, 0.0025 / 125]
True
>>> ScheduleConfig(final_density=0.3).densities()[:3]
[0.95, 0.9, 0.85]
>>> ScheduleConfig(density_step=0.04)
Traceback (most recent call last):
...
spad.pruning.ScheduleError: density step 0.04 does not divide 0.95 into whole steps

"""

import logging
from collections import namedtuple
from warnings import warn

import numpy as np

from .compat import get_rng
from .criteria import for_name as criterion_for_name, score_channels
from .delta import extract_checkpoint, extract_delta
from .masks import PruneError
from .optim import OptimizerState, linear_scaled_lr, sgd_step, step_lr
from .tensor import NonFiniteError, Tape, backward, check_finite

logger = logging.getLogger(__name__)

__all__ = ["PruneError", "ScheduleError", "ScheduleConfig", "SCHEDULE_PRESETS",
           "MaskDelta", "select_global", "prune_step", "train_epoch",
           "train_block", "ScheduleRecord", "run_schedule", "SweepPoint",
           "rank_init_sweep"]

MIN_BATCH = 2

RANK_GRID = tuple(2 ** i for i in range(7))
INIT_GRID = tuple(10.0 ** -i for i in range(6, 1, -1))


class ScheduleError(ValueError):
    """
    Raised for invalid schedules, and when a run is aborted. An aborted
    run carries the step it stopped at and the records emitted before.

    """
    def __init__(self, msg, step=None, records=()):
        super(ScheduleError, self).__init__(msg)
        self.step = step
        self.records = list(records)


class ScheduleConfig(object):
    """
    Epoch counts, pruning increments and optimiser settings of a schedule.
    The learning rate is quoted for base_batch_size and scaled linearly to
    batch_size.

    """
    FIELDS = ("warmup_epochs", "epochs_per_step", "density_step", "final_density",
              "lr", "batch_size", "base_batch_size", "momentum", "weight_decay",
              "scoring_samples")

    def __init__(self, warmup_epochs=30, epochs_per_step=20, density_step=0.05,
                 final_density=0.05, lr=0.01, batch_size=64, base_batch_size=256,
                 momentum=0.9, weight_decay=5e-4, scoring_samples=512):
        self.warmup_epochs = int(warmup_epochs)
        self.epochs_per_step = int(epochs_per_step)
        self.density_step = float(density_step)
        self.final_density = float(final_density)
        self.lr = float(lr)
        self.batch_size = int(batch_size)
        self.base_batch_size = int(base_batch_size)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.scoring_samples = int(scoring_samples)

        if self.warmup_epochs < 0 or self.epochs_per_step < 1:
            raise ScheduleError("need warmup_epochs >= 0 and epochs_per_step >= 1")
        if not 0 < self.final_density < 1:
            raise ScheduleError("final density must lie in (0, 1), got %r" %
                                self.final_density)
        if not 0 < self.density_step < 1:
            raise ScheduleError("density step must lie in (0, 1), got %r" %
                                self.density_step)
        events = (1 - self.final_density) / self.density_step
        if abs(events - round(events)) > 1e-6:
            raise ScheduleError("density step %g does not divide %g into whole steps" %
                                (self.density_step, 1 - self.final_density))
        if self.lr <= 0 or self.batch_size < MIN_BATCH or self.base_batch_size < 1:
            raise ScheduleError("need lr > 0, batch_size >= %u and base_batch_size >= 1"
                                % MIN_BATCH)
        if self.scoring_samples < 1:
            raise ScheduleError("scoring_samples must be positive")

    def __repr__(self):
        return "<ScheduleConfig %u+%ux%u epochs, step %g to %g, lr %g @ %u>" % (
            self.warmup_epochs, self.prune_events, self.epochs_per_step,
            self.density_step, self.final_density, self.block_lr, self.batch_size)

    def as_dict(self):
        return dict((k, getattr(self, k)) for k in self.FIELDS)

    def replace(self, **kwargs):
        fields = self.as_dict()
        fields.update(kwargs)
        return ScheduleConfig(**fields)

    @property
    def prune_events(self):
        return int(round((1 - self.final_density) / self.density_step))

    @property
    def block_lr(self):
        """Learning rate at the start of every training block."""
        return linear_scaled_lr(self.lr, self.batch_size, self.base_batch_size)

    def lr_for(self, epoch, block_epochs):
        return step_lr(self.block_lr, epoch, block_epochs)

    def densities(self):
        """Target channel density after each prune event."""
        return [round(1 - k * self.density_step, 10)
                for k in range(1, self.prune_events + 1)]


SCHEDULE_PRESETS = {
    "cifar10": ScheduleConfig(warmup_epochs=30, epochs_per_step=20),
    "flowers102": ScheduleConfig(warmup_epochs=100, epochs_per_step=50),
    "cats_and_dogs": ScheduleConfig(warmup_epochs=100, epochs_per_step=50),
}


class MaskDelta(object):
    """
    The channels one selection prunes, as ``(group, channel)`` pairs, and
    the candidates it passed over to respect the per-group floor.

    """
    def __init__(self, pruned=(), skipped=()):
        self.pruned = list(pruned)
        self.skipped = list(skipped)

    def __repr__(self):
        return "<MaskDelta %u pruned, %u skipped>" % (len(self.pruned), len(self.skipped))

    def __len__(self):
        return len(self.pruned)

    def apply(self, masks):
        """Prune the selected channels in a ChannelMaskSet, in place."""
        for group, channel in self.pruned:
            masks.prune(group, channel)
        return masks


def select_global(table, masks, prune_count, floor=1):
    """
    Pick the prune_count lowest-scoring alive channels across all groups
    of a :class:`~spad.criteria.ChannelScoreTable`. Ties are broken by
    layer index, then channel index. A group never drops below *floor*
    alive channels; candidates passed over for that are reported with a
    warning.

    :returns: a :class:`MaskDelta`
    :raises: PruneError if fewer than prune_count channels can be pruned

    """
    if prune_count < 0:
        raise PruneError("can not prune %r channels" % prune_count)
    remaining = {}
    candidates = []
    for entry in table:
        alive = np.flatnonzero(masks.group_mask(entry.group))
        remaining[entry.group] = len(alive) - floor
        candidates.extend((float(entry.scores[c]), entry.layer_index, int(c), entry.group)
                          for c in alive)
    available = sum(max(0, n) for n in remaining.values())
    if prune_count > available:
        raise PruneError("%u channels requested, %u can be pruned above the floor" %
                         (prune_count, available))

    candidates.sort(key=lambda c: c[:3])
    out = MaskDelta()
    for score, _, channel, group in candidates:
        if len(out.pruned) == prune_count:
            break
        if remaining[group] <= 0:
            out.skipped.append((group, channel))
            continue
        remaining[group] -= 1
        out.pruned.append((group, channel))
    if out.skipped:
        warn("skipped %u low-scoring channels in groups at the floor of %u" %
             (len(out.skipped), floor))
    return out


def prune_step(network, criterion, count, batch=None, floor=1):
    """
    Score the network's channels, select count of them globally and apply
    the new masks to the network.

    :returns: the applied :class:`MaskDelta`

    """
    if network.method == "lora":
        raise PruneError("LoRA networks carry no channel masks")
    table = score_channels(network, criterion, batch)
    delta = select_global(table, network.masks, count, floor)
    network.apply_masks(delta.apply(network.masks.copy()))
    return delta


def train_epoch(network, dataset, state, rng, batch_size):
    """
    One pass of SGD over a shuffled dataset. Returns the mean training
    loss.

    :raises: NonFiniteError on a non-finite loss or gradient

    """
    params = network.parameters()
    network.training = True
    total = count = 0
    for x, y in dataset.batches(batch_size, rng, min_size=MIN_BATCH):
        loss = network.loss(x, y, tape=Tape(), training=True)
        check_finite(loss, "training loss")
        backward(loss, params)
        sgd_step(params, state)
        total += loss.item() * len(y)
        count += len(y)
    if not count:
        raise ScheduleError("dataset of %u samples yields no batch of %u or more" %
                            (len(dataset), MIN_BATCH))
    return total / count


def train_block(network, dataset, schedule, epochs, rng):
    """
    Train for a block of epochs with fresh momentum buffers and the
    stepped learning rate. Returns the last epoch's loss (None for an
    empty block).

    """
    state = OptimizerState(schedule.block_lr, schedule.momentum, schedule.weight_decay)
    loss = None
    for epoch in range(epochs):
        state.lr = schedule.lr_for(epoch, epochs)
        loss = train_epoch(network, dataset, state, rng, schedule.batch_size)
        logger.debug("epoch %u/%u lr %g: loss %.4f", epoch + 1, epochs, state.lr, loss)
    return loss


ScheduleRecord = namedtuple("ScheduleRecord", [
    "step", "density", "weight_density", "delta_params", "flops", "train_loss",
    "eval_accuracy", "pruned", "checkpoint"])


def run_schedule(network, criterion, schedule, train_data, eval_data=None, seed=0,
                 on_record=None, floor=1):
    """
    Train and prune network in place.

    The warmup block yields record 0, with no checkpoint. Every prune event
    then yields a record whose checkpoint is a task delta for adapter
    networks and a full checkpoint for fine-pruned ones. LoRA networks are
    trained but never pruned.

    :param on_record: optional callable receiving each record as it is made
    :returns: the list of :class:`ScheduleRecord`
    :raises: ScheduleError when a loss or gradient becomes non-finite

    """
    criterion = criterion_for_name(criterion)
    rng = get_rng(seed)
    scoring = None
    if criterion.needs_batch:
        scoring = train_data.sample(schedule.scoring_samples, rng)

    records = []

    def emit(step, loss, pruned, checkpoint):
        accuracy = network.evaluate(eval_data) if eval_data is not None else None
        record = ScheduleRecord(step, network.masks.channel_density(),
                                network.masks.weight_density(),
                                network.count_params().total, network.count_flops(),
                                loss, accuracy, pruned, checkpoint)
        records.append(record)
        if on_record is not None:
            on_record(record)
        return record

    step = 0
    try:
        loss = train_block(network, train_data, schedule, schedule.warmup_epochs, rng)
        emit(0, loss, 0, None)
        logger.info("warmup of %u epochs done: loss %s", schedule.warmup_epochs, loss)
        if network.method == "lora":
            return records

        total = network.masks.prunable_channels()
        groups = sum(1 for g in network.masks.groups if g.prunable)
        for step in range(1, schedule.prune_events + 1):
            target = int(round(total * (1 - step * schedule.density_step)))
            target = max(target, floor * groups)
            count = max(0, network.masks.alive_channels() - target)
            delta = prune_step(network, criterion, count, scoring, floor)
            loss = train_block(network, train_data, schedule,
                               schedule.epochs_per_step, rng)
            if network.adapted:
                checkpoint = extract_delta(network, criterion)
            else:
                checkpoint = extract_checkpoint(network, criterion)
            record = emit(step, loss, len(delta), checkpoint)
            logger.info("step %u: pruned %u channels, density %.3f (weights %.3f), "
                        "loss %.4f", step, len(delta), record.density,
                        record.weight_density, loss)
    except NonFiniteError as e:
        raise ScheduleError("run aborted at step %u: %s" % (step, e), step, records)
    return records


SweepPoint = namedtuple("SweepPoint", ["rank", "init_range", "density", "accuracy"])


def rank_init_sweep(base, criterion, schedule, train_data, eval_data,
                    ranks=RANK_GRID, init_ranges=INIT_GRID, densities=None, seed=0):
    """
    Run one SPLoRA schedule per (rank, init range) pair from the same base
    network and collect held-out accuracy at each reached density (or only
    at the given densities).

    """
    points = []
    for rank in ranks:
        for init_range in init_ranges:
            network = base.adapt("splora", rank, seed=seed, init_range=init_range)
            for record in run_schedule(network, criterion, schedule, train_data,
                                       eval_data, seed=seed):
                if densities is None or \
                        any(abs(record.density - d) < 1e-9 for d in densities):
                    points.append(SweepPoint(rank, init_range, record.density,
                                             record.eval_accuracy))
            logger.info("sweep rank %u init %g done", rank, init_range)
    return points
