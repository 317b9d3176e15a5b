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
Run configurations for the command-line front end.

A run config is a specfile (see :mod:`spad.specfile`) naming the manifest,
the dataset, the training method and the schedule. Command-line flags
override file values. The seed is mandatory.

>>> from spad.config import read_config
>>> config = read_config(text='''
... manifest: mlp
... dataset: blobs:seed=3,train=64,test=32
... mode: splora
... rank: 4
... seed: 7
... final_density: 0.3
... ''')
>>> config
<RunConfig mlp splora r=4 weight seed 7>
>>> config.schedule.prune_events
14
>>> read_config(text="manifest: mlp\\ndataset: blobs:\\nrank: 4\\n")
Traceback (most recent call last):
...
spad.config.ConfigError: <string>: seed is mandatory

"""

import os.path

from . import data, manifest
from .criteria import Criterion, CriterionError
from .network import METHODS
from .pruning import ScheduleConfig, ScheduleError
from .specfile import SpecfileError, parse, parse_file

_RUN_KEYS = {
    "manifest": str,
    "dataset": str,
    "mode": str,
    "rank": int,
    "criterion": str,
    "seed": int,
    "out": str,
    "pretrain_epochs": int,
    "init_range": float,
}

_SCHEDULE_KEYS = {
    "warmup_epochs": int,
    "epochs_per_step": int,
    "density_step": float,
    "final_density": float,
    "lr": float,
    "batch_size": int,
    "base_batch_size": int,
    "momentum": float,
    "weight_decay": float,
    "scoring_samples": int,
}


class ConfigError(SpecfileError):
    """Raised for missing, unknown or invalid run-config values."""


class RunConfig(object):
    """
    A validated run configuration. The manifest is loaded on
    construction; datasets are only checked for a known source.

    """
    def __init__(self, manifest, dataset, seed, mode="splora", rank=8,
                 criterion="weight", out="spad-out", pretrain_epochs=0,
                 init_range=1e-4, schedule=None, source=None):
        self.source = source
        if seed is None:
            raise ConfigError("seed is mandatory", source=source)
        if mode not in METHODS:
            raise ConfigError("mode must be one of %s, got %r" %
                              (", ".join(METHODS), mode), source=source)
        if mode != "finetune" and rank < 1:
            raise ConfigError("rank must be positive, got %r" % rank, source=source)
        if pretrain_epochs < 0 or init_range <= 0:
            raise ConfigError("need pretrain_epochs >= 0 and init_range > 0",
                              source=source)
        try:
            self.criterion = Criterion(criterion)
        except CriterionError as e:
            raise ConfigError(str(e), source=source)
        self.manifest_name = manifest
        self.manifest = _load_manifest(manifest, source)
        _check_dataset(dataset, source)
        self.dataset = dataset
        self.seed = seed
        self.mode = mode
        self.rank = rank
        self.out = out
        self.pretrain_epochs = pretrain_epochs
        self.init_range = init_range
        self.schedule = schedule or ScheduleConfig()

    def __repr__(self):
        rank = "" if self.mode == "finetune" else " r=%u" % self.rank
        return "<RunConfig %s %s%s %s seed %u>" % (
            self.manifest.name, self.mode, rank, self.criterion, self.seed)

    def datasets(self):
        """``(train, test)`` for this run."""
        return data.for_spec(self.dataset)


def _load_manifest(name, source):
    if name is None:
        raise ConfigError("manifest is mandatory", source=source)
    return manifest.for_name(name)


def _check_dataset(spec, source):
    if spec is None:
        raise ConfigError("dataset is mandatory", source=source)
    kind, sep, rest = spec.partition(":")
    if kind == "dir":
        if not os.path.isdir(rest):
            raise ConfigError("dataset directory %s does not exist" % rest,
                              source=source)
    elif kind not in ("images", "blobs") or not sep:
        raise ConfigError("unknown dataset spec %r" % spec, source=source)


def read_config(path=None, overrides=None, text=None):
    """
    Read a run config from a file (or text) and apply overrides, a mapping
    of key to value in which None means "not given".

    :raises: ConfigError, or ManifestError for a bad manifest

    """
    source = path
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError("config file does not exist", source=path)
        entries = parse_file(path)
    elif text is not None:
        entries = parse(text)
    else:
        entries = {}

    run, sched = {}, {}
    for key, entry in entries.items():
        if key in _RUN_KEYS:
            target, conv = run, _RUN_KEYS[key]
        elif key in _SCHEDULE_KEYS:
            target, conv = sched, _SCHEDULE_KEYS[key]
        else:
            raise ConfigError("unknown key %r" % key, entry.lineno, source)
        if conv is str:
            target[key] = entry.str()
        elif conv is int:
            target[key] = entry.int()
        else:
            target[key] = entry.float()

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in _RUN_KEYS:
            run[key] = value
        elif key in _SCHEDULE_KEYS:
            sched[key] = value
        else:
            raise ConfigError("unknown override %r" % key, source=source)

    try:
        schedule = ScheduleConfig(**sched)
    except ScheduleError as e:
        raise ConfigError(str(e), source=source)
    return RunConfig(run.pop("manifest", None), run.pop("dataset", None),
                     run.pop("seed", None), schedule=schedule, source=source, **run)
