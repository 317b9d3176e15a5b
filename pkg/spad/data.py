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
Labelled datasets and the seeded synthetic tasks used at desk scale.

Dataset specs select a source:

  images:seed=S,train=N,test=M[,classes=C,size=P,noise=X]
  blobs:seed=S,train=N,test=M[,classes=C,dims=D,spread=X]
  dir:PATH      (PATH/train.npz and PATH/test.npz with arrays x and y)

>>> from spad.data import for_spec
>>> train, test = for_spec("images:seed=3,train=40,test=20")
>>> train
<Dataset images: 40 samples, 10 classes>
>>> train.x.shape, test.x.shape
((40, 3, 16, 16), (20, 3, 16, 16))
>>> again, _ = for_spec("images:seed=3,train=40,test=20")
>>> bool((again.x == train.x).all())
True

"""

import os.path

import numpy as np

from .compat import get_rng


class DatasetError(ValueError):
    """Raised for malformed dataset specs or sample files."""


class Dataset(object):
    """Samples x (first axis indexes samples) with integer labels y."""

    def __init__(self, x, y, num_classes=None, name=None):
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise DatasetError("%u samples with %u labels" % (len(self.x), len(self.y)))
        if num_classes is None:
            num_classes = int(self.y.max()) + 1 if len(self.y) else 0
        self.num_classes = num_classes
        self.name = name or "dataset"

    def __repr__(self):
        return "<Dataset %s: %u samples, %u classes>" % (
            self.name, len(self), self.num_classes)

    def __len__(self):
        return len(self.y)

    def subset(self, indices):
        return Dataset(self.x[indices], self.y[indices], self.num_classes, self.name)

    def sample(self, count, rng):
        """A fixed random subset of at most count samples, in dataset order."""
        if count >= len(self):
            return self
        return self.subset(np.sort(rng.choice(len(self), count, replace=False)))

    def batches(self, batch_size, rng=None, min_size=1):
        """
        Yield ``(x, y)`` batches, shuffled with rng if given. Trailing
        batches smaller than min_size are dropped.

        """
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) >= min_size:
                yield self.x[idx], self.y[idx]


def gaussian_blobs(seed, count, dims=16, classes=10, spread=1.0):
    """Isotropic Gaussian clusters around seeded class centres."""
    rng = get_rng(seed)
    centres = rng.normal(0.0, 2.0, (classes, dims))
    y = rng.integers(0, classes, count)
    x = centres[y] + rng.normal(0.0, spread, (count, dims))
    return Dataset(x, y, classes, "blobs")


def pattern_images(seed, count, classes=10, size=16, noise=0.3):
    """
    Procedural 3-channel gratings. Each class has its own orientation,
    spatial frequency and colour; phase and contrast vary per sample, and
    Gaussian pixel noise is added.

    """
    rng = get_rng(seed)
    y = rng.integers(0, classes, count)
    theta = np.pi * np.arange(classes) / classes
    freq = 1.5 + (np.arange(classes) % 3)
    hue = 2 * np.pi * np.arange(classes) / classes
    colour = 0.5 + 0.5 * np.cos(hue[:, None] + np.array([0.0, 2.0, 4.0]) * np.pi / 3)

    coords = (np.arange(size) - (size - 1) / 2.0) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    phase = rng.uniform(0, 2 * np.pi, count)
    contrast = rng.uniform(0.7, 1.3, count)

    proj = (np.cos(theta[y])[:, None, None] * xx +
            np.sin(theta[y])[:, None, None] * yy)
    wave = np.sin(2 * np.pi * freq[y][:, None, None] * proj + phase[:, None, None])
    x = (contrast[:, None, None, None] * colour[y][:, :, None, None] *
         wave[:, None, :, :])
    x = x + rng.normal(0.0, noise, x.shape)
    return Dataset(x, y, classes, "images")


def from_directory(path):
    """Load ``train.npz`` and ``test.npz`` (arrays x and y) from a directory."""
    out = []
    for split in ("train", "test"):
        filename = os.path.join(path, split + ".npz")
        if not os.path.exists(filename):
            raise DatasetError("missing %s" % filename)
        with np.load(filename) as f:
            if "x" not in f or "y" not in f:
                raise DatasetError("%s must hold arrays x and y" % filename)
            out.append(Dataset(f["x"], f["y"], name=os.path.basename(path.rstrip("/"))))
    classes = max(d.num_classes for d in out)
    for d in out:
        d.num_classes = classes
    return tuple(out)


_GENERATORS = {"images": pattern_images, "blobs": gaussian_blobs}

_FLOAT_ARGS = ("noise", "spread")


def for_spec(spec):
    """
    Return ``(train, test)`` datasets for a dataset spec string. Both
    splits of a synthetic task come from one seeded draw.

    :raises: DatasetError

    """
    kind, sep, rest = spec.partition(":")
    if not sep:
        raise DatasetError("dataset spec %r lacks a source prefix" % spec)
    if kind == "dir":
        return from_directory(rest)
    if kind not in _GENERATORS:
        raise DatasetError("unknown dataset source %r" % kind)

    args = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, eq, value = item.partition("=")
        if not eq:
            raise DatasetError("expected key=value in dataset spec, got %r" % item)
        try:
            args[key] = float(value) if key in _FLOAT_ARGS else int(value)
        except ValueError:
            raise DatasetError("bad value for %s in dataset spec: %r" % (key, value))
    for key in ("seed", "train", "test"):
        if key not in args:
            raise DatasetError("dataset spec %r lacks %s" % (spec, key))

    seed, train, test = args.pop("seed"), args.pop("train"), args.pop("test")
    try:
        full = _GENERATORS[kind](seed, train + test, **args)
    except TypeError:
        raise DatasetError("unknown option in dataset spec %r" % spec)
    return full.subset(np.arange(train)), full.subset(np.arange(train, train + test))
