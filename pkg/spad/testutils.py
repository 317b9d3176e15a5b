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

import numpy as np

from . import manifest, network
from .compat import get_rng
from .masks import ChannelMaskSet

MLP_TEXT = """
name: test-mlp
input_shape: 6
num_classes: 3
layers:
    fc1(6/8)<linear> +adapt +prune
    relu1(8/8)<relu>
    fc2(8/8)<linear> +adapt +prune
    relu2(8/8)<relu>
    fc3(8/5)<linear> +adapt +prune
    relu3(5/5)<relu>
    head(5/3)<head>
"""

RESIDUAL_TEXT = """
name: test-resnet
input_shape: 3 6 6
num_classes: 4
layers:
    conv1(3/8)<conv2d>[3x3/1/1] +adapt +prune
    bn1(8/8)<batchnorm>
    relu1(8/8)<relu>
    block1.conv1(8/6)<conv2d>[3x3/1/1] +adapt +prune
    block1.relu1(6/6)<relu>
    block1.conv2(6/8)<conv2d>[3x3/1/1] +adapt +prune
    block1.add(8/8)<add> <- block1.conv2,relu1
    block1.relu2(8/8)<relu>
    block2.conv1(8/6)<conv2d>[3x3/2/1] +adapt +prune
    block2.relu1(6/6)<relu>
    block2.conv2(6/8)<conv2d>[3x3/1/1] +adapt +prune
    block2.down(8/8)<conv2d>[1x1/2/0] +prune <- block1.relu2
    block2.add(8/8)<add> <- block2.conv2,block2.down
    block2.relu2(8/8)<relu>
    pool(8/8)<pool>
    head(8/4)<head>
residual_groups:
    stage1: conv1 block1.conv2
    stage2: block2.conv2 block2.down
"""

_texts = {"mlp": MLP_TEXT, "residual": RESIDUAL_TEXT}


def mktest_manifest(kind="mlp"):
    """A small manifest: a 3-layer MLP or a 2-block residual CNN."""
    return manifest.from_text(_texts[kind], source="test-" + kind)


def mktest_network(kind="mlp", method="finetune", rank=2, seed=1, init_range=1e-4):
    net = network.build(mktest_manifest(kind), seed)
    if method != "finetune":
        net = net.adapt(method, rank, seed=seed + 1, init_range=init_range)
    return net


def mktest_masks(mf, rng, density=0.5):
    """Random masks keeping about density of each prunable group, at least one."""
    masks = []
    for g in mf.coupling_groups():
        if not g.prunable:
            masks.append(np.ones(g.channels, dtype=bool))
            continue
        mask = rng.random(g.channels) < density
        mask[rng.integers(g.channels)] = True
        masks.append(mask)
    return ChannelMaskSet(mf, masks)


def mktest_batch(mf, count=5, seed=3):
    rng = get_rng(seed)
    x = rng.normal(0.0, 1.0, (count,) + mf.input_shape)
    y = rng.integers(0, mf.num_classes, count)
    return x, y


def numeric_grad(f, arr, h=1e-5):
    """Central differences of the scalar function f with respect to arr."""
    grad = np.zeros_like(arr)
    for idx in np.ndindex(*arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        up = f()
        arr[idx] = old - h
        down = f()
        arr[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def rel_error(a, b, floor=1e-7):
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return np.max(np.abs(a - b)) / scale


def test_test_manifests():
    mlp = mktest_manifest("mlp")
    assert [g.name for g in mlp.coupling_groups()] == ["fc1", "fc2", "fc3", "head"]
    assert [g.prunable for g in mlp.coupling_groups()] == [True, True, True, False]

    res = mktest_manifest("residual")
    groups = res.coupling_groups()
    assert [g.name for g in groups] == ["stage1", "block1.conv1", "block2.conv1",
                                        "stage2", "head"]
    assert [g.prunable for g in groups] == [True, True, True, True, False]
    assert res.channel_source("block1.relu2") == res.channel_source("conv1")
    assert res.channel_source("block2.down") == res.channel_source("block2.conv2")
    assert res.shape("block2.add") == (8, 3, 3)


def test_test_masks_keep_a_channel():
    rng = get_rng(5)
    mf = mktest_manifest("residual")
    for _ in range(20):
        masks = mktest_masks(mf, rng, density=0.05)
        assert all(masks.alive(g.index) >= 1 for g in masks.groups)


def test_numeric_grad():
    x = np.array([1.0, -2.0, 0.5])
    g = numeric_grad(lambda: float(np.sum(x ** 3)), x)
    assert rel_error(g, 3 * x ** 2) < 1e-8
