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

from .adapter import DenseLayer, SploraLayer
from .compat import get_rng
from .manifest import for_name
from .masks import ChannelMaskSet
from .network import NetworkError, build, count_flops, count_params, layer_flops
from .testutils import mktest_batch, mktest_manifest, mktest_masks, mktest_network


def test_resnet50_param_counts():
    mf = for_name("resnet50")
    assert count_params(mf).total == 23520842
    assert abs(count_params(mf, "splora", 8).total - 466.3e3) / 466.3e3 < 0.005
    assert abs(count_params(mf, "splora", 32).total - 1644.5e3) / 1644.5e3 < 0.005
    assert count_params(mf, "lora", 8).total == count_params(mf, "splora", 8).total


def test_static_count_clamps_rank_like_adapt():
    for kind in ("mlp", "residual"):
        mf = mktest_manifest(kind)
        net = build(mf, seed=3)
        for method in ("splora", "lora"):
            live = net.adapt(method, 6, seed=4)
            assert count_params(mf, method, 6).total == live.count_params().total
            assert count_params(mf, method, 6).per_layer == live.count_params().per_layer


def test_finetune_count_matches_nonzeros():
    rng = get_rng(11)
    mf = mktest_manifest("residual")
    for _ in range(10):
        masks = mktest_masks(mf, rng, density=rng.uniform(0.2, 0.9))
        net = build(mf, seed=int(rng.integers(1000)))
        net.apply_masks(masks)
        counted = sum(np.count_nonzero(layer.effective_weight())
                      for _, layer in net.weighted_layers())
        counted += 2 * int(masks.node_mask("bn1").sum())
        counted += (int(masks.node_mask("pool").sum()) + 1) * 4
        assert count_params(mf, masks=masks).total == counted


def test_splora_count_matches_nonzeros():
    rng = get_rng(12)
    mf = mktest_manifest("mlp")
    for _ in range(20):
        masks = mktest_masks(mf, rng)
        net = mktest_network("mlp", "splora", rank=3, seed=int(rng.integers(1000)))
        net.apply_masks(masks)
        counted = 0
        for _, layer in net.weighted_layers():
            counted += np.count_nonzero(layer.W_down.data)
            counted += np.count_nonzero(layer.W_up.data)
        per_layer = net.count_params().per_layer
        assert sum(per_layer[s.name] for s in mf.weighted_layers()) == counted


def test_flops():
    mf = mktest_manifest("mlp")
    assert count_flops(mf) == 2 * (6 * 8 + 8 * 8 + 8 * 5 + 5 * 3)

    res = mktest_manifest("residual")
    flops = dict(layer_flops(res))
    assert flops["conv1"] == 2 * 9 * 3 * 8 * 36
    assert flops["block2.down"] == 2 * 8 * 8 * 9
    assert flops["head"] == 2 * 8 * 4

    masks = ChannelMaskSet.uniform(res, 0.5)
    assert dict(layer_flops(res, masks))["conv1"] == 2 * 9 * 3 * 4 * 36
    assert count_flops(res, masks) < count_flops(res)


def test_forward_and_predict():
    net = mktest_network("residual")
    x, y = mktest_batch(net.manifest, count=7)
    assert net.forward(x).shape == (7, 4)
    assert net.predict(x).shape == (7,)
    assert 0 <= net.loss(x, y).item()

    try:
        net.forward(np.zeros((2, 3, 5, 5)))
        assert False
    except NetworkError:
        pass


def test_build_needs_seed_and_is_deterministic():
    mf = mktest_manifest("mlp")
    try:
        build(mf, None)
        assert False
    except NetworkError:
        pass
    assert build(mf, 4).weights_digest() == build(mf, 4).weights_digest()
    assert build(mf, 4).weights_digest() != build(mf, 5).weights_digest()


def test_adapt():
    base = mktest_network("residual")
    digest = base.weights_digest()
    net = base.adapt("splora", 5, seed=3)
    assert base.weights_digest() == digest
    assert net.adapted and not base.adapted
    assert isinstance(net.layers["conv1"], SploraLayer)
    assert isinstance(net.layers["block2.down"], DenseLayer)
    assert not net.layers["block2.down"].trainable
    assert net.ranks()["conv1"] == 3
    assert net.ranks()["block1.conv1"] == 5
    names = [p.name for p in net.parameters()]
    assert "block2.down.weight" not in names
    assert "conv1.down" in names and "bn1.gamma" in names and "head.bias" in names

    try:
        net.adapt("splora", 2)
        assert False
    except NetworkError:
        pass

    pruned = base.copy()
    pruned.apply_masks(ChannelMaskSet.uniform(pruned.manifest, 0.5))
    try:
        pruned.adapt("lora", 2, seed=1)
        assert False
    except NetworkError:
        pass


def test_adapted_network_starts_near_base():
    base = mktest_network("mlp")
    net = base.adapt("splora", 2, seed=3)
    x, _ = mktest_batch(base.manifest, count=10)
    out = base.forward(x, training=False).data
    assert np.allclose(net.forward(x, training=False).data, out, atol=1e-2)


def test_copy_is_independent():
    net = mktest_network("mlp", "splora")
    twin = net.copy()
    twin.layers["fc1"].W_down.data += 1.0
    twin.masks.prune(0, 0)
    assert not np.allclose(net.layers["fc1"].W_down.data, twin.layers["fc1"].W_down.data)
    assert net.masks.alive(0) == 8


def test_fuse_matches_masked_network():
    rng = get_rng(13)
    x = rng.normal(0.0, 1.0, (100, 3, 6, 6))
    for method in ("finetune", "splora"):
        for density in (0.5, 0.3, 0.1):
            net = mktest_network("residual", method, rank=2, init_range=0.5)
            net.apply_masks(mktest_masks(net.manifest, rng, density))
            fused = net.fuse()
            assert fused.method == "finetune"
            assert fused.manifest.name == "test-resnet-fused"
            assert all(isinstance(layer, DenseLayer)
                       for _, layer in fused.weighted_layers())
            expected = net.forward(x, training=False).data
            actual = fused.forward(x, training=False).data
            assert np.max(np.abs(expected - actual)) < 1e-10
            if method == "finetune":
                assert fused.count_params().total == net.count_params().total


def test_tensors():
    net = mktest_network("residual")
    names = [name for name, _ in net.tensors()]
    assert names == ["bn1.gamma", "bn1.beta", "bn1.running_mean", "bn1.running_var",
                     "head.weight", "head.bias"]
