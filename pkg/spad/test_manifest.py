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

from .compat import get_rng
from .layer import LayerSpecError, for_spec
from .manifest import ManifestError, bundled_names, for_name, from_file, from_text
from .masks import ChannelMaskSet, PruneError
from .specfile import SpecfileError, parse
from .testutils import MLP_TEXT, mktest_manifest

HEADER = "name: t\ninput_shape: 8\nnum_classes: 2\nlayers:\n"


def mktest_text(*layers, **groups):
    text = HEADER + "".join("    %s\n" % l for l in layers)
    if groups:
        text += "residual_groups:\n" + "".join(
            "    %s: %s\n" % (k, v) for k, v in sorted(groups.items()))
    return text


def _fails(text, fragment):
    try:
        from_text(text)
        assert False
    except ManifestError as e:
        assert fragment in str(e), str(e)


def test_bundled_manifests():
    assert bundled_names() == ["cnn4", "mlp", "resnet18", "resnet50"]
    digests = set()
    for name in bundled_names():
        mf = for_name(name)
        assert mf.name == name
        assert from_text(mf.to_text()) == mf
        assert mf.layers[-1].out_channels == mf.num_classes
        digests.add(mf.digest())
    assert len(digests) == 4


def test_from_file(tmp_path):
    path = tmp_path / "tiny.manifest"
    path.write_text(MLP_TEXT)
    assert from_file(str(path)) == mktest_manifest("mlp")
    assert for_name(str(path)).digest() == mktest_manifest("mlp").digest()


def test_digest_tracks_structure():
    mf = mktest_manifest("mlp")
    other = from_text(MLP_TEXT.replace(
        "relu2(8/8)<relu>", "relu2(8/8)<relu>\n    bn9(8/8)<batchnorm>"))
    assert other.digest() != mf.digest()
    assert mf.renamed("x").digest() != mf.digest()
    assert len(mf.hexdigest()) == 64


def test_resnet18_coupling():
    mf = for_name("resnet18")
    groups = mf.coupling_groups()
    assert len(groups) == 13
    assert sum(1 for g in groups if g.prunable) == 12
    assert groups[-1].members == ("head",) and not groups[-1].prunable
    assert groups[0].members == ("conv1", "layer1.0.conv2", "layer1.1.conv2")
    for g in groups:
        assert len(set(mf.layer(m).out_channels for m in g.members)) == 1
    for spec in mf:
        if spec.kind == "add":
            assert len(set(mf.channel_source(i) for i in spec.inputs)) == 1
    assert mf.channel_source("layer2.0.down_bn") == mf.channel_source("layer2.0.conv2")


def test_input_coupled_channels_are_fixed():
    mf = from_text(mktest_text("fc1(8/8)<linear> +adapt +prune",
                               "sum(8/8)<add> <- fc1,input",
                               "head(8/2)<head>"))
    assert [g.name for g in mf.coupling_groups()] == ["head"]
    assert mf.channel_source("fc1") is None
    assert ChannelMaskSet(mf).prunable_channels() == 0


def test_manifest_errors():
    _fails(mktest_text("fc1(8/4)<linear> +prune", "head(8/2)<head>"),
           "4 channels feed a layer expecting 8")
    _fails(mktest_text("fc1(8/4)<linear> <- nope", "head(4/2)<head>"),
           "nope is not defined")
    _fails(mktest_text("fc1(8/4)<linear>", "fc2(8/4)<linear> <- input",
                       "head(4/2)<head>"), "output of fc1 is never used")
    _fails(mktest_text("fc1(8/4)<linear>", "fc1(4/4)<linear>", "head(4/2)<head>"),
           "duplicate layer name")
    _fails(mktest_text("fc1(8/4)<linear>", "head(4/3)<head>"), "3 outputs for 2 classes")
    _fails(mktest_text("fc1(8/8)<linear> +prune", "fc2(8/4)<linear> +prune",
                       "head(4/2)<head>", g="fc1 fc2"), "mixes widths")
    _fails(mktest_text("fc1(8/4)<linear>", "head(4/2)<head>", g="fc1 relu9"),
           "relu9 is not a linear or conv2d layer")
    _fails(mktest_text("fc1(8/4)<linear>", "last(4/2)<linear> +prune"),
           "must not be prunable")
    _fails(mktest_text("fc1(8/4)<linear> +bogus", "head(4/2)<head>"), "unknown flag")
    _fails(HEADER.replace("input_shape: 8", "input_shape: 3 8"), "input_shape")
    _fails("name: t\n", "missing key")


def test_layer_specs():
    spec = for_spec("c(4/8)<conv2d>[3x3/2/1] +adapt +prune <- a")
    assert (spec.kernel, spec.stride, spec.padding, spec.inputs) == (3, 2, 1, ("a",))
    assert spec.fan_in() == 36
    assert spec.for_channels(2, 5).weight_shape() == (5, 2, 3, 3)
    for text in ("c(4/8)<conv2d>", "c(4/8)<conv2d>[3x5/1/1]", "c(4/8)<conv2d>[2x2/1/0] +adapt",
                 "c(4/8)<conv2d>[3x3/1/0] +adapt", "r(4/4)<relu> +prune",
                 "f(4/4)<linear>[3x3]", "f(0/4)<linear>", "f(4/4)<gru>",
                 "f(4/4)<linear> <- a,b", "junk"):
        try:
            for_spec(text)
            assert False, text
        except LayerSpecError:
            pass


def test_mask_set():
    mf = mktest_manifest("residual")
    masks = ChannelMaskSet(mf)
    assert masks.prunable_channels() == 8 + 6 + 6 + 8
    copy = masks.copy()
    copy.prune(0, 1)
    assert masks.alive(0) == 8 and copy.alive(0) == 7
    assert copy != masks
    assert copy.row_mask("block1.conv2").tolist() == copy.group_mask(0).tolist()
    assert copy.col_mask("block1.conv1").tolist() == copy.group_mask(0).tolist()
    assert copy.col_mask("conv1").tolist() == [True] * 3
    assert copy.node_mask("pool").tolist() == copy.group_mask(3).tolist()
    assert copy.weight_density() < 1.0

    half = ChannelMaskSet.uniform(mf, 0.5)
    assert [half.alive(g.index) for g in half.groups] == [4, 3, 3, 4, 4]
    assert ChannelMaskSet.uniform(mf, 0.01).alive(1) == 1


def test_mask_set_errors():
    mf = mktest_manifest("mlp")
    for masks in ([np.ones(8)] * 3, [np.ones(8), np.ones(8), np.ones(4), np.ones(3)],
                  [np.ones(8) * 2, np.ones(8), np.ones(5), np.ones(3)],
                  [np.ones(8), np.ones(8), np.ones(5), np.zeros(3)]):
        try:
            ChannelMaskSet(mf, masks)
            assert False
        except PruneError:
            pass
    masks = ChannelMaskSet(mf)
    try:
        masks.prune(3, 0)
        assert False
    except PruneError:
        pass
    for density in (0, 1.5):
        try:
            ChannelMaskSet.uniform(mf, density)
            assert False
        except PruneError:
            pass


def test_random_masks_keep_layer_masks_consistent():
    rng = get_rng(61)
    mf = mktest_manifest("residual")
    masks = ChannelMaskSet(mf)
    for _ in range(10):
        g = int(rng.integers(0, 4))
        alive = np.flatnonzero(masks.group_mask(g))
        if len(alive) > 1:
            masks.prune(g, int(rng.choice(alive)))
    for name, m_row, m_col in masks.layer_masks():
        spec = mf.layer(name)
        assert m_row.shape == (spec.out_channels,)
        assert m_col.shape == (spec.in_channels,)


def test_specfile():
    entries = parse("a: 1\nb:\n    x\n    y\n# done\nc: 0.5 \n")
    assert list(entries) == ["a", "b", "c"]
    assert entries["a"].int() == 1 and entries["c"].float() == 0.5
    assert entries["b"].items == [(3, "x"), (4, "y")]
    for text, fragment in (("a: 1\na: 2\n", "duplicate key"),
                           ("    x\n", "outside a section"),
                           ("a: x\n", "must be an integer")):
        try:
            parse(text)["a"].int()
            assert False
        except SpecfileError as e:
            assert fragment in str(e)
    try:
        parse("b:\n    x\n")["b"].int()
        assert False
    except SpecfileError as e:
        assert str(e) == "<string>:1: b must be a value, not a section"
