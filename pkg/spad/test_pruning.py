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

import itertools
import warnings

import numpy as np
import pytest

from . import manifest
from .compat import get_rng
from .criteria import (ChannelScoreTable, Criterion, ScoreEntry, score_channels,
                       score_table)
from .data import Dataset, for_spec
from .delta import MODE_CHECKPOINT, MODE_DELTA
from .masks import ChannelMaskSet, PruneError
from .network import build
from .pruning import (SCHEDULE_PRESETS, ScheduleConfig, ScheduleError,
                      prune_step, rank_init_sweep, run_schedule, select_global,
                      train_block)
from .testutils import mktest_batch, mktest_network


def mktest_layers(*widths):
    """A linear chain with one prunable group per width."""
    lines = ["name: test-chain", "input_shape: 4", "num_classes: 2", "layers:"]
    prev = 4
    for i, w in enumerate(widths):
        lines.append("    fc%u(%u/%u)<linear> +adapt +prune" % (i, prev, w))
        lines.append("    relu%u(%u/%u)<relu>" % (i, w, w))
        prev = w
    lines.append("    head(%u/2)<head>" % prev)
    return manifest.from_text("\n".join(lines) + "\n")


def mktest_table(mf, *scores):
    groups = [g for g in mf.coupling_groups() if g.prunable]
    return ChannelScoreTable(
        ScoreEntry(g.index, g.name, mf.index(g.members[0]), np.array(s, dtype=float))
        for g, s in zip(groups, scores))


def test_global_selection():
    mf = mktest_layers(2, 2)
    masks = ChannelMaskSet(mf)
    delta = select_global(mktest_table(mf, [0.1, 0.9], [0.2, 0.8]), masks, 2, floor=0)
    assert delta.pruned == [(0, 0), (1, 0)]
    assert not delta.skipped

    assert len(select_global(mktest_table(mf, [0.1, 0.9], [0.2, 0.8]), masks, 0)) == 0
    delta.apply(masks)
    assert masks.group_mask(0).tolist() == [False, True]


def test_tie_break():
    mf = mktest_layers(2, 2)
    masks = ChannelMaskSet(mf)
    assert select_global(mktest_table(mf, [0.5, 0.5], [0.9, 0.9]),
                         masks, 1).pruned == [(0, 0)]
    assert select_global(mktest_table(mf, [0.9, 0.5], [0.5, 0.9]),
                         masks, 1).pruned == [(0, 1)]


def test_floor_skips_with_warning():
    mf = mktest_layers(2, 2)
    masks = ChannelMaskSet(mf)
    table = mktest_table(mf, [0.1, 0.2], [0.9, 0.8])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        delta = select_global(table, masks, 2, floor=1)
    assert delta.pruned == [(0, 0), (1, 1)]
    assert delta.skipped == [(0, 1)]
    assert len(caught) == 1 and "floor" in str(caught[0].message)

    try:
        select_global(table, masks, 3, floor=1)
        assert False
    except PruneError:
        pass


def test_selection_matches_brute_force():
    rng = get_rng(31)
    mf = mktest_layers(4, 4, 4)
    for _ in range(30):
        scores = [rng.random(4) for _ in range(3)]
        table = mktest_table(mf, *scores)
        masks = ChannelMaskSet(mf)
        flat = [(s, g, c) for g in range(3) for c, s in enumerate(scores[g])]
        for floor in (0, 1):
            k = int(rng.integers(0, 12 - 3 * floor + 1))
            best = None
            for combo in itertools.combinations(flat, k):
                per_group = [sum(1 for _, g, _ in combo if g == i) for i in range(3)]
                if any(4 - n < floor for n in per_group):
                    continue
                total = sum(s for s, _, _ in combo)
                if best is None or total < best[0]:
                    best = (total, sorted((g, c) for _, g, c in combo))
            delta = select_global(table, masks, k, floor)
            assert sorted(delta.pruned) == best[1]


def test_selection_under_layer_rescaling():
    net = mktest_network("mlp", "splora", rank=2, seed=4, init_range=0.5)
    raw = score_channels(net, Criterion("taylor", "none"),
                         mktest_batch(net.manifest, count=16))
    layer_scores = dict((e.name, e.scores) for e in raw)
    masks = net.masks

    def pruned(table):
        return set(select_global(table, masks, 6, floor=0).pruned)

    normalized = pruned(score_table(masks, layer_scores, "l2_per_layer"))
    plain = pruned(raw)
    for entry in raw:
        for factor in (1024.0, 1 / 1024.0):
            rescaled = dict(layer_scores)
            rescaled[entry.name] = entry.scores * factor
            assert pruned(score_table(masks, rescaled, "l2_per_layer")) == normalized

        louder = pruned(raw.scaled(entry.group, 1024.0))
        assert set(p for p in louder if p[0] == entry.group) <= \
            set(p for p in plain if p[0] == entry.group)
        assert set(p for p in louder if p[0] != entry.group) >= \
            set(p for p in plain if p[0] != entry.group)


def test_prune_step():
    net = mktest_network("mlp", "splora", rank=2, init_range=0.5)
    delta = prune_step(net, "weight", 5)
    assert len(delta) == 5
    assert net.masks.alive_channels() == 21 - 5
    for name, m_row, _ in net.masks.layer_masks():
        layer = net.layers[name]
        assert not layer.W_down.data[~m_row.astype(bool)].any()

    lora = mktest_network("mlp", "lora", rank=2)
    try:
        prune_step(lora, "weight", 1)
        assert False
    except PruneError:
        pass


def test_schedule_arithmetic():
    schedule = ScheduleConfig(lr=0.01, batch_size=64, base_batch_size=256)
    assert schedule.prune_events == 19
    assert schedule.block_lr == 0.0025
    lrs = [schedule.replace(batch_size=256).lr_for(e, 20) for e in range(20)]
    for quarter, lr in enumerate((0.01, 0.002, 0.0004, 0.00008)):
        assert all(abs(x - lr) < 1e-15 for x in lrs[quarter * 5:(quarter + 1) * 5])
    assert ScheduleConfig(final_density=0.3).prune_events == 14
    assert SCHEDULE_PRESETS["cifar10"].warmup_epochs == 30
    assert SCHEDULE_PRESETS["flowers102"].epochs_per_step == 50

    for kwargs in ({"final_density": 1.0}, {"density_step": 0.0},
                   {"batch_size": 1}, {"epochs_per_step": 0}, {"lr": -1}):
        try:
            ScheduleConfig(**kwargs)
            assert False
        except ScheduleError:
            pass


def _tiny(count=16, seed=3):
    net = mktest_network("mlp", "splora", rank=2, init_range=1e-2)
    x, y = mktest_batch(net.manifest, count=count, seed=seed)
    return net, Dataset(x, y, 3)


TINY = ScheduleConfig(warmup_epochs=1, epochs_per_step=1, density_step=0.25,
                      final_density=0.25, lr=0.05, batch_size=8, base_batch_size=8,
                      scoring_samples=8)


def test_run_schedule():
    net, data = _tiny()
    seen = []
    records = run_schedule(net, "taylor", TINY, data, data, seed=4,
                           on_record=seen.append)
    assert seen == records
    assert [r.step for r in records] == [0, 1, 2, 3]
    assert records[0].checkpoint is None and records[0].density == 1.0
    assert [r.density for r in records[1:]] == [16 / 21.0, 10 / 21.0, 5 / 21.0]
    assert [r.pruned for r in records] == [0, 5, 6, 5]
    assert all(a.delta_params > b.delta_params for a, b in zip(records, records[1:]))
    assert all(a.weight_density > b.weight_density for a, b in zip(records, records[1:]))
    assert all(0 <= r.eval_accuracy <= 1 for r in records)
    assert all(r.checkpoint.mode == MODE_DELTA for r in records[1:])
    assert records[-1].checkpoint.density == records[-1].density
    assert all(g.prunable is False or net.masks.alive(g.index) >= 1
               for g in net.masks.groups)


def test_run_schedule_is_deterministic():
    runs = []
    for _ in range(2):
        net, data = _tiny()
        runs.append([(r.density, r.train_loss) for r in
                     run_schedule(net, "weight", TINY, data, seed=5)])
    assert runs[0] == runs[1]


def test_fine_pruning_emits_checkpoints():
    net = mktest_network("mlp")
    x, y = mktest_batch(net.manifest, count=16)
    records = run_schedule(net, "magnitude", TINY, Dataset(x, y, 3))
    assert all(r.checkpoint.mode == MODE_CHECKPOINT for r in records[1:])
    assert records[1].eval_accuracy is None


def test_lora_only_warms_up():
    net = mktest_network("mlp", "lora", rank=2)
    x, y = mktest_batch(net.manifest, count=16)
    records = run_schedule(net, "weight", TINY, Dataset(x, y, 3))
    assert len(records) == 1
    assert net.masks.alive_channels() == net.masks.prunable_channels()


def test_non_finite_loss_aborts():
    net = mktest_network("mlp", "splora", rank=2)
    x, y = mktest_batch(net.manifest, count=16)
    x[3, 2] = np.nan
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            run_schedule(net, "weight", TINY, Dataset(x, y, 3))
        assert False
    except ScheduleError as e:
        assert e.step == 0
        assert e.records == []


def test_rank_init_sweep():
    base = mktest_network("mlp")
    x, y = mktest_batch(base.manifest, count=16)
    data = Dataset(x, y, 3)
    points = rank_init_sweep(base, "weight", TINY, data, data, ranks=(1, 2),
                             init_ranges=(1e-4, 1e-2), densities=[1.0])
    assert [(p.rank, p.init_range, p.density) for p in points] == \
        [(1, 1e-4, 1.0), (1, 1e-2, 1.0), (2, 1e-4, 1.0), (2, 1e-2, 1.0)]
    assert base.masks.alive_channels() == 21


@pytest.mark.slow
def test_cnn4_keeps_accuracy_with_fewer_parameters():
    train, test = for_spec("images:seed=21,train=400,test=200")
    schedule = ScheduleConfig(warmup_epochs=4, epochs_per_step=3, density_step=0.1,
                              final_density=0.1, lr=0.05, batch_size=32,
                              base_batch_size=32, scoring_samples=64)
    base = build(manifest.for_name("cnn4"), seed=5)
    train_block(base, train, schedule, 10, get_rng(6))

    splora = run_schedule(base.adapt("splora", 8, seed=7), "taylor", schedule,
                          train, test, seed=8)
    dense = run_schedule(base, "taylor", schedule, train, test, seed=8)

    at_30 = [r for r in splora if abs(r.density - 0.3) < 0.01]
    assert len(at_30) == 1
    assert at_30[0].eval_accuracy >= splora[0].eval_accuracy - 0.05

    def at_10(records):
        return next(r for r in records if r.weight_density <= 0.1)
    assert 2 * at_10(splora).delta_params <= at_10(dense).delta_params
