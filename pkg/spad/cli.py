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
Command-line front end: ``spad train``, ``report``, ``curve``, ``fuse``
and ``switch``.

Exit codes are 0 on success, 1 when a training run is aborted, 2 for
invalid configurations, manifests or arguments, and the error code of the
SPAD file error otherwise.

"""

import argparse
import logging
import os
import sys
from io import open

from . import accounting, data, delta, manifest
from .compat import get_rng
from .config import read_config
from .criteria import CRITERIA, CriterionError
from .layer import LayerSpecError
from .masks import ChannelMaskSet, PruneError
from .network import METHODS, NetworkError, build
from .pruning import ScheduleError, run_schedule, train_block
from .specfile import SpecfileError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ABORTED = 1
EXIT_INVALID = 2

METRICS_FILE = "metrics.tsv"
BASE_FILE = "base.spad"

METRICS_COLUMNS = ("step", "density", "weight_density", "delta_params", "flops",
                   "train_loss", "eval_accuracy")

_VALIDATION_ERRORS = (SpecfileError, LayerSpecError, CriterionError, NetworkError,
                      PruneError, accounting.AccountingError, data.DatasetError)


def checkpoint_name(density):
    return "density-%.2f.spad" % density


def format_metrics(record):
    def opt(fmt, value):
        return "-" if value is None else fmt % value
    return "\t".join((str(record.step), "%.4f" % record.density,
                      "%.4f" % record.weight_density, str(record.delta_params),
                      str(record.flops), opt("%.6f", record.train_loss),
                      opt("%.4f", record.eval_accuracy)))


def _check_data(mf, *datasets):
    for ds in datasets:
        if tuple(ds.x.shape[1:]) != mf.input_shape:
            raise data.DatasetError("samples of shape %r for a network taking %r" %
                                    (ds.x.shape[1:], mf.input_shape))
        if ds.num_classes > mf.num_classes:
            raise data.DatasetError("%u classes for a network with %u outputs" %
                                    (ds.num_classes, mf.num_classes))


def cmd_train(args):
    config = read_config(args.config, {
        "seed": args.seed, "mode": args.mode, "rank": args.rank,
        "criterion": args.criterion, "final_density": args.density,
        "out": args.out})
    train, test = config.datasets()
    _check_data(config.manifest, train, test)
    schedule = config.schedule

    base = build(config.manifest, config.seed)
    if config.pretrain_epochs:
        loss = train_block(base, train, schedule, config.pretrain_epochs,
                           get_rng(config.seed))
        logger.info("pretrained source for %u epochs: loss %.4f",
                    config.pretrain_epochs, loss)
    if not os.path.isdir(config.out):
        os.makedirs(config.out)
    delta.save_checkpoint(base, os.path.join(config.out, BASE_FILE))

    if config.mode == "finetune":
        network = base.copy()
    else:
        network = base.adapt(config.mode, config.rank, seed=config.seed,
                             init_range=config.init_range)
    targets = schedule.densities()

    with open(os.path.join(config.out, METRICS_FILE), "w") as metrics:
        metrics.write("\t".join(METRICS_COLUMNS) + "\n")

        def on_record(record):
            metrics.write(format_metrics(record) + "\n")
            metrics.flush()
            if record.checkpoint is not None:
                path = os.path.join(config.out, checkpoint_name(targets[record.step - 1]))
                delta.save(record.checkpoint, path)

        try:
            records = run_schedule(network, config.criterion, schedule, train, test,
                                   seed=config.seed, on_record=on_record)
        except ScheduleError as e:
            print("training aborted: %s" % e, file=sys.stderr)
            return EXIT_ABORTED

    last = records[-1]
    print("%u records, final density %.2f, accuracy %s, artifacts in %s" % (
        len(records), last.density,
        "-" if last.eval_accuracy is None else "%.4f" % last.eval_accuracy,
        config.out))
    return EXIT_OK


def cmd_report(args):
    mf = manifest.for_name(args.manifest)
    masks = None
    if args.density < 1:
        masks = ChannelMaskSet.uniform(mf, args.density)
    if args.mode == "lora" and masks is not None:
        raise NetworkError("LoRA adapters can not be put on a pruned network")
    rank = args.rank if args.mode != "finetune" else None
    row = accounting.report(mf, args.mode, masks, rank)
    reference = None
    if args.mode != "finetune":
        reference = accounting.report(mf, "finetune", masks)
    print(accounting.format_row(row, reference))
    return EXIT_OK


def cmd_curve(args):
    if args.densities:
        densities = [float(d) for d in args.densities.split(",")]
    else:
        densities = [round(0.05 * k, 2) for k in range(1, 21)]
    points = []
    for method in ("finetune", "lora", "splora"):
        points.extend(accounting.tradeoff_curve(args.n, args.m, args.r, method,
                                                densities))
    if args.out:
        with open(args.out, "w") as f:
            accounting.write_curve_csv(points, f)
    else:
        accounting.write_curve_csv(points, sys.stdout)
    if args.svg:
        try:
            import visspad
        except ImportError:
            print("--svg needs the visspad package", file=sys.stderr)
            return EXIT_INVALID
        visspad.render_curve(points, args.svg,
                             title="%ux%u, r=%u" % (args.n, args.m, args.r))
    return EXIT_OK


def cmd_fuse(args):
    base = delta.load_checkpoint(args.base)
    network = delta.load_delta(base, args.delta) if args.delta else base
    fused = network.fuse()
    delta.save_checkpoint(fused, args.out)
    print("fused %s: %u weights, %u FLOPs, written to %s" % (
        fused.manifest.name, fused.count_params().total, fused.count_flops(),
        args.out))
    return EXIT_OK


def cmd_switch(args):
    base = delta.load_checkpoint(args.base)
    _, test = data.for_spec(args.dataset)
    _check_data(base.manifest, test)
    switcher = delta.TaskSwitcher(base)
    for path in args.deltas:
        network = switcher.switch(path)
        print("%s\t%.4f" % (path, network.evaluate(test)))
    return EXIT_OK


def parser():
    ap = argparse.ArgumentParser(prog="spad",
                                 description="Structured pruning adapters")
    ap.add_argument("-v", "--verbose", action="count", default=0,
                    help="log progress (-v) or details (-vv)")
    sub = ap.add_subparsers(dest="command")
    sub.required = True

    p = sub.add_parser("train", help="train and prune from a run config")
    p.add_argument("--config", metavar="PATH", help="run config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=METHODS)
    p.add_argument("--rank", type=int)
    p.add_argument("--criterion", choices=CRITERIA)
    p.add_argument("--density", type=float, help="final channel density")
    p.add_argument("--out", metavar="DIR", help="artifact directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="learned parameters and FLOPs")
    p.add_argument("manifest", help="manifest path or bundled name")
    p.add_argument("--mode", choices=METHODS, default="finetune")
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--density", type=float, default=1.0,
                   help="uniform channel density")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("curve", help="learned fraction against density, as CSV")
    p.add_argument("n", type=int)
    p.add_argument("m", type=int)
    p.add_argument("r", type=int)
    p.add_argument("--densities", metavar="D,D,...")
    p.add_argument("--out", metavar="PATH", help="CSV file (default stdout)")
    p.add_argument("--svg", metavar="PATH", help="also plot to an SVG file")
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("fuse", help="fuse a task delta into a standalone network")
    p.add_argument("base", help="base checkpoint")
    p.add_argument("delta", nargs="?", help="task delta")
    p.add_argument("--out", metavar="PATH", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("switch", help="evaluate task deltas on one base")
    p.add_argument("base", help="base checkpoint")
    p.add_argument("deltas", nargs="+", help="task deltas")
    p.add_argument("--dataset", required=True, help="dataset spec")
    p.set_defaults(func=cmd_switch)
    return ap


def main(argv=None):
    args = parser().parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO,
                               logging.DEBUG][min(args.verbose, 2)],
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as e:
        print("spad %s: %s" % (args.command, e), file=sys.stderr)
        return EXIT_INVALID
    except (delta.SpadDecodeError, delta.SpadEncodeError) as e:
        print("spad %s: %s" % (args.command, e), file=sys.stderr)
        return e.code
    except OSError as e:
        print("spad %s: %s" % (args.command, e), file=sys.stderr)
        return EXIT_INVALID
