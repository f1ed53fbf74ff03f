"""``corenet`` command line: train, compile, simulate, verify, report, faults, validate.

Exit status: 0 success, 1 verification mismatch, 2 structural or capacity
violation, 3 data shape mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import datasets
from .chip import read_config, read_vote_map, write_config, write_vote_map
from .compiler import COPY_MODES, CompileError, compile_model
from .modelfile import host_stage_model, read_model, transduce, write_model
from .netspec import NetSpecError, builtin_template, parse_network, validate_structure
from .simulator import (DIRECTION_IN, DIRECTION_OUT, SimulationError, Simulator, classify,
                        output_trace, presentation_outputs, read_trace, trace_to_inputs, write_trace)
from .trainer import ShapeError, TrainConfig, total_spikes, train

EXIT_MISMATCH, EXIT_STRUCTURE, EXIT_SHAPE = 1, 2, 3

log = logging.getLogger("corenet")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- shared argument groups -----------------------------------------------------------


def _add_data_args(p: argparse.ArgumentParser, test: bool = True) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--kind", choices=datasets.KINDS, help="dataset file format")
    g.add_argument("--data", help="dataset file (CIFAR records, IDX images or CSV)")
    g.add_argument("--labels", help="IDX label file")
    g.add_argument("--shape", type=int, nargs=3, metavar=("R", "C", "F"),
                   help="tensor shape for tensor_csv rows")
    g.add_argument("--builtin", choices=datasets.BUILTINS, help="bundled dataset instead of files")
    g.add_argument("--limit", type=int, help="use at most this many images")
    if test:
        g.add_argument("--test-data", help="held-out dataset file, same format as --data")
        g.add_argument("--test-labels", help="IDX label file for --test-data")
        g.add_argument("--test-fraction", type=float, default=0.2,
                       help="held-out share when no test file is given (default 0.2)")


def _load(args, path, labels, input_shape=None):
    if args.builtin:
        x, y = datasets.builtin(args.builtin, seed=args.seed, shape=input_shape)
    else:
        if not args.kind or not path:
            raise CliError("give --builtin or both --kind and --data", EXIT_SHAPE)
        src = datasets.DatasetSource(args.kind, path, labels,
                                     tuple(args.shape) if args.shape else None)
        x, y = src.load()
    if args.limit is not None:
        x, y = x[:args.limit], y[:args.limit]
    if input_shape is not None:
        datasets.check_shape(x, input_shape)
    return x, y


def _load_network(args):
    if args.template:
        shape = tuple(args.input_shape) if args.input_shape else (32, 32, 3)
        return builtin_template(args.template, *shape)
    return parse_network(Path(args.net).read_text())


# -- verbs ----------------------------------------------------------------------------


def cmd_validate(args) -> int:
    net = _load_network(args)
    report = validate_structure(net)
    print(report.to_text())
    if args.json:
        Path(args.json).write_text(json.dumps(report.records(), indent=2))
    return 0 if report.mappable else EXIT_STRUCTURE


def cmd_train(args) -> int:
    net = _load_network(args)
    report = validate_structure(net)
    if not report.mappable:
        raise CliError("; ".join(str(v) for v in report.violations), EXIT_STRUCTURE)
    shape = net.shapes()[0]
    x, y = _load(args, args.data, args.labels, shape)
    if args.test_data:
        xt, yt = _load(args, args.test_data, args.test_labels, shape)
    elif args.test_fraction > 0:
        x, y, xt, yt = datasets.split(x, y, args.test_fraction, args.seed)
    else:
        xt = yt = None
    cfg = TrainConfig(lr=args.lr, lr_drops=tuple(args.lr_drops) if args.lr_drops else None,
                      momentum=args.momentum, weight_decay=args.weight_decay, gamma=args.gamma,
                      hysteresis=args.hysteresis, batch_size=args.batch_size,
                      epochs=args.epochs, seed=args.seed, logit_scale=args.logit_scale,
                      bias_lr=args.bias_lr)
    model, records = train(net, x, y, cfg, xt, yt)
    write_model(model, args.out)
    lines = [json.dumps(r.as_dict()) for r in records]
    if xt is not None and records:
        spikes = total_spikes(model, xt)
        final = {"test_accuracy": records[-1].test_accuracy, "test_spikes": spikes,
                 "test_images": len(xt)}
        print(json.dumps(final))
    if args.log:
        Path(args.log).write_text("\n".join(lines) + "\n")
    for line in lines:
        log.info(line)
    return 0


def cmd_compile(args) -> int:
    model = read_model(args.model)
    try:
        result = compile_model(model, max_cores=args.max_cores, copy_mode=args.copy_mode)
    except CompileError as exc:
        raise CliError(str(exc), EXIT_STRUCTURE) from exc
    write_config(result.config, args.out)
    vote = args.vote_map or str(Path(args.out).with_suffix(".votes"))
    write_vote_map(result.config, vote)
    text = result.report.to_text()
    print(text)
    if args.report:
        Path(args.report).write_text(json.dumps(result.report.records(), indent=2))
    return 0


def _frames_for(cfg, images):
    host = host_stage_model(cfg.host_stage)
    start = host.net.chip_layers()[0]
    datasets.check_shape(images, host.net.shapes()[0])
    frames = transduce(host, images)
    if frames.shape[1:] != host.net.shapes()[start]:
        raise CliError("transduced frames do not match the config input", EXIT_SHAPE)
    return frames


def cmd_simulate(args) -> int:
    cfg = read_config(args.config)
    vote = read_vote_map(args.vote_map)[2] if args.vote_map else cfg.output_class
    if len(vote) != len(cfg.output_class):
        raise CliError("vote map does not match the config outputs", EXIT_SHAPE)
    sim = Simulator(cfg, args.alpha, args.beta)
    labels = None
    if args.trace:
        direction, records = read_trace(args.trace)
        if direction != DIRECTION_IN:
            raise CliError("trace is not an input trace", EXIT_SHAPE)
        inputs, last = trace_to_inputs(records)
        count = args.count if args.count is not None else last
        if count < last:
            raise CliError("--count is shorter than the trace", EXIT_SHAPE)
        try:
            for ev in inputs:
                if len(ev) and (ev[:, 0].max() >= cfg.num_cores or ev[:, 1].max() >= 256):
                    raise SimulationError("trace addresses a line outside the config")
        except SimulationError as exc:
            raise CliError(str(exc), EXIT_SHAPE) from exc
        ticks = count + cfg.depth if count else 0
        result = sim.run(inputs, ticks, classifications=count)
    else:
        images, labels = _load(args, args.data, args.labels)
        result = sim.run_frames(_frames_for(cfg, images))
        count = len(images)
    outs = presentation_outputs(result, cfg.depth, count)
    preds = np.array([classify(o, vote, cfg.num_classes) for o in outs], np.int64)
    extra = {"name": args.name or Path(args.config).stem}
    if labels is not None and count:
        extra["accuracy"] = float(np.mean(preds == labels))
    if count:
        extra["spikes_per_classification"] = result.stats.total_spikes / count
    stats = result.stats.to_json(**extra)
    print(stats)
    if args.stats:
        Path(args.stats).write_text(stats + "\n")
    if args.predictions:
        Path(args.predictions).write_text("".join(f"{p}\n" for p in preds))
    if args.out_trace:
        write_trace(args.out_trace, output_trace(cfg, result), DIRECTION_OUT)
    return 0


def cmd_verify(args) -> int:
    from .verify import random_frames, verify_frames, verify_images

    model = read_model(args.model)
    cfg = read_config(args.config)
    if args.vote_map:
        _, _, cls = read_vote_map(args.vote_map)
        if not np.array_equal(cls, cfg.output_class):
            raise CliError("vote map does not match the config", EXIT_MISMATCH)
    audit = not args.no_audit
    if args.random:
        frames = random_frames(model, args.n, args.seed, args.density)
        report = verify_frames(model, cfg, frames, audit=audit)
    else:
        images, labels = _load(args, args.data, args.labels, model.net.shapes()[0])
        report = verify_images(model, cfg, images[:args.n], labels[:args.n], audit=audit)
    print(report.to_text())
    if args.json:
        Path(args.json).write_text(report.to_json())
    return 0 if report.verdict == "exact" else EXIT_MISMATCH


def cmd_report(args) -> int:
    from .report import write_report

    summary = write_report(args.stats, args.out_dir, args.train_log or ())
    print(summary.to_text())
    return 0


def cmd_faults(args) -> int:
    from .faults import run_campaign
    from .verify import random_frames

    model = read_model(args.model)
    cfg = read_config(args.config)
    if args.random:
        frames = random_frames(model, args.n, args.seed)
    else:
        images, _ = _load(args, args.data, args.labels, model.net.shapes()[0])
        frames = transduce(model, images[:args.n])
    result = run_campaign(model, cfg, frames, args.trials, args.seed, audit=not args.no_audit)
    rec = result.to_dict()
    print(f"trials {result.trials} detected {result.detected} rate {result.detection_rate:.4f} "
          f"(simulation alone {result.dynamic_rate:.4f}); live misses {result.live_misses}")
    if args.json:
        Path(args.json).write_text(json.dumps(rec, indent=2))
    return 0


# -- parser ---------------------------------------------------------------------------


def _add_net_args(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--net", help="network description file")
    g.add_argument("--template", help="builtin template (toy, half_chip, one_chip, ...)")
    p.add_argument("--input-shape", type=int, nargs=3, metavar=("R", "C", "F"),
                   help="input shape for --template (default 32 32 3)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="corenet", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0, help="single source of randomness")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("validate", help="structural check of a network description")
    _add_net_args(p)
    p.add_argument("--json", help="write key/value records here")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="train a network and write a model file")
    _add_net_args(p)
    _add_data_args(p)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--log", help="per-epoch JSON lines log")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--bias-lr", type=float, default=0.1)
    p.add_argument("--lr-drops", type=int, nargs=2, metavar=("E1", "E2"),
                   help="epochs of the two 10x rate drops (default: 1/2 and 3/4 of training)")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--gamma", type=float, default=0.0, help="sparsity penalty weight")
    p.add_argument("--hysteresis", type=float, default=0.1)
    p.add_argument("--logit-scale", type=float, default=10.0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compile", help="map a trained model onto cores")
    p.add_argument("model")
    p.add_argument("--out", required=True, help="chip configuration file")
    p.add_argument("--vote-map", help="vote map path (default: <out>.votes)")
    p.add_argument("--report", help="JSON compile report")
    p.add_argument("--max-cores", type=int)
    p.add_argument("--copy-mode", choices=COPY_MODES, default="auto")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("simulate", help="run images or a spike trace through a config")
    p.add_argument("config")
    p.add_argument("--vote-map")
    _add_data_args(p, test=False)
    p.add_argument("--trace", help="input spike trace instead of images")
    p.add_argument("--count", type=int, help="presentations in the trace")
    p.add_argument("--stats", help="write run statistics JSON here")
    p.add_argument("--predictions", help="write one predicted label per line")
    p.add_argument("--out-trace", help="write output spikes as a trace")
    p.add_argument("--name", help="run name in the statistics")
    p.add_argument("--alpha", type=float, default=1.0, help="energy weight per core-tick")
    p.add_argument("--beta", type=float, default=1.0, help="energy weight per spike")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="compare trainer and simulator neuron by neuron")
    p.add_argument("model")
    p.add_argument("config")
    p.add_argument("--vote-map")
    _add_data_args(p, test=False)
    p.add_argument("-n", type=int, default=100, help="number of images")
    p.add_argument("--random", action="store_true", help="random binary frames instead of data")
    p.add_argument("--density", type=float, default=0.5)
    p.add_argument("--no-audit", action="store_true", help="skip the recompilation diff")
    p.add_argument("--json")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="summarise simulate statistics files")
    p.add_argument("stats", nargs="+")
    p.add_argument("--out-dir", default="report")
    p.add_argument("--train-log", nargs="*", help="train logs to plot")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("faults", help="single-bit fault injection campaign")
    p.add_argument("model")
    p.add_argument("config")
    _add_data_args(p, test=False)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("-n", type=int, default=100)
    p.add_argument("--random", action="store_true")
    p.add_argument("--no-audit", action="store_true")
    p.add_argument("--json")
    p.set_defaults(func=cmd_faults)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NetSpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STRUCTURE
    except (ShapeError, datasets.ShapeMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE


if __name__ == "__main__":
    sys.exit(main())
