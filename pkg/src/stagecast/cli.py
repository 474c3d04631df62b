"""Command-line pipeline: ``stagecast {synth,build-dataset,train,eval,predict,export-plot}``.

Each command that writes files also writes a JSON manifest next to them with
sha256 digests of every input and output. Digests depend only on content, so
rerunning a command on the same inputs reproduces them; wall-clock timings are
recorded in the manifest but kept out of the digests.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields

import numpy as np

from . import __version__
from .dataset import VARIANTS, get_variant, load_dataset, save_dataset, split
from .dataset import build_dataset as _build_dataset
from .errors import DataError, InvalidConfig, NonFiniteLoss, NumericError, StagecastError, VariantMismatch
from .ingestion import parse_precip_file, parse_stage_file, parse_utc
from .models import FCNet, FCNetConfig, ForecasterConfig, GRUForecaster, config_digest, load_checkpoint, save_checkpoint
from .network import read_graph
from .synthetic import WorldConfig, gen_world, write_world
from .training import TrainConfig, evaluate, predict, train, write_trace

logger = logging.getLogger("stagecast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# --- config handling ---------------------------------------------------------


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, pairs) -> dict:
    """Apply ``key.sub=value`` overrides; values are parsed as JSON when possible."""
    out = json.loads(json.dumps(config))
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set {key}: {p} is not a section")
        node[leaf] = _parse_value(value)
    return out


def load_config(path, overrides=()) -> dict:
    if path is None:
        config = {}
    else:
        try:
            with open(path, encoding="utf-8") as fh:
                config = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: {exc}") from None
        if not isinstance(config, dict):
            raise InvalidConfig(f"{path}: top level must be an object")
    return apply_overrides(config, overrides)


def canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, config, inputs, outputs, timings):
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "config_digest": hashlib.sha256(canonical(config)).hexdigest(),
        "inputs": {name: {"path": p, "sha256": file_digest(p)} for name, p in sorted(inputs.items())},
        "outputs": {name: {"path": p, "sha256": file_digest(p)} for name, p in sorted(outputs.items())},
        "timings": {k: round(v, 6) for k, v in sorted(timings.items())},
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest


def _manifest_beside(path):
    return f"{path}.manifest.json"


# --- commands ---------------------------------------------------------------


def cmd_synth(args):
    started = time.perf_counter()
    config = load_config(args.config, args.set)
    cfg = WorldConfig.from_dict(config)
    world = gen_world(cfg)
    paths = write_world(world, args.out)
    write_manifest(
        os.path.join(args.out, "manifest.json"),
        "synth",
        cfg.to_dict(),
        {"config": args.config},
        paths,
        {"total_s": time.perf_counter() - started},
    )
    print(f"wrote world with {len(world.graph.sensors)} sensors to {args.out}")
    return EXIT_OK


def cmd_build_dataset(args):
    started = time.perf_counter()
    variant = get_variant(args.variant)
    try:
        t0, t1 = parse_utc(args.range[0]), parse_utc(args.range[1])
    except ValueError as exc:
        raise UsageError(f"--range: {exc}") from None
    graph = read_graph(args.graph)
    stage = parse_stage_file(args.stage)
    precip = parse_precip_file(args.precip)
    loaded = time.perf_counter()
    data, report = _build_dataset(graph, stage, precip, variant, t0, t1, workers=args.workers)
    built = time.perf_counter()
    save_dataset(data, args.out)
    outputs = {"dataset": args.out}
    if args.skips:
        with open(args.skips, "w", encoding="utf-8", newline="\n") as fh:
            report.to_csv(fh)
        outputs["skips"] = args.skips
    config = {"variant": variant.name, "range": list(args.range), "step_minutes": 15}
    write_manifest(
        _manifest_beside(args.out),
        "build-dataset",
        config,
        {"graph": args.graph, "stage": args.stage, "precip": args.precip},
        outputs,
        {"load_s": loaded - started, "build_s": built - loaded, "total_s": time.perf_counter() - started},
    )
    print(f"{len(data)} entries, {len(report.skipped)} skipped of {report.attempted} attempted")
    return EXIT_OK


TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"checkpoint_path"}


def _make_net(kind, model_cfg, variant):
    if kind == "gru":
        if variant.name != "larger":
            raise VariantMismatch(
                f"the GRU forecaster needs the larger variant, dataset is {variant.name!r}"
            )
        return GRUForecaster(ForecasterConfig(**model_cfg))
    widths = model_cfg.get("widths")
    if widths is None:
        hidden = model_cfg.get("hidden", [350, 500, 350])
        widths = [variant.input_len, *hidden, variant.output_len]
    return FCNet(FCNetConfig(tuple(widths)))


def cmd_train(args):
    started = time.perf_counter()
    config = load_config(args.config, args.set)
    unknown = set(config) - {"train", "model", "split"}
    if unknown:
        raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")
    train_cfg = dict(config.get("train", {}))
    bad = set(train_cfg) - TRAIN_KEYS
    if bad:
        raise InvalidConfig(f"unknown train keys: {sorted(bad)}")
    split_cfg = {"train_fraction": 0.8, "seed": train_cfg.get("seed", 0), "mode": "random"}
    split_cfg.update(config.get("split", {}))

    data = load_dataset(args.dataset)
    try:
        net = _make_net(args.model, dict(config.get("model", {})), data.variant)
        tc = TrainConfig(**train_cfg)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(str(exc)) from None
    train_set, test_set = split(data, **split_cfg)

    os.makedirs(args.out, exist_ok=True)
    paths = {
        "checkpoint": os.path.join(args.out, "checkpoint.ckpt"),
        "report": os.path.join(args.out, "report.csv"),
        "test_set": os.path.join(args.out, "test.ds"),
    }
    if tc.checkpoint_every:
        tc.checkpoint_path = os.path.join(args.out, "latest.ckpt")
    try:
        ckpt, report = train(net, train_set, tc, test=test_set)
    except NonFiniteLoss as exc:
        if exc.checkpoint is not None:
            good = os.path.join(args.out, "last_good.ckpt")
            c = exc.checkpoint
            save_checkpoint(c.network, c.optimizer, good, c.meta)
            logger.error("saved last good checkpoint to %s", good)
        raise
    trained = time.perf_counter()
    save_checkpoint(ckpt.network, ckpt.optimizer, paths["checkpoint"], {**ckpt.meta, "model": args.model})
    with open(paths["report"], "w", encoding="utf-8", newline="\n") as fh:
        report.to_csv(fh)
    save_dataset(test_set, paths["test_set"])
    resolved = {
        "model": {"kind": args.model, "config": asdict(net.config), "digest": ckpt.digest},
        "train": {k: v for k, v in asdict(tc).items() if k != "checkpoint_path"},
        "split": split_cfg,
    }
    write_manifest(
        os.path.join(args.out, "manifest.json"),
        "train",
        resolved,
        {"dataset": args.dataset, **({"config": args.config} if args.config else {})},
        paths,
        {"train_s": report.wall_time, "total_s": trained - started},
    )
    print(f"trained {args.model}: final loss {report.epoch_losses[-1]:.6g}, test MSE {report.test_mse:.6g} ft^2")
    return EXIT_OK


def cmd_eval(args):
    data = load_dataset(args.dataset)
    ckpt = load_checkpoint(args.checkpoint)
    print(f"{evaluate(ckpt.network, data)!r}")
    return EXIT_OK


def cmd_predict(args):
    data = load_dataset(args.dataset)
    ckpt = load_checkpoint(args.checkpoint)
    if not 0 <= args.entry < len(data):
        raise UsageError(f"--entry {args.entry} outside 0..{len(data) - 1}")
    y = predict(ckpt.network, data[args.entry])
    print("horizon,predicted")
    for h, v in enumerate(np.asarray(y).tolist()):
        print(f"{h},{v!r}")
    return EXIT_OK


def cmd_export_plot(args):
    started = time.perf_counter()
    data = load_dataset(args.dataset)
    ckpt = load_checkpoint(args.checkpoint)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        write_trace(ckpt.network, data, fh, sensor=args.sensor)
    write_manifest(
        _manifest_beside(args.out),
        "export-plot",
        {"sensor": args.sensor},
        {"dataset": args.dataset, "checkpoint": args.checkpoint},
        {"trace": args.out},
        {"total_s": time.perf_counter() - started},
    )
    return EXIT_OK


# --- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stagecast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic world")
    p.add_argument("--config", required=True, help="JSON world config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-dataset", help="compile dataset entries over a time range")
    p.add_argument("--graph", required=True)
    p.add_argument("--stage", required=True)
    p.add_argument("--precip", required=True)
    p.add_argument("--variant", required=True, choices=sorted(VARIANTS))
    p.add_argument("--range", required=True, nargs=2, metavar=("START", "END"), help="half-open UTC range")
    p.add_argument("--out", required=True, help="dataset file")
    p.add_argument("--skips", help="write the skip report CSV here")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="split a dataset, train a model, report test MSE")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True, choices=("fc", "gru"))
    p.add_argument("--config", help="JSON with optional train/model/split sections")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. train.epochs=5")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print the MSE of a checkpoint on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="print the 24 forecasts for one dataset entry")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--entry", required=True, type=int, help="entry index")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export-plot", help="write measured-vs-predicted CSV for one sensor")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--sensor", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"stagecast: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"stagecast: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"stagecast: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except StagecastError as exc:
        print(f"stagecast: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
