"""``tc3d`` command line: gen-data, train, compress, infer, bench.

Every command prints line-delimited JSON records to stdout (or ``--log``),
starting with a ``config`` record that echoes the full resolved RunConfig.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as runconfig
from .bench import benchmark
from .consensus import Aggregator, TrainConfig, evaluate, predict, train
from .container import CSC_QUANT_HUFF, DENSE, Container, build_container
from .data import SyntheticSpec, load_dataset, write_dataset
from .errors import TC3DError
from .nn import build_reference_net
from .pipeline import CompressConfig, compress_pipeline
from .prune import DsdConfig, SparsitySchedule
from .sampler import SamplerConfig


class JsonLog:
    def __init__(self, stream):
        self.stream = stream

    def __call__(self, record):
        self.stream.write(json.dumps(record, sort_keys=True) + "\n")
        self.stream.flush()


def sampler_config(cfg):
    return SamplerConfig(cfg.S, cfg.k, cfg.o, cfg.strategy, cfg.seed)


def train_config(cfg):
    return TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                       momentum=cfg.momentum, milestones=cfg.milestones, seed=cfg.seed)


def compress_config(cfg):
    stages = set(cfg.stages)
    unknown = stages - {"dsd", "prune", "quantize", "huffman"}
    if unknown:
        raise runconfig.ConfigError(f"unknown compression stages {sorted(unknown)}")
    dsd = DsdConfig(
        sparse=SparsitySchedule(cfg.sparse_conv, cfg.sparse_fc, cfg.sparsity_step),
        prune=SparsitySchedule.pruning(cfg.prune_conv, cfg.prune_fc, cfg.sparsity_step),
        sparse_epochs=cfg.sparse_epochs, dense_epochs=cfg.dense_epochs,
        prune_epochs=cfg.prune_epochs, lr=cfg.dsd_lr, fine_tune_factor=cfg.fine_tune_factor,
        batch_size=cfg.batch_size, momentum=cfg.momentum, seed=cfg.seed)
    return CompressConfig(dsd="dsd" in stages, prune="prune" in stages,
                          quantize="quantize" in stages, huffman="huffman" in stages,
                          schedule=dsd, conv_bits=cfg.conv_bits, fc_bits=cfg.fc_bits,
                          finetune_epochs=cfg.finetune_epochs, finetune_lr=cfg.finetune_lr,
                          seed=cfg.seed)


def synthetic_spec(cfg):
    return SyntheticSpec(classes=cfg.classes, train_per_class=cfg.train_per_class,
                         test_per_class=cfg.test_per_class, frames=cfg.frames,
                         size=cfg.size, seed=cfg.data_seed)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg, args, log):
    train_path, test_path = write_dataset(cfg.data, synthetic_spec(cfg))
    for path in (train_path, test_path):
        log({"event": "wrote", "path": str(path), "bytes": path.stat().st_size})


def cmd_train(cfg, args, log):
    train_set, test_set, n_classes = load_dataset(cfg.data)
    _, C, H, W = train_set[0].frames.shape
    net = build_reference_net(n_classes, (C, cfg.k, H, W), cfg.channels, cfg.dropout,
                              cfg.residual, cfg.seed)
    scfg = sampler_config(cfg)
    agg = Aggregator(cfg.agg, cfg.S, n_classes)
    train(net, train_set, scfg, agg, train_config(cfg),
          on_epoch=lambda r: log({"event": "epoch", **r}), eval_videos=test_set)
    size = build_container(net, agg, scfg, DENSE).write(args.out)
    log({"event": "wrote", "path": str(args.out), "bytes": size, "encoding": "dense",
         "train_accuracy": evaluate(train_set, net, scfg, agg),
         "test_accuracy": evaluate(test_set, net, scfg, agg)})


def cmd_compress(cfg, args, log):
    model = Container.read(args.model)
    train_set, test_set, _ = load_dataset(cfg.data)
    net, agg, scfg = model.network(), model.aggregator(), model.sampler()
    result = compress_pipeline(net, agg, scfg, train_set, test_set, compress_config(cfg),
                               on_event=lambda r: log(r if "event" in r else
                                                      {"event": "finetune", **r}))
    size = result.container.write(args.out)
    log({"event": "wrote", "path": str(args.out), "bytes": size,
         "ratio": size / result.report[0].bytes, "survivors": result.survivors})


def cmd_infer(cfg, args, log):
    model = Container.read(args.model)
    train_set, test_set, _ = load_dataset(cfg.data)
    videos = test_set if args.split == "test" else train_set
    net = model.network(sparse_fc=model.encoding != DENSE)
    agg, scfg = model.aggregator(), model.sampler()
    probs = predict(videos, net, scfg, agg, cfg.eval_mode)
    for i, (v, p) in enumerate(zip(videos, probs)):
        log({"event": "prediction", "video": i, "label": v.label, "predicted": int(p.argmax()),
             "probabilities": [float(x) for x in p]})
    labels = np.array([v.label for v in videos])
    log({"event": "summary", "split": args.split, "mode": cfg.eval_mode, "videos": len(videos),
         "accuracy": float((probs.argmax(1) == labels).mean())})


def cmd_bench(cfg, args, log):
    model = Container.read(args.model)
    _, test_set, _ = load_dataset(cfg.data)
    net = model.network(sparse_fc=model.encoding != DENSE)
    size = Path(args.model).stat().st_size
    for row in benchmark(net, model.aggregator(), model.sampler(), test_set, size,
                         cfg.bench_reps, cfg.threads):
        log({"event": "bench", **row})


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "compress": cmd_compress,
            "infer": cmd_infer, "bench": cmd_bench}


def build_parser():
    parser = argparse.ArgumentParser(prog="tc3d", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--log", help="write JSON records here instead of stdout")
        for key in runconfig.FIELDS:
            p.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="VALUE")
        if name in ("train", "compress"):
            p.add_argument("--out", required=True, help="container to write")
        if name in ("compress", "infer", "bench"):
            p.add_argument("--model", required=True, help="container to read")
        if name == "infer":
            p.add_argument("--split", choices=("test", "train"), default="test")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    stream = open(args.log, "w") if args.log else sys.stdout
    log = JsonLog(stream)
    try:
        overrides = {key[4:]: runconfig.parse_value(key[4:], value)
                     for key, value in vars(args).items()
                     if key.startswith("cfg_") and value is not None}
        cfg = runconfig.load(args.config, overrides)
        paths = {k: getattr(args, k) for k in ("out", "model", "split") if hasattr(args, k)}
        log({"event": "config", "command": args.command, "args": paths,
             "config": cfg.as_dict()})
        COMMANDS[args.command](cfg, args, log)
    except (TC3DError, OSError) as exc:
        log({"event": "error", "type": type(exc).__name__, "message": str(exc)})
        return 2
    finally:
        if stream is not sys.stdout:
            stream.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
