"""Session fixtures shared by the acceptance and integration suites.

Training the reference model and running the compression pipeline take
minutes, so each happens once per session. The acceptance tests log one
verdict per criterion and the terminal summary prints them together.
"""

import time

import pytest

from tc3d.cli import compress_config, sampler_config, train_config
from tc3d.config import RunConfig
from tc3d.consensus import Aggregator, evaluate, train
from tc3d.data import SyntheticSpec, generate
from tc3d.nn import build_reference_net
from tc3d.pipeline import compress_pipeline

VERDICTS = {}


def record(number, title, passed, detail):
    VERDICTS[number] = (title, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        title, passed, detail = VERDICTS[number]
        terminalreporter.write_line(
            f"{'PASS' if passed else 'FAIL'}  {number:>2}. {title}: {detail}")


def train_model(cfg, train_videos):
    """Train the reference net under ``cfg``; returns ``(net, agg, sampler config)``."""
    _, C, H, W = train_videos[0].frames.shape
    net = build_reference_net(cfg.classes, (C, cfg.k, H, W), cfg.channels, cfg.dropout,
                              cfg.residual, cfg.seed)
    scfg = sampler_config(cfg)
    agg = Aggregator(cfg.agg, cfg.S, cfg.classes)
    train(net, train_videos, scfg, agg, train_config(cfg))
    return net, agg, scfg


@pytest.fixture(scope="session")
def run_config():
    return RunConfig()


@pytest.fixture(scope="session")
def dataset(run_config):
    cfg = run_config
    return generate(SyntheticSpec(classes=cfg.classes, train_per_class=cfg.train_per_class,
                                  test_per_class=cfg.test_per_class, frames=cfg.frames,
                                  size=cfg.size, seed=cfg.data_seed))


@pytest.fixture(scope="session")
def baseline(run_config, dataset):
    train_videos, test_videos = dataset
    net, agg, scfg = train_model(run_config, train_videos)
    return {"net": net, "agg": agg, "cfg": scfg,
            "test_accuracy": evaluate(test_videos, net, scfg, agg),
            "train_accuracy": evaluate(train_videos, net, scfg, agg)}


@pytest.fixture(scope="session")
def compressed(run_config, dataset, baseline):
    train_videos, test_videos = dataset
    t0 = time.perf_counter()
    result = compress_pipeline(baseline["net"], baseline["agg"], baseline["cfg"],
                               train_videos, test_videos, compress_config(run_config))
    result.seconds = time.perf_counter() - t0
    return result
