"""Throughput, FLOPs and size of a model under each evaluation mode."""

from __future__ import annotations

import statistics
import time

from threadpoolctl import threadpool_limits

from .consensus import clips_per_video, predict
from .nn import count_flops

MODES = ("s-clips", "all-clips")


def video_flops(net, video, cfg, mode):
    """Forward FLOPs to classify one video: per-clip cost times clips used."""
    _, C, H, W = video.frames.shape
    return count_flops(net, (C, cfg.k, H, W)) * clips_per_video(video.frame_count, cfg, mode)


def time_predict(videos, net, cfg, agg, mode, reps=10):
    """Wall seconds of ``reps`` full passes of :func:`predict` over ``videos``."""
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        predict(videos, net, cfg, agg, mode)
        times.append(time.perf_counter() - t0)
    return times


def benchmark(net, agg, cfg, videos, container_bytes, reps=10, threads=1, modes=MODES):
    """One report dict per mode.

    FPS counts frames of video consumed (every frame of every video, sampled
    or not) per wall second, taking the median over ``reps`` timed passes.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    frames = sum(v.frame_count for v in videos)
    rows = []
    with threadpool_limits(limits=threads):
        for mode in modes:
            times = time_predict(videos, net, cfg, agg, mode, reps)
            median = statistics.median(times)
            flops = sum(video_flops(net, v, cfg, mode) for v in videos)
            rows.append({"mode": mode, "videos": len(videos), "frames": frames,
                         "reps": reps, "seconds_median": median, "fps": frames / median,
                         "flops_per_video": flops / len(videos),
                         "bytes": container_bytes, "threads": threads})
    return rows
