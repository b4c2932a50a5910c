"""Split a video into S temporal parts and draw one k-frame clip per part.

Two strategies are supported:

``uniform-spread``
    The part of ``M`` frames is cut into ``k`` fragments of ``M // k`` frames
    and one frame is drawn from each fragment.
``consecutive``
    One start is drawn in ``[0, M - k*o)`` and the clip takes ``k`` frames
    spaced ``o`` apart.

All random draws are uniform integers on half-open ranges. With
``center=True`` every draw is replaced by the lower midpoint of its range,
which is what evaluation uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, VideoTooShortError

STRATEGIES = ("uniform-spread", "consecutive")


@dataclass(frozen=True)
class SamplerConfig:
    S: int = 3
    k: int = 8
    o: int = 2
    strategy: str = "consecutive"
    seed: int = 0

    def __post_init__(self):
        if self.S < 1 or self.k < 1 or self.o < 1:
            raise ConfigError(f"S, k, o must be >= 1, got S={self.S} k={self.k} o={self.o}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown sampling strategy {self.strategy!r}")

    @property
    def min_frames(self):
        per_part = self.k * self.o if self.strategy == "consecutive" else self.k
        return self.S * per_part


@dataclass
class VideoSample:
    """Frames ``[N, C, H, W]`` and a class label."""

    frames: np.ndarray
    label: int

    @property
    def frame_count(self):
        return int(self.frames.shape[0])


@dataclass
class ClipSet:
    clips: list            # S int arrays of k frame indices
    clip_tensors: np.ndarray  # [S, C, k, H, W]


def _frame_count(video):
    return video.frame_count if isinstance(video, VideoSample) else int(video)


def _draw(rng, n, center):
    if center:
        return (n - 1) // 2
    return int(rng.integers(0, n))


def segment_video(video, cfg):
    """S contiguous ``(start, stop)`` parts of ``M = N // S`` frames each.

    Trailing ``N - S*M`` frames are left out.
    """
    n = _frame_count(video)
    if n < cfg.min_frames:
        raise VideoTooShortError(n, cfg.min_frames)
    m = n // cfg.S
    return [(i * m, (i + 1) * m) for i in range(cfg.S)]


def sample_uniform_spread(part, cfg, rng=None, center=False):
    start, stop = part
    m = stop - start
    if m < cfg.k:
        raise VideoTooShortError(m, cfg.k)
    step = m // cfg.k
    return np.array([start + step * i + _draw(rng, step, center) for i in range(cfg.k)])


def sample_consecutive(part, cfg, rng=None, center=False):
    """k indices ``o`` apart from a start drawn in ``[0, max(M - k*o, 1))``.

    A part of exactly ``k*o`` frames is accepted and forces start 0, which
    still keeps the last index inside the part.
    """
    start, stop = part
    m = stop - start
    if m < cfg.k * cfg.o:
        raise VideoTooShortError(m, cfg.k * cfg.o)
    first = start + _draw(rng, max(m - cfg.k * cfg.o, 1), center)
    return first + cfg.o * np.arange(cfg.k)


def sample_indices(video, cfg, rng=None, center=False):
    """One index array per part, following ``cfg.strategy``."""
    if rng is None and not center:
        rng = np.random.default_rng(cfg.seed)
    draw = sample_consecutive if cfg.strategy == "consecutive" else sample_uniform_spread
    return [draw(part, cfg, rng, center) for part in segment_video(video, cfg)]


def gather_clips(frames, clips):
    """Stack frame index lists into ``[n_clips, C, k, H, W]``."""
    idx = np.stack(clips)
    return np.ascontiguousarray(frames[idx].transpose(0, 2, 1, 3, 4))


def assemble_clips(video, cfg, rng=None, center=False):
    clips = sample_indices(video, cfg, rng, center)
    return ClipSet(clips=clips, clip_tensors=gather_clips(video.frames, clips))


def frame_step(frame_count, cfg):
    """Spacing between successive clip frames that training sees."""
    if cfg.strategy == "consecutive":
        return cfg.o
    return max((frame_count // cfg.S) // cfg.k, 1)


def tile_windows(frame_count, k, step=1):
    """Every clip window of ``k`` frames at spacing ``step`` covering the video.

    The video is cut into blocks of ``k*step`` frames; each block holds
    ``step`` interleaved windows that share no frame. A trailing partial
    block is replaced by one aligned to the last frame.
    """
    span = k * step
    if frame_count < span:
        raise VideoTooShortError(frame_count, span)
    starts = list(range(0, frame_count - span + 1, span))
    if starts[-1] + span < frame_count:
        starts.append(frame_count - span)
    return [b + r + step * np.arange(k) for b in starts for r in range(step)]
