"""Synthetic long-term-motion videos and their raw tensor file format.

A bright Gaussian blob rests on a dark, noisy field. Somewhere in the video
(at a random time) it performs two short sub-motions back to back, and the
class is the ordered pair. The four classes are::

    0 left-then-up    1 up-then-left    2 right-then-down    3 down-then-right

A clip that misses the moment one sub-motion hands over to the other sees at
most one sub-motion and cannot tell the two classes sharing it apart; clips
that sit on the still stretches see nothing at all. Covering the whole video
with several clips is what makes the class recoverable.

File layout (little-endian)::

    magic "TC3V" | u16 version | u32 n_videos | u32 frames | u32 channels
    | u32 height | u32 width | u32 n_classes | u8 dtype (1 = float32)
    | n_videos x u32 labels | n_videos*frames*channels*height*width float32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptStreamError
from .sampler import VideoSample

MAGIC = b"TC3V"
VERSION = 1
_HEADER = struct.Struct("<4sHIIIIIIB")

CLASS_NAMES = ("left-then-up", "up-then-left", "right-then-down", "down-then-right")
_DIRECTIONS = {"left": (-1, 0), "right": (1, 0), "up": (0, -1), "down": (0, 1)}
_PAIRS = (("left", "up"), ("up", "left"), ("right", "down"), ("down", "right"))


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 4
    train_per_class: int = 50
    test_per_class: int = 20
    frames: int = 48
    size: int = 16
    motion_frames: int = 8      # length of each sub-motion
    speed: float = 1.0          # pixels per frame
    blob_sigma: float = 1.0
    amplitude: float = 20.0     # blob peak over the zero background
    noise: float = 1.0
    seed: int = 7

    def __post_init__(self):
        if not 1 <= self.classes <= len(_PAIRS):
            raise ValueError(f"classes must be in [1, {len(_PAIRS)}]")
        if self.frames < 2 * self.motion_frames:
            raise ValueError("video too short for two sub-motions")


def render_video(label, spec, rng):
    """One ``[frames, 1, size, size]`` float array for class ``label``."""
    n, size, m = spec.frames, spec.size, spec.motion_frames
    first, second = (_DIRECTIONS[d] for d in _PAIRS[label])
    speed = spec.speed * rng.uniform(0.85, 1.15)
    t0 = int(rng.integers(0, n - 2 * m + 1))

    # per-frame displacement; still before t0 and after t0 + 2m
    steps = np.zeros((n, 2))
    steps[t0 + 1:t0 + m + 1] = first
    steps[t0 + m + 1:t0 + 2 * m + 1] = second
    path = np.cumsum(steps[:n], axis=0) * speed

    margin = 3.0 * spec.blob_sigma
    lo = np.maximum(margin - path.min(axis=0), margin)
    hi = np.minimum(size - 1 - margin - path.max(axis=0), size - 1 - margin)
    origin = rng.uniform(lo, np.maximum(hi, lo))
    centers = origin + path

    yy, xx = np.mgrid[0:size, 0:size]
    dx = xx[None] - centers[:, 0, None, None]
    dy = yy[None] - centers[:, 1, None, None]
    frames = spec.amplitude * np.exp(-(dx ** 2 + dy ** 2) / (2 * spec.blob_sigma ** 2))
    frames += rng.normal(0.0, spec.noise, size=frames.shape)
    return frames[:, None].astype(np.float32)


def generate(spec=SyntheticSpec()):
    """Balanced ``(train, test)`` lists of :class:`VideoSample`, fixed by ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    splits = []
    for per_class in (spec.train_per_class, spec.test_per_class):
        labels = np.repeat(np.arange(spec.classes), per_class)
        labels = labels[rng.permutation(len(labels))]
        splits.append([VideoSample(render_video(int(c), spec, rng).astype(np.float64), int(c))
                       for c in labels])
    return tuple(splits)


def write_videos(path, videos, n_classes):
    path = Path(path)
    if videos:
        shape = videos[0].frames.shape
    else:
        shape = (0, 0, 0, 0)
    header = _HEADER.pack(MAGIC, VERSION, len(videos), *shape, n_classes, 1)
    labels = np.array([v.label for v in videos], dtype="<u4")
    body = np.stack([v.frames for v in videos]).astype("<f4") if videos else np.empty(0, "<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(labels.tobytes())
        fh.write(body.tobytes())


def read_videos(path):
    """Returns ``(videos, n_classes)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptStreamError(f"{path}: truncated header")
    magic, version, count, frames, ch, h, w, n_classes, dtype = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION or dtype != 1:
        raise CorruptStreamError(f"{path}: not a version-{VERSION} TC3V float32 file")
    off = _HEADER.size
    labels = np.frombuffer(raw, "<u4", count, off)
    off += 4 * count
    n_values = count * frames * ch * h * w
    if len(raw) != off + 4 * n_values:
        raise CorruptStreamError(f"{path}: expected {off + 4 * n_values} bytes, got {len(raw)}")
    data = np.frombuffer(raw, "<f4", n_values, off).astype(np.float64)
    data = data.reshape(count, frames, ch, h, w)
    return [VideoSample(data[i], int(labels[i])) for i in range(count)], int(n_classes)


def write_dataset(directory, spec=SyntheticSpec()):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    train, test = generate(spec)
    write_videos(directory / "train.tc3v", train, spec.classes)
    write_videos(directory / "test.tc3v", test, spec.classes)
    return directory / "train.tc3v", directory / "test.tc3v"


def load_dataset(directory):
    directory = Path(directory)
    train, n_classes = read_videos(directory / "train.tc3v")
    test, _ = read_videos(directory / "test.tc3v")
    return train, test, n_classes
