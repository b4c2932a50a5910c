"""Video-level consensus training: S clips, one shared network, one loss.

Every clip of a video goes through the same :class:`~tc3d.nn.Network`; the
S clip score vectors are fused by an aggregation function into a consensus
``G``, and the cross-entropy of ``softmax(G)`` is the video's loss. The
gradient reaching the network is the sum over clips of the aggregation
Jacobian applied to ``dL/dG``.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .nn import DTYPE, softmax, softmax_cross_entropy
from .optim import OptimState, sgd_momentum_step, step_lr
from .sampler import frame_step, gather_clips, sample_indices, tile_windows

logger = logging.getLogger(__name__)

AGGREGATORS = ("average", "max", "weighted", "attention")


class Aggregator:
    """Fusion of per-clip outputs ``[B, S, F]`` into ``[B, F]``.

    ``weighted`` learns one scalar per clip position (initialised to 1/S);
    ``attention`` learns a single kernel ``q`` of length F (initialised to
    zero, i.e. uniform attention).
    """

    def __init__(self, kind="average", S=3, features=None):
        if kind not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {kind!r}")
        self.kind = kind
        self.S = int(S)
        self.params = OrderedDict()
        if kind == "weighted":
            self.params["weights"] = np.full(self.S, 1.0 / self.S)
        elif kind == "attention":
            if features is None:
                raise ValueError("attention aggregation needs the feature length")
            self.params["q"] = np.zeros(int(features))
        self.grads = OrderedDict((k, np.zeros_like(v)) for k, v in self.params.items())
        self._cache = None

    def named_params(self, prefix="agg."):
        return OrderedDict((prefix + k, v) for k, v in self.params.items())

    def named_grads(self, prefix="agg."):
        return OrderedDict((prefix + k, v) for k, v in self.grads.items())

    def zero_grads(self):
        for v in self.grads.values():
            v[...] = 0.0

    def forward(self, clip_outputs):
        G, aux = aggregate(clip_outputs, self)
        self._cache = (np.asarray(clip_outputs, dtype=DTYPE), aux)
        return G

    def backward(self, grad_G):
        F, aux = self._cache
        grad_F, grads = aggregate_backward(grad_G, (F, aux), self)
        for k, g in grads.items():
            self.grads[k] += g
        return grad_F

    def config(self):
        return {"kind": self.kind, "S": self.S,
                "features": int(self.params["q"].shape[0]) if "q" in self.params else None}

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg["kind"], cfg["S"], cfg.get("features"))


def _clip_batch(clip_outputs):
    F = np.asarray(clip_outputs, dtype=DTYPE)
    if F.ndim == 2:
        return F[None], True
    if F.ndim == 3:
        return F, False
    raise ShapeError(f"clip outputs must be [S, F] or [B, S, F], got {F.shape}", F.shape)


def aggregate(clip_outputs, agg):
    """Fuse clip outputs; returns ``(G, aux)``.

    ``aux`` holds the max-pool argmax per element, or the attention weights
    ``omega`` for attention pooling, and is None otherwise.
    """
    if isinstance(clip_outputs, (list, tuple)):
        shapes = {np.shape(c) for c in clip_outputs}
        if len(shapes) != 1:
            raise ShapeError(f"clip outputs disagree in shape: {sorted(shapes)}", *shapes)
    F, single = _clip_batch(clip_outputs)
    aux = None
    if agg.kind == "average":
        G = F.mean(axis=1)
    elif agg.kind == "max":
        aux = F.argmax(axis=1)  # first index wins ties
        G = np.take_along_axis(F, aux[:, None, :], axis=1)[:, 0]
    elif agg.kind == "weighted":
        w = agg.params["weights"]
        if w.shape[0] != F.shape[1]:
            raise ShapeError(f"{F.shape[1]} clips but {w.shape[0]} clip weights", F.shape, w.shape)
        G = np.einsum("s,bsf->bf", w, F)
    else:
        q = agg.params["q"]
        if q.shape[0] != F.shape[2]:
            raise ShapeError(f"attention kernel {q.shape} vs clip features {F.shape}",
                             q.shape, F.shape)
        aux = softmax(F @ q, axis=1)  # omega, [B, S]
        G = np.einsum("bs,bsf->bf", aux, F)
    if single:
        G = G[0]
        aux = None if aux is None else aux[0]
    return G, aux


def aggregate_backward(grad_G, record, agg):
    """Return ``(grad wrt each clip output, grads of the aggregator params)``."""
    F, aux = record
    F, single = _clip_batch(F)
    g = np.asarray(grad_G, dtype=DTYPE)
    if single:
        g = g[None]
        aux = None if aux is None else np.asarray(aux)[None]
    if g.shape != (F.shape[0], F.shape[2]):
        raise ShapeError(f"grad_G shape {g.shape} vs consensus shape {(F.shape[0], F.shape[2])}",
                         g.shape, F.shape)
    S = F.shape[1]
    grads = {}
    if agg.kind == "average":
        grad_F = np.repeat(g[:, None, :] / S, S, axis=1)
    elif agg.kind == "max":
        grad_F = np.zeros_like(F)
        np.put_along_axis(grad_F, aux[:, None, :], g[:, None, :], axis=1)
    elif agg.kind == "weighted":
        w = agg.params["weights"]
        grad_F = w[None, :, None] * g[:, None, :]
        grads["weights"] = np.einsum("bf,bsf->s", g, F)
    else:
        q = agg.params["q"]
        omega = aux
        a = np.einsum("bf,bsf->bs", g, F)                  # dL/d omega_s
        de = omega * (a - (omega * a).sum(axis=1, keepdims=True))  # dL/d e_s
        grad_F = omega[:, :, None] * g[:, None, :] + de[:, :, None] * q[None, None, :]
        grads["q"] = np.einsum("bs,bsf->f", de, F)
    if single:
        grad_F = grad_F[0]
    return grad_F, grads


@dataclass
class ConsensusRecord:
    clip_outputs: np.ndarray          # [S, N]
    consensus: np.ndarray             # G, [N]
    probabilities: np.ndarray         # softmax(G)
    attention_weights: np.ndarray | None = None
    loss: float | None = None
    clips: list = field(default_factory=list)


def _softmax_backward(p, grad_p):
    return p * (grad_p - (grad_p * p).sum(axis=-1, keepdims=True))


def _fused_scores(net, agg, X, B, S, train, rng, on_probabilities):
    F = net.forward(X, train=train, rng=rng).reshape(B, S, net.class_count)
    P = softmax(F, axis=-1) if on_probabilities else None
    G = agg.forward(P if on_probabilities else F)
    return F, P, G


def consensus_forward(video, net, cfg, agg, rng=None, center=True, train=False,
                      on_probabilities=False):
    """Sample S clips, score each with ``net`` and fuse them.

    Evaluation defaults: deterministic center sampling, eval-mode dropout.
    """
    clips = sample_indices(video, cfg, rng=rng, center=center)
    X = gather_clips(video.frames, clips)
    F, _, G = _fused_scores(net, agg, X, 1, len(clips), train, rng, on_probabilities)
    _, aux = agg._cache
    loss = None
    if video.label is not None and video.label >= 0:
        loss, _ = softmax_cross_entropy(G[0], video.label)
    return ConsensusRecord(
        clip_outputs=F[0], consensus=G[0], probabilities=softmax(G[0]),
        attention_weights=aux[0] if agg.kind == "attention" else None,
        loss=loss, clips=clips)


def accumulate_gradients(videos, net, cfg, agg, rng, on_probabilities=False):
    """Forward/backward one minibatch; leaves mean-loss gradients in net and agg.

    Returns the mean video loss.
    """
    if not videos:
        raise ValueError("empty batch")
    clips = [sample_indices(v, cfg, rng=rng) for v in videos]
    X = np.concatenate([gather_clips(v.frames, c) for v, c in zip(videos, clips)])
    B, S = len(videos), cfg.S
    net.zero_grads()
    agg.zero_grads()
    F, P, G = _fused_scores(net, agg, X, B, S, True, rng, on_probabilities)
    grad_G = np.empty_like(G)
    total = 0.0
    for b, v in enumerate(videos):
        loss, grad_G[b] = softmax_cross_entropy(G[b], v.label)
        total += loss
    grad_G /= B
    grad_in = agg.backward(grad_G)
    if on_probabilities:
        grad_in = _softmax_backward(P, grad_in)
    net.backward(grad_in.reshape(B * S, -1), input_grad=False)
    return total / B


def consensus_train_step(videos, net, cfg, agg, optim, rng, on_probabilities=False):
    """One optimizer step on a minibatch of videos; returns the mean loss."""
    loss = accumulate_gradients(videos, net, cfg, agg, rng, on_probabilities)
    params = net.params()
    params.update(agg.named_params())
    grads = net.grads()
    grads.update(agg.named_grads())
    sgd_momentum_step(params, grads, optim, masks=net.masks)
    return loss


# ---------------------------------------------------------------------------
# inference


def _run_clips(net, X, chunk):
    out = [net.forward(X[i:i + chunk]) for i in range(0, len(X), chunk)]
    return np.concatenate(out)


def predict(videos, net, cfg, agg, mode="s-clips", chunk=64, on_probabilities=False):
    """Per-video class probabilities ``[n_videos, N]``.

    ``s-clips`` fuses the S center-sampled clips with ``agg``; ``all-clips``
    averages the scores of every tiled clip window.
    """
    probs = np.empty((len(videos), net.class_count))
    if mode == "s-clips":
        clips = [sample_indices(v, cfg, center=True) for v in videos]
        X = np.concatenate([gather_clips(v.frames, c) for v, c in zip(videos, clips)])
        F = _run_clips(net, X, chunk).reshape(len(videos), cfg.S, -1)
        if on_probabilities:
            F = softmax(F, axis=-1)
        G, _ = aggregate(F, agg)
        return softmax(G, axis=-1)
    if mode != "all-clips":
        raise ValueError(f"unknown eval mode {mode!r}")
    for i, v in enumerate(videos):
        windows = tile_windows(v.frame_count, cfg.k, frame_step(v.frame_count, cfg))
        F = _run_clips(net, gather_clips(v.frames, windows), chunk)
        probs[i] = softmax(F.mean(axis=0))
    return probs


def clips_per_video(frame_count, cfg, mode):
    if mode == "s-clips":
        return cfg.S
    return len(tile_windows(frame_count, cfg.k, frame_step(frame_count, cfg)))


def evaluate(videos, net, cfg, agg, mode="s-clips", **kw):
    """Top-1 accuracy in [0, 1]."""
    if not videos:
        return float("nan")
    probs = predict(videos, net, cfg, agg, mode, **kw)
    labels = np.array([v.label for v in videos])
    return float((probs.argmax(axis=1) == labels).mean())


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.005
    momentum: float = 0.9
    # learning rate drops 10x at these fractions of the run
    milestones: tuple = (0.5, 0.8)
    seed: int = 0
    on_probabilities: bool = False

    def milestone_epochs(self):
        return tuple(int(math.ceil(f * self.epochs)) for f in self.milestones)


def train(net, videos, cfg, agg, tcfg, on_epoch=None, optim=None, eval_videos=None):
    """Minibatch SGD over ``videos`` for ``tcfg.epochs`` epochs.

    Clip indices are re-drawn every epoch. ``on_epoch`` receives one dict per
    epoch (epoch, lr, loss and, when ``eval_videos`` is given, accuracy).
    Returns the list of those records.
    """
    rng = np.random.default_rng(tcfg.seed)
    optim = optim or OptimState(learning_rate=tcfg.lr, momentum=tcfg.momentum)
    history = []
    milestones = tcfg.milestone_epochs()
    for epoch in range(tcfg.epochs):
        optim.learning_rate = step_lr(tcfg.lr, epoch, milestones)
        order = rng.permutation(len(videos))
        losses = []
        for i in range(0, len(order), tcfg.batch_size):
            batch = [videos[j] for j in order[i:i + tcfg.batch_size]]
            losses.append(consensus_train_step(batch, net, cfg, agg, optim, rng,
                                               tcfg.on_probabilities) * len(batch))
        record = {"epoch": epoch + 1, "lr": optim.learning_rate,
                  "loss": float(sum(losses) / len(videos))}
        if eval_videos is not None:
            record["accuracy"] = evaluate(eval_videos, net, cfg, agg)
        logger.debug("epoch %d loss %.4f", record["epoch"], record["loss"])
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return history
