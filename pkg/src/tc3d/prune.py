"""Magnitude pruning and the dense-sparse-dense (DSD) schedule.

Sparsity is per layer, split by kind: every conv3d weight gets the conv
target and the fully-connected weight gets the fc target. Biases are never
pruned.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .consensus import TrainConfig, train
from .optim import OptimState
from .sparse import CONV_INDEX_BITS, FC_INDEX_BITS, csc_encode, flatten_weight

logger = logging.getLogger(__name__)

PHASES = ("sparsifying", "densifying", "pruning")


@dataclass(frozen=True)
class SparsitySchedule:
    conv_target: float = 0.85
    fc_target: float = 0.90
    increment: float = 0.1
    phase: str = "sparsifying"

    def __post_init__(self):
        for t in (self.conv_target, self.fc_target):
            if not 0.0 <= t <= 1.0:
                raise ValueError("sparsity targets must lie in [0, 1]")
        if self.increment <= 0:
            raise ValueError("increment must be positive")
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")

    @classmethod
    def pruning(cls, conv_target=0.90, fc_target=0.95, increment=0.1):
        return cls(conv_target, fc_target, increment, "pruning")

    def target(self, kind):
        return self.fc_target if kind == "fc" else self.conv_target

    def ramp_epochs(self, kind=None):
        """Epochs until the ramp reaches its target (both kinds when ``kind`` is None)."""
        kinds = ("conv3d", "fc") if kind is None else (kind,)
        return max(math.ceil(round(self.target(k) / self.increment, 9)) for k in kinds)

    def at(self, epoch, kind):
        """Sparsity during 1-based ``epoch`` of this phase; epoch 0 is the phase start."""
        t = self.target(kind)
        if self.phase == "densifying":
            return max(0.0, round(t - self.increment * epoch, 12))
        return min(t, round(self.increment * epoch, 12))


def keep_count(n, sparsity):
    """Survivors after pruning a fraction ``sparsity`` of ``n`` weights."""
    return min(n, math.ceil(round((1.0 - sparsity) * n, 9)))


def magnitude_mask(scores, sparsity):
    """Keep-mask dropping the ``sparsity`` fraction with the lowest score.

    Ties go to the lower flat index, so the mask is deterministic.
    """
    flat = np.asarray(scores, dtype=np.float64).ravel()
    drop = flat.size - keep_count(flat.size, sparsity)
    keep = np.ones(flat.size, dtype=bool)
    keep[np.argsort(flat, kind="stable")[:drop]] = False
    return keep.reshape(np.shape(scores))


def apply_sparsity(net, sparsity, scores=None):
    """Prune every weight layer in place and record its keep-mask in ``net.masks``.

    ``sparsity`` maps layer kind ("conv3d"/"fc") to a fraction, or is a
    single fraction for all. Weights already masked stay masked while the
    sparsity does not fall. ``scores`` optionally overrides ``|w|`` per weight
    name.
    """
    for layer in net.weight_layers():
        name = f"{layer.name}.weight"
        s = sparsity[layer.kind] if isinstance(sparsity, dict) else sparsity
        w = layer.params["weight"]
        if scores is not None and name in scores:
            score = scores[name]
        else:
            score = np.abs(w)
            old = net.masks.get(name)
            if old is not None:
                score = np.where(old, score, -1.0)
        mask = magnitude_mask(score, s)
        net.masks[name] = mask
        w *= mask
    return net


def sparsities(schedule, epoch):
    return {kind: schedule.at(epoch, kind) for kind in ("conv3d", "fc")}


def survivor_ratio(net):
    total = kept = 0
    for layer in net.weight_layers():
        w = layer.params["weight"]
        total += w.size
        kept += int(np.count_nonzero(w))
    return kept / total if total else 1.0


@dataclass(frozen=True)
class DsdConfig:
    sparse: SparsitySchedule = SparsitySchedule()
    prune: SparsitySchedule = SparsitySchedule.pruning()
    sparse_epochs: int = 10       # ramp plus hold at target
    dense_epochs: int = 10        # ramp back down to zero, then dense
    prune_epochs: int = 20         # ramp to target, then hold
    lr: float = 0.005             # sparsify and prune phases
    fine_tune_factor: float = 0.1  # densify runs at lr * factor
    batch_size: int = 8
    momentum: float = 0.9
    seed: int = 0


def _epoch(net, videos, cfg, agg, lr, dcfg, seed, optim):
    tcfg = TrainConfig(epochs=1, batch_size=dcfg.batch_size, lr=lr, momentum=dcfg.momentum,
                       milestones=(), seed=seed)
    return train(net, videos, cfg, agg, tcfg, optim=optim)[0]["loss"]


def sparsify_phase(net, videos, cfg, agg, dcfg, on_epoch=None):
    """Train while the magnitude-pruned fraction ramps up to the sparse targets.

    Returns the pre-prune magnitude of every weight at the moment it was
    pruned (survivors score +inf); densify revives weights in that order.
    """
    optim = OptimState(learning_rate=dcfg.lr, momentum=dcfg.momentum)
    pruned_at = {f"{l.name}.weight": np.full(l.params["weight"].shape, np.inf)
                 for l in net.weight_layers()}
    for e in range(1, dcfg.sparse_epochs + 1):
        before = {n: np.abs(net.params()[n]) for n in pruned_at}
        apply_sparsity(net, sparsities(dcfg.sparse, e))
        for n, score in pruned_at.items():
            newly = ~net.masks[n] & np.isinf(score)
            score[newly] = before[n][newly]
        loss = _epoch(net, videos, cfg, agg, dcfg.lr, dcfg, dcfg.seed + e, optim)
        _report(on_epoch, "sparsifying", e, dcfg.sparse, loss)
    return pruned_at


def densify_phase(net, videos, cfg, agg, dcfg, pruned_at, on_epoch=None):
    """Ramp sparsity back to zero at the reduced learning rate.

    Revived weights restart at zero (they were zeroed when pruned); the most
    recently important ones, by ``pruned_at`` score, return first.
    """
    lr = dcfg.lr * dcfg.fine_tune_factor
    optim = OptimState(learning_rate=lr, momentum=dcfg.momentum)
    sched = replace(dcfg.sparse, phase="densifying")
    for e in range(1, dcfg.dense_epochs + 1):
        s = sparsities(sched, e)
        for layer in net.weight_layers():
            n = f"{layer.name}.weight"
            if n in net.masks:
                net.masks[n] = magnitude_mask(pruned_at[n], s[layer.kind])
        if all(m.all() for m in net.masks.values()):
            net.masks.clear()
        loss = _epoch(net, videos, cfg, agg, lr, dcfg, dcfg.seed + 1000 + e, optim)
        _report(on_epoch, "densifying", e, sched, loss)
    net.masks.clear()
    return net


def dsd_train(net, videos, cfg, agg, dcfg=DsdConfig(), on_epoch=None):
    """Sparsify then re-densify ``net`` in place; zero epochs leave it untouched."""
    pruned_at = sparsify_phase(net, videos, cfg, agg, dcfg, on_epoch)
    if dcfg.sparse_epochs == 0:
        return net
    return densify_phase(net, videos, cfg, agg, dcfg, pruned_at, on_epoch)


def prune_phase(net, videos, cfg, agg, dcfg=DsdConfig(), on_epoch=None):
    """Ramp to the final pruning targets, training as in the sparsify phase, then
    clamp exactly."""
    lr = dcfg.lr
    optim = OptimState(learning_rate=lr, momentum=dcfg.momentum)
    for e in range(1, dcfg.prune_epochs + 1):
        apply_sparsity(net, sparsities(dcfg.prune, e))
        loss = _epoch(net, videos, cfg, agg, lr, dcfg, dcfg.seed + 2000 + e, optim)
        _report(on_epoch, "pruning", e, dcfg.prune, loss)
    apply_sparsity(net, {k: dcfg.prune.target(k) for k in ("conv3d", "fc")})
    return net


def prune_final(net, schedule=SparsitySchedule.pruning()):
    """Clamp to the final targets and CSC-encode every weight layer.

    Returns ``({weight name: CscLayer}, surviving-parameter ratio)``.
    """
    apply_sparsity(net, {k: schedule.target(k) for k in ("conv3d", "fc")})
    encoded = {}
    for layer in net.weight_layers():
        w = layer.params["weight"]
        bits = FC_INDEX_BITS if layer.kind == "fc" else CONV_INDEX_BITS
        encoded[f"{layer.name}.weight"] = csc_encode(flatten_weight(w), bits, w.shape)
    return encoded, survivor_ratio(net)


def _report(on_epoch, phase, epoch, schedule, loss):
    rec = {"phase": phase, "epoch": epoch, "conv_sparsity": schedule.at(epoch, "conv3d"),
           "fc_sparsity": schedule.at(epoch, "fc"), "loss": loss}
    logger.debug("%s", rec)
    if on_epoch is not None:
        on_epoch(rec)
