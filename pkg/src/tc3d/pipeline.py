"""The full compression run: DSD, pruning, weight sharing, Huffman coding.

Each stage is measured by s-clips accuracy on the evaluation videos and by
the byte size of the container it would produce. From the prune stage on,
the working network is always the one decoded back from that container, so
the reported accuracy is the accuracy of the bytes on disk.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .consensus import accumulate_gradients, evaluate
from .container import CSC, CSC_QUANT, CSC_QUANT_HUFF, DENSE, build_container
from .errors import ConfigError
from .prune import DsdConfig, densify_phase, prune_phase, sparsify_phase, survivor_ratio
from .quantize import kmeans_quantize, shared_centroid_step
from .sparse import CONV_INDEX_BITS, FC_INDEX_BITS

logger = logging.getLogger(__name__)

STAGES = ("Baseline", "Sparse", "Dense", "Prune", "Quantization", "Huffman")


@dataclass(frozen=True)
class CompressConfig:
    dsd: bool = True
    prune: bool = True
    quantize: bool = True
    huffman: bool = True
    schedule: DsdConfig = DsdConfig()
    conv_bits: int = CONV_INDEX_BITS
    fc_bits: int = FC_INDEX_BITS
    finetune_epochs: int = 2
    finetune_lr: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.quantize and not self.prune:
            raise ConfigError("quantization runs on pruned survivors; enable prune")
        if self.huffman and not self.quantize:
            raise ConfigError("Huffman coding needs quantized streams; enable quantize")

    def clusters(self, kind):
        # codebook index 0 is reserved for filler entries
        bits = self.fc_bits if kind == "fc" else self.conv_bits
        return (1 << bits) - 1


@dataclass
class StageRecord:
    stage: str
    accuracy: float
    bytes: int
    encoding: str
    skipped: bool = False

    def as_dict(self):
        return {"stage": self.stage, "accuracy": self.accuracy, "bytes": self.bytes,
                "encoding": self.encoding, "skipped": self.skipped}


@dataclass
class CompressionResult:
    container: object
    report: list
    net: object
    codebooks: dict = field(default_factory=dict)
    survivors: float = 1.0
    quantized_accuracy: float = None  # after clustering, before centroid fine-tuning

    @property
    def ratio(self):
        return self.report[-1].bytes / self.report[0].bytes


# ---------------------------------------------------------------------------
# weight sharing


@dataclass
class LayerCodebook:
    centroids: np.ndarray   # float64 holding fp32-representable values
    assignments: np.ndarray  # one per surviving weight, in flat order
    mask: np.ndarray         # surviving positions
    requested_k: int


def _fp32_nonzero(c):
    c = np.asarray(c, dtype=np.float32)
    tiny = np.float32(np.finfo(np.float32).smallest_subnormal)
    # a centroid of exactly zero would read back as a filler
    return np.where(c == 0, tiny, c).astype(np.float64)


def quantize_network(net, ccfg):
    """Cluster each layer's surviving weights and snap them to their centroid."""
    books = {}
    for layer in net.weight_layers():
        name = f"{layer.name}.weight"
        w = layer.params["weight"]
        mask = w != 0
        survivors = w[mask].astype(np.float32)
        k = ccfg.clusters(layer.kind)
        if survivors.size == 0:
            books[name] = LayerCodebook(np.ones(1), np.zeros(0, np.int64), mask, k)
            continue
        cb = kmeans_quantize(survivors, k)
        books[name] = LayerCodebook(_fp32_nonzero(cb.centroids), cb.assignments, mask, k)
        if cb.shrunk:
            logger.info("%s: %d distinct values, codebook shrunk from %d", name, cb.k, k)
    apply_codebooks(net, books)
    return books


def apply_codebooks(net, books):
    params = net.params()
    for name, cb in books.items():
        w = params[name]
        w[...] = 0.0
        w[cb.mask] = cb.centroids[cb.assignments]


def quantized_finetune(net, books, videos, cfg, agg, epochs, lr, batch_size=8, seed=0):
    """Train shared centroids; each moves by ``-lr`` times its weights' summed gradient.

    Assignments and every other parameter stay fixed. Returns ``books``.
    """
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(videos))
        for i in range(0, len(order), batch_size):
            batch = [videos[j] for j in order[i:i + batch_size]]
            accumulate_gradients(batch, net, cfg, agg, rng)
            grads = net.grads()
            for name, cb in books.items():
                if cb.assignments.size:
                    step = shared_centroid_step(cb.centroids, cb.assignments,
                                                grads[name][cb.mask], lr)
                    cb.centroids = _fp32_nonzero(step)
            apply_codebooks(net, books)
    return books


# ---------------------------------------------------------------------------
# driver


def compress_pipeline(net, agg, cfg, train_videos, eval_videos, ccfg=CompressConfig(),
                      on_event=None, extra=None):
    """Run the enabled stages in order on a copy of ``net``.

    ``on_event`` receives training-progress dicts and one dict per stage row.
    """
    net = net.copy()
    net.masks.clear()
    emit = on_event or (lambda rec: None)
    dcfg = ccfg.schedule

    def acc(n):
        return evaluate(eval_videos, n, cfg, agg)

    def row(stage, accuracy, container, skipped=False):
        size = len(container.to_bytes())
        enc = {DENSE: "dense", CSC: "csc", CSC_QUANT: "csc-quant",
               CSC_QUANT_HUFF: "csc-quant-huff"}[container.encoding]
        rec = StageRecord(stage, accuracy, size, enc, skipped)
        report.append(rec)
        emit({"event": "stage", **rec.as_dict()})
        return rec

    report = []
    dense = build_container(net, agg, cfg, DENSE, extra=extra)
    base = row("Baseline", acc(net), dense)
    if ccfg.dsd:
        pruned_at = sparsify_phase(net, train_videos, cfg, agg, dcfg, emit)
        row("Sparse", acc(net), build_container(net, agg, cfg, DENSE, extra=extra))
        densify_phase(net, train_videos, cfg, agg, dcfg, pruned_at, emit)
        container = build_container(net, agg, cfg, DENSE, extra=extra)
        row("Dense", acc(net), container)
    else:
        container = dense
        for stage in ("Sparse", "Dense"):
            row(stage, base.accuracy, container, skipped=True)
    current = report[-1].accuracy

    books, survivors, quantized_accuracy = {}, 1.0, None
    if ccfg.prune:
        prune_phase(net, train_videos, cfg, agg, dcfg, emit)
        survivors = survivor_ratio(net)
        container = build_container(net, agg, cfg, CSC, extra=extra)
        net = _reload(container, net)
        current = row("Prune", acc(net), container).accuracy
    else:
        row("Prune", current, container, skipped=True)

    if ccfg.quantize:
        books = quantize_network(net, ccfg)
        quantized_accuracy = acc(net)
        emit({"event": "quantized", "accuracy": quantized_accuracy})
        if ccfg.finetune_epochs:
            quantized_finetune(net, books, train_videos, cfg, agg, ccfg.finetune_epochs,
                               ccfg.finetune_lr, dcfg.batch_size, ccfg.seed)
        centroids = {n: cb.centroids for n, cb in books.items()}
        container = build_container(net, agg, cfg, CSC_QUANT, centroids, extra=extra)
        net = _reload(container, net)
        current = row("Quantization", acc(net), container).accuracy
        if ccfg.huffman:
            container = build_container(net, agg, cfg, CSC_QUANT_HUFF, centroids, extra=extra)
            row("Huffman", acc(_reload(container, net)), container)
        else:
            row("Huffman", current, container, skipped=True)
    else:
        for stage in ("Quantization", "Huffman"):
            row(stage, current, container, skipped=True)
    return CompressionResult(container, report, net, books, survivors, quantized_accuracy)


def _reload(container, net):
    """The network as decoded from ``container``, keeping ``net``'s masks."""
    twin = container.network()
    twin.masks = {n: m.copy() for n, m in net.masks.items()}
    return twin
