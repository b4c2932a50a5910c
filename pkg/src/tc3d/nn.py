"""Layers, forward/backward math and the small 3D-CNN used throughout tc3d.

Tensors are plain ``numpy.ndarray`` objects in float64. Every layer accepts
either a single sample (``[C, D, H, W]`` for volumes, ``[F]`` for vectors) or
a batch with one extra leading axis; the batched path is what training uses,
since the S clips of every video in a minibatch go through the network in a
single call.
"""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import LabelError, ShapeError

DTYPE = np.float64


def _triple(v):
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(e) for e in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 extents, got {v}")
    return v


def _as_batch(x, sample_ndim):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == sample_ndim:
        return x[None], True
    if x.ndim == sample_ndim + 1:
        return x, False
    raise ShapeError(
        f"expected a {sample_ndim}-d sample or {sample_ndim + 1}-d batch, got shape {x.shape}",
        x.shape)


class Layer:
    """Base layer. Subclasses set ``kind`` and implement forward/backward.

    ``forward`` caches whatever ``backward`` needs, so a layer instance
    serves one forward/backward pair at a time.
    """

    kind = "layer"

    def __init__(self, name=None):
        self.name = name or self.kind
        self.params = OrderedDict()
        self.grads = OrderedDict()
        self._cache = None

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def flops(self, in_shape):
        return 0

    def zero_grads(self):
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)

    def config(self):
        return {"kind": self.kind, "name": self.name}

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


# ---------------------------------------------------------------------------
# conv3d


class Conv3d(Layer):
    kind = "conv3d"

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=1, name=None, rng=None):
        super().__init__(name)
        self.in_ch = int(in_ch)
        self.out_ch = int(out_ch)
        self.kernel = _triple(kernel)
        self.stride = _triple(stride)
        self.padding = _triple(padding)
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        fan_in = self.in_ch * math.prod(self.kernel)
        shape = (self.out_ch, self.in_ch) + self.kernel
        if rng is None:
            w = np.zeros(shape, dtype=DTYPE)
        else:
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        self.params["weight"] = w
        self.params["bias"] = np.zeros(self.out_ch, dtype=DTYPE)
        self.zero_grads()

    def output_shape(self, in_shape):
        c, *spatial = in_shape
        if c != self.in_ch or len(spatial) != 3:
            raise ShapeError(
                f"{self.name}: input shape {tuple(in_shape)} does not match kernel "
                f"shape {self.params['weight'].shape}", in_shape, self.params["weight"].shape)
        out = []
        for n, k, s, p in zip(spatial, self.kernel, self.stride, self.padding):
            o = (n + 2 * p - k) // s + 1
            if o < 1:
                raise ShapeError(f"{self.name}: input extent {n} too small for kernel {k}", in_shape)
            out.append(o)
        return (self.out_ch, *out)

    def flops(self, in_shape):
        out = self.output_shape(in_shape)
        return 2 * math.prod(out) * self.in_ch * math.prod(self.kernel)

    def forward(self, x, train=False, rng=None):
        out, self._cache = conv3d_forward(x, self, return_cache=True)
        return out

    def backward(self, grad, input_grad=True):
        grad_in, grads = conv3d_backward(grad, None, self, cache=self._cache,
                                         input_grad=input_grad)
        for k, g in grads.items():
            self.grads[k] += g
        return grad_in

    def config(self):
        return {**super().config(), "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": list(self.kernel), "stride": list(self.stride),
                "padding": list(self.padding)}


def _im2col(xb, layer):
    """Patch matrix ``[B*D'*H'*W', C*kd*kh*kw]`` (column order matches the weight)."""
    pd, ph, pw = layer.padding
    xp = np.pad(xb, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    sd, sh, sw = layer.stride
    win = sliding_window_view(xp, layer.kernel, axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7))
    return cols.reshape(-1, layer.in_ch * math.prod(layer.kernel))


def _check_conv_input(x, xb, layer):
    w = layer.params["weight"]
    if xb.shape[1] != w.shape[1]:
        raise ShapeError(
            f"{layer.name}: input shape {tuple(np.shape(x))} has {xb.shape[1]} channels but "
            f"kernel shape {w.shape} expects {w.shape[1]}", np.shape(x), w.shape)
    return (xb.shape[0],) + layer.output_shape(xb.shape[1:])


def conv3d_forward(x, layer, return_cache=False):
    """Direct 3D cross-correlation plus bias.

    ``x`` is ``[in_ch, D, H, W]`` or a batch of those; the result has
    ``[out_ch, D', H', W']`` per sample with ``D' = (D + 2p - k) // s + 1``.
    With ``return_cache`` the patch matrix is returned too, for the backward pass.
    """
    xb, single = _as_batch(x, 4)
    b, o, do, ho, wo = _check_conv_input(x, xb, layer)
    cols = _im2col(xb, layer)
    out = cols @ layer.params["weight"].reshape(o, -1).T + layer.params["bias"]
    out = np.ascontiguousarray(out.reshape(b, do, ho, wo, o).transpose(0, 4, 1, 2, 3))
    if single:
        out = out[0]
    if return_cache:
        return out, (xb.shape, single, cols)
    return out


def conv3d_backward(grad_out, x, layer, cache=None, input_grad=True):
    """Gradients of :func:`conv3d_forward` w.r.t. its input, weight and bias.

    ``input_grad=False`` skips the input gradient (returned as ``None``).
    """
    if cache is None:
        xb, single = _as_batch(x, 4)
        _check_conv_input(x, xb, layer)
        cache = (xb.shape, single, _im2col(xb, layer))
    in_shape, single, cols = cache
    gb, _ = _as_batch(grad_out, 4)
    expected = (in_shape[0],) + layer.output_shape(in_shape[1:])
    if gb.shape != expected:
        raise ShapeError(
            f"{layer.name}: grad_out shape {gb.shape} != forward output shape {expected}",
            gb.shape, expected)
    w = layer.params["weight"]
    b, o, do, ho, wo = gb.shape
    g2 = np.ascontiguousarray(gb.transpose(0, 2, 3, 4, 1)).reshape(-1, o)
    grad_w = (g2.T @ cols).reshape(w.shape)
    grad_b = g2.sum(axis=0)
    if not input_grad:
        return None, {"weight": grad_w, "bias": grad_b}

    # scatter each kernel tap back onto a channels-last padded input
    c = in_shape[1]
    kd, kh, kw = layer.kernel
    sd, sh, sw = layer.stride
    pd, ph, pw = layer.padding
    taps = np.ascontiguousarray(w.reshape(o, c, -1).transpose(2, 0, 1))
    dp, hp, wp = (n + 2 * p for n, p in zip(in_shape[2:], layer.padding))
    gxp = np.zeros((b, dp, hp, wp, c), dtype=DTYPE)
    t = 0
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                gxp[:, i:i + sd * (do - 1) + 1:sd, j:j + sh * (ho - 1) + 1:sh,
                    k:k + sw * (wo - 1) + 1:sw, :] += (g2 @ taps[t]).reshape(b, do, ho, wo, c)
                t += 1
    grad_in = gxp[:, pd:dp - pd, ph:hp - ph, pw:wp - pw, :].transpose(0, 4, 1, 2, 3)
    grad_in = np.ascontiguousarray(grad_in)
    if single:
        grad_in = grad_in[0]
    return grad_in, {"weight": grad_w, "bias": grad_b}


# ---------------------------------------------------------------------------
# fully connected


class Linear(Layer):
    kind = "fc"

    def __init__(self, in_features, out_features, name=None, rng=None):
        super().__init__(name)
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        shape = (self.out_features, self.in_features)
        if rng is None:
            w = np.zeros(shape, dtype=DTYPE)
        else:
            w = rng.normal(0.0, math.sqrt(1.0 / self.in_features), size=shape)
        self.params["weight"] = w
        self.params["bias"] = np.zeros(self.out_features, dtype=DTYPE)
        self.zero_grads()

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_features,):
            raise ShapeError(
                f"{self.name}: input shape {tuple(in_shape)} does not match weight shape "
                f"{self.params['weight'].shape}", in_shape, self.params["weight"].shape)
        return (self.out_features,)

    def flops(self, in_shape):
        self.output_shape(in_shape)
        return 2 * self.in_features * self.out_features

    def forward(self, x, train=False, rng=None):
        self._cache = np.asarray(x, dtype=DTYPE)
        return fc_forward(x, self)

    def backward(self, grad):
        grad_in, grads = fc_backward(grad, self._cache, self)
        for k, g in grads.items():
            self.grads[k] += g
        return grad_in

    def config(self):
        return {**super().config(), "in_features": self.in_features,
                "out_features": self.out_features}


def fc_forward(x, layer):
    xb, single = _as_batch(x, 1)
    w = layer.params["weight"]
    if xb.shape[1] != w.shape[1]:
        raise ShapeError(
            f"{layer.name}: input shape {tuple(np.shape(x))} does not match weight shape {w.shape}",
            np.shape(x), w.shape)
    out = xb @ w.T + layer.params["bias"]
    return out[0] if single else out


def fc_backward(grad_out, x, layer):
    xb, single = _as_batch(x, 1)
    gb, _ = _as_batch(grad_out, 1)
    w = layer.params["weight"]
    if gb.shape != (xb.shape[0], w.shape[0]):
        raise ShapeError(
            f"{layer.name}: grad_out shape {gb.shape} does not match output shape "
            f"{(xb.shape[0], w.shape[0])}", gb.shape, (xb.shape[0], w.shape[0]))
    grad_in = gb @ w
    grads = {"weight": gb.T @ xb, "bias": gb.sum(axis=0)}
    return (grad_in[0] if single else grad_in), grads


# ---------------------------------------------------------------------------
# parameter-free layers


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=DTYPE)
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, grad):
        return np.where(self._cache, grad, 0.0)


class GlobalAvgPool(Layer):
    """Mean over every non-channel axis: ``[C, D, H, W] -> [C]``."""

    kind = "global-avg-pool"

    def output_shape(self, in_shape):
        return (in_shape[0],)

    def forward(self, x, train=False, rng=None):
        xb, single = _as_batch(x, 4)
        self._cache = (xb.shape, single)
        out = xb.mean(axis=(2, 3, 4))
        return out[0] if single else out

    def backward(self, grad):
        shape, single = self._cache
        gb = np.asarray(grad, dtype=DTYPE)
        if single:
            gb = gb[None]
        n = shape[2] * shape[3] * shape[4]
        out = np.broadcast_to((gb / n)[:, :, None, None, None], shape).copy()
        return out[0] if single else out


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1 / (1 - ratio)`` in train mode.

    Eval mode is the identity. A fixed ``mask`` (already scaled) can be set to
    make train mode deterministic, which the gradient tests rely on.
    """

    kind = "dropout"

    def __init__(self, ratio=0.8, name=None):
        super().__init__(name)
        if not 0.0 <= ratio < 1.0:
            raise ValueError(f"dropout ratio must be in [0, 1), got {ratio}")
        self.ratio = float(ratio)
        self.mask = None

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=DTYPE)
        if not train or self.ratio == 0.0:
            self._cache = None
            return x
        if self.mask is not None:
            scale = self.mask
        else:
            if rng is None:
                raise ValueError("dropout in train mode needs a seeded rng or a fixed mask")
            keep = rng.random(x.shape) >= self.ratio
            scale = keep / (1.0 - self.ratio)
        self._cache = scale
        return x * scale

    def backward(self, grad):
        if self._cache is None:
            return grad
        return grad * self._cache

    def config(self):
        return {**super().config(), "ratio": self.ratio}


class Residual(Layer):
    """``x + body(x)``; the body must preserve shape."""

    kind = "residual"

    def __init__(self, body, name=None):
        super().__init__(name)
        self.body = list(body)

    def output_shape(self, in_shape):
        shape = tuple(in_shape)
        for layer in self.body:
            shape = layer.output_shape(shape)
        if shape != tuple(in_shape):
            raise ShapeError(f"{self.name}: body maps {tuple(in_shape)} to {shape}", in_shape, shape)
        return shape

    def flops(self, in_shape):
        total, shape = 0, tuple(in_shape)
        for layer in self.body:
            total += layer.flops(shape)
            shape = layer.output_shape(shape)
        return total

    def forward(self, x, train=False, rng=None):
        h = x
        for layer in self.body:
            h = layer.forward(h, train=train, rng=rng)
        return x + h

    def backward(self, grad):
        g = grad
        for layer in reversed(self.body):
            g = layer.backward(g)
        return grad + g

    def zero_grads(self):
        for layer in self.body:
            layer.zero_grads()

    def config(self):
        return {**super().config(), "body": [layer.config() for layer in self.body]}


# ---------------------------------------------------------------------------
# network


def layer_from_config(cfg):
    kind = cfg["kind"]
    name = cfg.get("name")
    if kind == "conv3d":
        return Conv3d(cfg["in_ch"], cfg["out_ch"], cfg["kernel"], cfg["stride"],
                      cfg["padding"], name=name)
    if kind == "fc":
        return Linear(cfg["in_features"], cfg["out_features"], name=name)
    if kind == "relu":
        return ReLU(name)
    if kind == "global-avg-pool":
        return GlobalAvgPool(name)
    if kind == "dropout":
        return Dropout(cfg["ratio"], name=name)
    if kind == "residual":
        return Residual([layer_from_config(c) for c in cfg["body"]], name=name)
    raise ValueError(f"unknown layer kind {kind!r}")


class Network:
    """Ordered layer stack computing class scores from one clip.

    Parameters are addressed as ``"<layer name>.<param>"``. ``masks`` holds
    optional boolean keep-masks for pruned weights; masked entries receive no
    update and are re-zeroed after each optimizer step.
    """

    def __init__(self, layers, class_count, input_shape=None):
        self.layers = list(layers)
        self.class_count = int(class_count)
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.masks = {}
        names = [name for name, _, _ in self._param_slots()]
        if len(names) != len(set(names)):
            raise ValueError("layer names must be unique")
        if self.input_shape is not None:
            out = self.output_shape(self.input_shape)
            if out != (self.class_count,):
                raise ShapeError(f"network output {out} != ({self.class_count},)", out)

    def _leaf_layers(self, layers=None):
        for layer in self.layers if layers is None else layers:
            if isinstance(layer, Residual):
                yield from self._leaf_layers(layer.body)
            else:
                yield layer

    def _param_slots(self):
        for layer in self._leaf_layers():
            for k in layer.params:
                yield f"{layer.name}.{k}", layer, k

    def weight_layers(self):
        """Leaf layers that own a prunable weight (conv3d and fc)."""
        return [layer for layer in self._leaf_layers() if layer.kind in ("conv3d", "fc")]

    def params(self):
        return OrderedDict((n, layer.params[k]) for n, layer, k in self._param_slots())

    def grads(self):
        return OrderedDict((n, layer.grads[k]) for n, layer, k in self._param_slots())

    def set_params(self, values):
        for n, layer, k in self._param_slots():
            if n in values:
                v = np.asarray(values[n], dtype=DTYPE)
                if v.shape != layer.params[k].shape:
                    raise ShapeError(f"{n}: shape {v.shape} != {layer.params[k].shape}",
                                     v.shape, layer.params[k].shape)
                layer.params[k][...] = v

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def output_shape(self, in_shape):
        shape = tuple(in_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def forward(self, x, train=False, rng=None):
        h = x
        for layer in self.layers:
            h = layer.forward(h, train=train, rng=rng)
        return h

    def backward(self, grad, input_grad=True):
        """Accumulate parameter gradients; returns the input gradient.

        With ``input_grad=False`` a leading conv3d skips its input gradient
        and ``None`` is returned.
        """
        g = grad
        for i, layer in enumerate(reversed(self.layers)):
            if not input_grad and i == len(self.layers) - 1 and isinstance(layer, Conv3d):
                return layer.backward(g, input_grad=False)
            g = layer.backward(g)
        return g

    def apply_masks(self):
        params = self.params()
        for n, m in self.masks.items():
            params[n] *= m

    def config(self):
        return {"class_count": self.class_count,
                "input_shape": list(self.input_shape) if self.input_shape else None,
                "layers": [layer.config() for layer in self.layers]}

    @classmethod
    def from_config(cls, cfg):
        layers = [layer_from_config(c) for c in cfg["layers"]]
        return cls(layers, cfg["class_count"], cfg.get("input_shape"))

    def copy(self):
        twin = Network.from_config(self.config())
        twin.set_params(self.params())
        twin.masks = {n: m.copy() for n, m in self.masks.items()}
        return twin


def build_reference_net(class_count, input_shape=(1, 8, 32, 32), channels=(8, 16, 32, 32),
                        dropout=0.8, residual=False, seed=0):
    """The desk-scale network: four 3x3x3 conv3d layers, GAP, dropout, fc.

    Layers 2 and 4 downsample by 2 in time and space. ``residual=True``
    inserts one shape-preserving residual block after the third conv.
    """
    rng = np.random.default_rng(seed)
    in_ch = input_shape[0]
    layers = []
    for i, out_ch in enumerate(channels, start=1):
        stride = 2 if i % 2 == 0 else 1
        layers.append(Conv3d(in_ch, out_ch, 3, stride, 1, name=f"conv{i}", rng=rng))
        layers.append(ReLU(f"relu{i}"))
        if residual and i == 3:
            layers.append(Residual(
                [Conv3d(out_ch, out_ch, 3, 1, 1, name="res.conv", rng=rng), ReLU("res.relu")],
                name="res"))
        in_ch = out_ch
    layers += [GlobalAvgPool("gap"), Dropout(dropout, "dropout"),
               Linear(in_ch, class_count, name="fc", rng=rng)]
    return Network(layers, class_count, input_shape)


# ---------------------------------------------------------------------------
# loss and flops


def softmax(scores, axis=-1):
    z = np.asarray(scores, dtype=DTYPE)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(scores, label):
    """Cross-entropy of a one-hot label against ``softmax(scores)``.

    Returns ``(loss, grad_scores)`` with ``grad_scores = softmax(scores) - y``.
    """
    s = np.asarray(scores, dtype=DTYPE)
    if s.ndim != 1:
        raise ShapeError(f"scores must be 1-d, got shape {s.shape}", s.shape)
    label = int(label)
    if not 0 <= label < s.shape[0]:
        raise LabelError(f"label {label} outside [0, {s.shape[0]})")
    z = s - s.max()
    log_norm = math.log(np.exp(z).sum())
    loss = -(z[label] - log_norm)
    grad = np.exp(z - log_norm)
    grad[label] -= 1.0
    return float(loss), grad


def count_flops(net, input_shape):
    """Forward-pass FLOPs (2 per multiply-add) of the conv3d and fc layers."""
    layers = net.layers if isinstance(net, Network) else list(net)
    total, shape = 0, tuple(input_shape)
    for layer in layers:
        total += layer.flops(shape)
        shape = layer.output_shape(shape)
    return total
