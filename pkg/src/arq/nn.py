"""Minimal dense-tensor network engine.

Networks are flat lists of layer specs plus parameter arrays; the supported
layer kinds are dense, conv2d (optionally depthwise), relu, avgpool2d and
flatten.  Everything runs on float64 numpy arrays in NCHW layout and is
deterministic given the seeds.  Forward/backward accept an optional hooks
object so the quantizer can rewrite weights and activations in flight
(fake quantization with straight-through gradients) without this module
knowing anything about bit-widths.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

REAL = np.float64

QUANTIZABLE_KINDS = ("dense", "conv2d")
LAYER_KINDS = ("dense", "conv2d", "relu", "avgpool2d", "flatten")


class ShapeError(ValueError):
    """Input or inter-layer shape mismatch."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class LayerSpec:
    index: int
    kind: str
    c_in: int
    c_out: int
    kernel_size: int = 1
    stride: int = 1
    input_feature_size: int = 1
    n_params: int = 0
    is_depthwise: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel_size < 1 or self.stride < 1:
            raise ValueError("kernel_size and stride must be >= 1")
        if self.kind == "avgpool2d" and self.stride > self.kernel_size:
            raise ValueError("pooling stride must not exceed kernel size")
        expected = expected_param_count(self.kind, self.c_in, self.c_out,
                                        self.kernel_size, self.is_depthwise)
        if self.n_params != expected:
            raise ValueError(
                f"layer {self.index}: n_params={self.n_params} but "
                f"{self.kind} geometry implies {expected}")

    @property
    def quantizable(self) -> bool:
        return self.kind in QUANTIZABLE_KINDS

    @property
    def weight_count(self) -> int:
        """Parameter count excluding biases."""
        if self.kind == "dense":
            return self.c_in * self.c_out
        if self.kind == "conv2d":
            k2 = self.kernel_size ** 2
            return self.c_in * k2 if self.is_depthwise else self.c_in * self.c_out * k2
        return 0


def expected_param_count(kind: str, c_in: int, c_out: int, kernel: int = 1,
                         depthwise: int = 0) -> int:
    if kind == "dense":
        return c_in * c_out + c_out
    if kind == "conv2d":
        if depthwise:
            return c_in * kernel * kernel + c_in
        return c_out * c_in * kernel * kernel + c_out
    return 0


@dataclass
class Network:
    layers: list[LayerSpec]
    params: list[dict]
    num_classes: int
    input_shape: tuple

    def clone(self) -> "Network":
        return Network(
            layers=copy.deepcopy(self.layers),
            params=[{k: v.copy() for k, v in p.items()} for p in self.params],
            num_classes=self.num_classes,
            input_shape=self.input_shape,
        )

    def quantizable_indices(self) -> list[int]:
        return [s.index for s in self.layers if s.quantizable]


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 64
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0,1)")
        if self.weight_decay < 0 or self.noise_sigma < 0:
            raise ValueError("weight_decay and noise_sigma must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


# ---------------------------------------------------------------------------
# geometry


def conv_padding(kernel: int) -> int:
    return kernel // 2


def output_spatial(spec: LayerSpec) -> int:
    """Spatial side length of the layer's output feature map."""
    f = spec.input_feature_size
    if spec.kind == "conv2d":
        return (f + 2 * conv_padding(spec.kernel_size) - spec.kernel_size) // spec.stride + 1
    if spec.kind == "avgpool2d":
        return (f - spec.kernel_size) // spec.stride + 1
    return f


def validate(net: Network) -> None:
    """Check inter-layer shape compatibility; raises ShapeError on the first break."""
    shape = net.input_shape
    for spec in net.layers:
        if spec.kind in ("conv2d", "relu", "avgpool2d"):
            if len(shape) == 3:
                c, h, w = shape
                if h != w:
                    raise ShapeError(f"layer {spec.index}: feature maps must be square")
                if spec.kind != "relu" and (c != spec.c_in or h != spec.input_feature_size):
                    raise ShapeError(
                        f"layer {spec.index}: expects {spec.c_in}x{spec.input_feature_size}^2, "
                        f"got {c}x{h}^2")
                if spec.kind == "conv2d":
                    shape = (spec.c_out, output_spatial(spec), output_spatial(spec))
                elif spec.kind == "avgpool2d":
                    shape = (c, output_spatial(spec), output_spatial(spec))
            elif spec.kind != "relu":
                raise ShapeError(f"layer {spec.index}: {spec.kind} needs a CHW input")
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "dense":
            if len(shape) != 1 or shape[0] != spec.c_in:
                raise ShapeError(
                    f"layer {spec.index}: dense expects {spec.c_in} features, got {shape}")
            shape = (spec.c_out,)
    if shape != (net.num_classes,):
        raise ShapeError(f"network output shape {shape} != ({net.num_classes},)")


# ---------------------------------------------------------------------------
# layer primitives


def _conv_cols(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """im2col: (N,C,H,W) -> (N, OH*OW, C*k*k) with symmetric zero padding."""
    pad = conv_padding(kernel)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    v = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow, _, _ = v.shape
    cols = v.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kernel * kernel)
    return np.ascontiguousarray(cols), oh, ow


def _conv_forward(spec: LayerSpec, x: np.ndarray, w: np.ndarray, b: np.ndarray,
                  want_cache: bool = True):
    if spec.is_depthwise:
        pad = conv_padding(spec.kernel_size)
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        v = sliding_window_view(xp, (spec.kernel_size, spec.kernel_size),
                                axis=(2, 3))[:, :, ::spec.stride, ::spec.stride]
        out = np.einsum("nchwij,cij->nchw", v, w, optimize=True) + b[:, None, None]
        return out, (x.shape, v)
    cols, oh, ow = _conv_cols(x, spec.kernel_size, spec.stride)
    n = x.shape[0]
    wmat = w.reshape(spec.c_out, -1)
    out = cols.reshape(n * oh * ow, -1) @ wmat.T
    out += b
    out = out.reshape(n, oh, ow, spec.c_out).transpose(0, 3, 1, 2)
    return out, (x.shape, cols) if want_cache else None


def _col2im(dcols: np.ndarray, x_shape: tuple, kernel: int, stride: int) -> np.ndarray:
    """Scatter (N, C, OH, OW, k, k) window grads back onto the padded input."""
    n, c, h, w = x_shape
    pad = conv_padding(kernel)
    oh = dcols.shape[2]
    ow = dcols.shape[3]
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=REAL)
    for i in range(kernel):
        for j in range(kernel):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[..., i, j]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def _conv_backward(spec: LayerSpec, cache, w: np.ndarray, dout: np.ndarray):
    x_shape, cols = cache
    n = x_shape[0]
    k = spec.kernel_size
    if spec.is_depthwise:
        v = cols  # (N, C, OH, OW, k, k)
        dw = np.einsum("nchwij,nchw->cij", v, dout, optimize=True)
        db = dout.sum(axis=(0, 2, 3))
        dcols = np.einsum("nchw,cij->nchwij", dout, w, optimize=True)
        dx = _col2im(dcols, x_shape, k, spec.stride)
        return dw, db, dx
    oh = ow = output_spatial(spec)
    dflat = dout.transpose(0, 2, 3, 1).reshape(n * oh * ow, spec.c_out)
    cols_flat = cols.reshape(n * oh * ow, -1)
    dw = (dflat.T @ cols_flat).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    dcols = (dflat @ w.reshape(spec.c_out, -1)).reshape(n, oh, ow, spec.c_in, k, k)
    dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
    dx = _col2im(dcols, x_shape, k, spec.stride)
    return dw, db, dx


def _avgpool_forward(spec: LayerSpec, x: np.ndarray):
    k, s = spec.kernel_size, spec.stride
    n, c, h, w = x.shape
    if k == s and h % k == 0 and w % k == 0:
        out = x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
        return out, x.shape
    v = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    return v.mean(axis=(-2, -1)), x.shape


def _avgpool_backward(spec: LayerSpec, x_shape, dout: np.ndarray):
    k, s = spec.kernel_size, spec.stride
    n, c, h, w = x_shape
    oh, ow = dout.shape[2], dout.shape[3]
    dx = np.zeros(x_shape, dtype=REAL)
    g = dout / (k * k)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += g
    return dx


# ---------------------------------------------------------------------------
# forward / backward engine


def run_forward(net: Network, x: np.ndarray, hooks=None, want_cache: bool = False):
    """Batched forward pass; x has shape (N, ...) matching net.input_shape.

    ``hooks``, when given, must provide ``weight(index, w) -> (w', mask)`` and
    ``activation(index, z) -> (z', mask)``; they are consulted for every
    quantizable layer.  Masks are retained in the cache and gate gradients in
    :func:`run_backward` (straight-through estimation).
    """
    caches = [] if want_cache else None
    a = np.asarray(x, dtype=REAL)
    for spec, p in zip(net.layers, net.params):
        wmask = amask = None
        if spec.kind in ("conv2d", "dense"):
            w, b = p["w"], p["b"]
            if hooks is not None:
                w, wmask = hooks.weight(spec.index, w)
            if spec.kind == "conv2d":
                z, cache = _conv_forward(spec, a, w, b, want_cache=want_cache)
            else:
                cache = a
                z = a @ w.T + b
            if hooks is not None:
                z, amask = hooks.activation(spec.index, z)
            if want_cache:
                caches.append(("param", cache, w, wmask, amask))
            a = z
        elif spec.kind == "relu":
            mask = a > 0
            if want_cache:
                caches.append(("relu", mask, None, None, None))
            a = a * mask
        elif spec.kind == "avgpool2d":
            a, shape = _avgpool_forward(spec, a)
            if want_cache:
                caches.append(("pool", shape, None, None, None))
        elif spec.kind == "flatten":
            shape = a.shape
            a = a.reshape(shape[0], -1)
            if want_cache:
                caches.append(("flatten", shape, None, None, None))
    return (a, caches) if want_cache else a


def run_backward(net: Network, caches, dlogits: np.ndarray):
    """Backprop through cached activations; returns per-layer parameter grads."""
    grads = [dict() for _ in net.layers]
    da = dlogits
    for spec, p, cache in zip(reversed(net.layers), reversed(net.params), reversed(caches)):
        tag, stored, w_used, wmask, amask = cache
        if tag == "param":
            if amask is not None:
                da = da * amask
            if spec.kind == "conv2d":
                dw, db, da = _conv_backward(spec, stored, w_used, da)
            else:
                dw = da.T @ stored
                db = da.sum(axis=0)
                da = da @ w_used
            if wmask is not None:
                dw = dw * wmask
            grads[spec.index] = {"w": dw, "b": db}
        elif tag == "relu":
            da = da * stored
        elif tag == "pool":
            da = _avgpool_backward(spec, stored, da)
        elif tag == "flatten":
            da = da.reshape(stored)
    return grads


def forward(net: Network, x: np.ndarray, hooks=None) -> np.ndarray:
    """Logits for a single input (shape = net.input_shape) or a batch of them."""
    x = np.asarray(x, dtype=REAL)
    single = x.shape == tuple(net.input_shape)
    if single:
        x = x[None]
    elif x.shape[1:] != tuple(net.input_shape):
        raise ShapeError(f"input shape {x.shape} incompatible with {net.input_shape}")
    logits = run_forward(net, x, hooks=hooks)
    return logits[0] if single else logits


def predict(net: Network, x: np.ndarray, hooks=None):
    """Argmax class (lowest index wins ties); vectorized over batches."""
    logits = forward(net, x, hooks=hooks)
    return int(np.argmax(logits)) if logits.ndim == 1 else np.argmax(logits, axis=1)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean CE loss and dloss/dlogits for integer labels."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    nll = -np.log(probs[np.arange(n), labels] + 1e-300)
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    return float(nll.mean()), dlogits / n


def compute_gradients(net: Network, xs: np.ndarray, labels: np.ndarray, hooks=None):
    """Mean cross-entropy gradients over a batch; returns (grads, loss)."""
    xs = np.asarray(xs, dtype=REAL)
    labels = np.asarray(labels)
    if xs.shape[0] == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= net.num_classes:
        raise ValueError("labels out of range")
    logits, caches = run_forward(net, xs, hooks=hooks, want_cache=True)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    return run_backward(net, caches, dlogits), loss


# ---------------------------------------------------------------------------
# optimizers and training


def init_momentum(net: Network) -> list[dict]:
    return [{k: np.zeros_like(v) for k, v in p.items()} for p in net.params]


def sgd_step(params: list[dict], grads: list[dict], cfg: TrainConfig,
             state: list[dict]) -> None:
    """In-place SGD with momentum; weight decay hits weights, never biases."""
    for p, g, m in zip(params, grads, state):
        for key in p:
            step = g[key] + (cfg.weight_decay * p[key] if key == "w" else 0.0)
            m[key] = cfg.momentum * m[key] + step
            p[key] -= cfg.learning_rate * m[key]


def _model_parts(model):
    """(base network, hooks) for a plain Network or a fake-quantized wrapper."""
    if hasattr(model, "hooks"):
        return model.base, model.hooks()
    return model, None


def train_gaussian(net: Network, xs: np.ndarray, labels: np.ndarray,
                   cfg: TrainConfig):
    """SGD training with per-epoch Gaussian input augmentation.

    Returns (trained network, per-epoch mean losses).  sigma = 0 falls back to
    plain SGD on the raw inputs; the batch order is driven by a shuffle stream
    independent of the noise stream, so the zero-noise run is bit-identical to
    an unaugmented loop with the same seed.
    """
    if len(xs) == 0:
        raise ValueError("empty dataset")
    net = net.clone()
    shuffle_ss, noise_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    noise_rng = np.random.default_rng(noise_ss)
    state = init_momentum(net)
    xs = np.asarray(xs, dtype=REAL)
    losses = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(xs))
        total, seen = 0.0, 0
        for start in range(0, len(xs), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = xs[idx]
            if cfg.noise_sigma > 0:
                xb = xb + cfg.noise_sigma * noise_rng.standard_normal(xb.shape)
            grads, loss = compute_gradients(net, xb, labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch + 1}")
            sgd_step(net.params, grads, cfg, state)
            total += loss * len(idx)
            seen += len(idx)
        losses.append(total / seen)
    return net, losses


def fine_tune(model, xs: np.ndarray, labels: np.ndarray, sigma: float,
              n_samples: int, learning_rate: float, seed: int,
              batch_size: int = 64, momentum: float = 0.9,
              weight_decay: float = 1e-4):
    """One Gaussian-augmented epoch over a seeded subset of ``n_samples`` inputs.

    ``model`` may be a Network or a fake-quantized wrapper exposing ``base``
    and ``hooks()``; in the latter case gradients pass the quantizers via
    straight-through estimation and the float master weights are updated.
    Returns a fine-tuned copy; n_samples = 0 or learning_rate = 0 return the
    model unchanged.
    """
    if n_samples > len(xs):
        raise ValueError(f"n_samples={n_samples} exceeds dataset size {len(xs)}")
    if n_samples == 0 or learning_rate == 0:
        return model.clone()
    model = model.clone()
    net, hooks = _model_parts(model)
    cfg = TrainConfig(learning_rate=learning_rate, momentum=momentum,
                      weight_decay=weight_decay, epochs=1,
                      batch_size=batch_size, noise_sigma=sigma, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    subset = rng.permutation(len(xs))[:n_samples]
    state = init_momentum(net)
    xs = np.asarray(xs, dtype=REAL)
    for start in range(0, n_samples, batch_size):
        idx = subset[start:start + batch_size]
        xb = xs[idx]
        if sigma > 0:
            xb = xb + sigma * rng.standard_normal(xb.shape)
        grads, loss = compute_gradients(net, xb, labels[idx], hooks=hooks)
        if not np.isfinite(loss):
            raise DivergenceError("non-finite loss during fine-tuning")
        sgd_step(net.params, grads, cfg, state)
    return model


# ---------------------------------------------------------------------------
# builders


def _kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(REAL)


def _init_params(layers: list[LayerSpec], seed: int) -> list[dict]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A7]))
    params = []
    for spec in layers:
        if spec.kind == "dense":
            w = _kaiming_uniform(rng, (spec.c_out, spec.c_in), spec.c_in)
            params.append({"w": w, "b": np.zeros(spec.c_out, dtype=REAL)})
        elif spec.kind == "conv2d":
            k = spec.kernel_size
            if spec.is_depthwise:
                w = _kaiming_uniform(rng, (spec.c_in, k, k), k * k)
                params.append({"w": w, "b": np.zeros(spec.c_in, dtype=REAL)})
            else:
                w = _kaiming_uniform(rng, (spec.c_out, spec.c_in, k, k),
                                     spec.c_in * k * k)
                params.append({"w": w, "b": np.zeros(spec.c_out, dtype=REAL)})
        else:
            params.append({})
    return params


def tiny_convnet(in_channels: int = 1, image_size: int = 8, num_classes: int = 3,
                 conv_channels: tuple = (8, 16, 16), kernel: int = 3,
                 head_hidden: tuple = (), seed: int = 0) -> Network:
    """Small conv classifier: 2-4 conv blocks (relu, pooling after the first
    two) followed by a dense head, optionally with hidden dense layers."""
    if not 2 <= len(conv_channels) <= 4:
        raise ValueError("conv_channels must list 2 to 4 blocks")
    layers = []
    idx = 0
    c, feat = in_channels, image_size
    for block, c_out in enumerate(conv_channels):
        layers.append(LayerSpec(idx, "conv2d", c, c_out, kernel, 1, feat,
                                expected_param_count("conv2d", c, c_out, kernel)))
        idx += 1
        layers.append(LayerSpec(idx, "relu", c_out, c_out, 1, 1, feat))
        idx += 1
        if block < 2 and feat % 2 == 0 and feat > 2:
            layers.append(LayerSpec(idx, "avgpool2d", c_out, c_out, 2, 2, feat))
            idx += 1
            feat //= 2
        c = c_out
    flat = c * feat * feat
    layers.append(LayerSpec(idx, "flatten", c, flat, 1, 1, feat))
    idx += 1
    c = flat
    for h in head_hidden:
        layers.append(LayerSpec(idx, "dense", c, h, 1, 1, 1,
                                expected_param_count("dense", c, h)))
        idx += 1
        layers.append(LayerSpec(idx, "relu", h, h, 1, 1, 1))
        idx += 1
        c = h
    layers.append(LayerSpec(idx, "dense", c, num_classes, 1, 1, 1,
                            expected_param_count("dense", c, num_classes, 1)))
    net = Network(layers, _init_params(layers, seed), num_classes,
                  (in_channels, image_size, image_size))
    validate(net)
    return net


def mlp(in_features: int, hidden: tuple = (32, 32), num_classes: int = 3,
        seed: int = 0) -> Network:
    layers = []
    idx = 0
    c = in_features
    for h in hidden:
        layers.append(LayerSpec(idx, "dense", c, h, 1, 1, 1,
                                expected_param_count("dense", c, h, 1)))
        idx += 1
        layers.append(LayerSpec(idx, "relu", h, h, 1, 1, 1))
        idx += 1
        c = h
    layers.append(LayerSpec(idx, "dense", c, num_classes, 1, 1, 1,
                            expected_param_count("dense", c, num_classes, 1)))
    net = Network(layers, _init_params(layers, seed), num_classes, (in_features,))
    validate(net)
    return net
