"""Small CNN engine: float training with QAT and int8 inference.

Supported layers: Conv2D (stride 1, "same" zero padding, odd square kernels),
Linear, ReLU, MaxPool2D (non-overlapping windows) and Flatten. Weights are
float64 in the trainable ``Network`` and int8 + int32 bias in the
``QuantizedNetwork``.
"""
from __future__ import annotations

import copy
import enum
import logging
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import quantizer
from .errors import ArgumentError, ShapeError
from .quantizer import QuantizedBias, QuantizedTensor
from .rng import stream

logger = logging.getLogger(__name__)

MAX_FAN_IN = 2**17
QMAX = 127


class LayerKind(enum.IntEnum):
    CONV2D = 1
    LINEAR = 2
    RELU = 3
    MAXPOOL2D = 4
    FLATTEN = 5
    BIAS = 6  # only appears in model files


PARAMETRIC = (LayerKind.CONV2D, LayerKind.LINEAR)


@dataclass(frozen=True)
class LayerSpec:
    """kind plus four dims: Conv2D (N, C, H, W), Linear (out, in, 1, 1),
    MaxPool2D (size, stride, 1, 1), ReLU/Flatten (1, 1, 1, 1)."""

    kind: LayerKind
    dims: tuple[int, int, int, int] = (1, 1, 1, 1)

    def __post_init__(self):
        if len(self.dims) != 4 or any(int(d) <= 0 for d in self.dims):
            raise ShapeError(f"{self.kind.name} dims must be 4 positive ints, got {self.dims}")
        if self.kind is LayerKind.CONV2D and (self.dims[2] != self.dims[3] or self.dims[2] % 2 == 0):
            raise ShapeError(f"Conv2D kernels must be odd and square, got {self.dims[2:]}")
        if self.kind is LayerKind.MAXPOOL2D and self.dims[0] != self.dims[1]:
            raise ShapeError("MaxPool2D supports non-overlapping windows only (size == stride)")

    @property
    def parametric(self) -> bool:
        return self.kind in PARAMETRIC

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind is LayerKind.CONV2D:
            return self.dims
        if self.kind is LayerKind.LINEAR:
            return self.dims[:2]
        raise ArgumentError(f"{self.kind.name} has no weights")

    @property
    def fan_in(self) -> int:
        n, c, h, w = self.dims
        return c * h * w

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        if self.kind is LayerKind.CONV2D:
            if len(shape) != 3 or shape[0] != self.dims[1]:
                raise ShapeError(f"Conv2D{self.dims} cannot take input {shape}")
            return (self.dims[0], shape[1], shape[2])
        if self.kind is LayerKind.LINEAR:
            if len(shape) != 1 or shape[0] != self.dims[1]:
                raise ShapeError(f"Linear{self.dims[:2]} cannot take input {shape}")
            return (self.dims[0],)
        if self.kind is LayerKind.MAXPOOL2D:
            if len(shape) != 3:
                raise ShapeError(f"MaxPool2D cannot take input {shape}")
            s = self.dims[0]
            return (shape[0], shape[1] // s, shape[2] // s)
        if self.kind is LayerKind.FLATTEN:
            return (int(np.prod(shape)),)
        return shape


def conv2d(n: int, c: int, k: int) -> LayerSpec:
    return LayerSpec(LayerKind.CONV2D, (n, c, k, k))


def linear(out: int, inp: int) -> LayerSpec:
    return LayerSpec(LayerKind.LINEAR, (out, inp, 1, 1))


def relu() -> LayerSpec:
    return LayerSpec(LayerKind.RELU)


def maxpool(size: int = 2) -> LayerSpec:
    return LayerSpec(LayerKind.MAXPOOL2D, (size, size, 1, 1))


def flatten() -> LayerSpec:
    return LayerSpec(LayerKind.FLATTEN)


def layer_name(index: int, spec: LayerSpec) -> str:
    return f"{spec.kind.name.lower()}{index}"


def check_shapes(specs: list[LayerSpec], input_shape: tuple[int, ...]) -> tuple[int, ...]:
    shape = tuple(input_shape)
    for spec in specs:
        shape = spec.output_shape(shape)
    return shape


# --- primitive ops -----------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, C, H, W) -> (B*H*W, C*k*k) with "same" zero padding."""
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B, C, H, W, k, k
    b, c, h, w = x.shape
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * k * k)


def _col2im(dcols: np.ndarray, shape: tuple[int, ...], k: int) -> np.ndarray:
    b, c, h, w = shape
    p = k // 2
    d = dcols.reshape(b, h, w, c, k, k)
    dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + w] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, p:p + h, p:p + w]


def _pool_windows(x: np.ndarray, s: int) -> np.ndarray:
    b, c, h, w = x.shape
    ho, wo = h // s, w // s
    return (
        x[:, :, : ho * s, : wo * s]
        .reshape(b, c, ho, s, wo, s)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, ho, wo, s * s)
    )


def _maxpool_backward(dout: np.ndarray, arg: np.ndarray, shape: tuple[int, ...], s: int) -> np.ndarray:
    b, c, h, w = shape
    ho, wo = h // s, w // s
    dwin = np.zeros((b, c, ho, wo, s * s), dtype=dout.dtype)
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :, : ho * s, : wo * s] = (
        dwin.reshape(b, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * s, wo * s)
    )
    return dx


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def images_to_float(images: np.ndarray) -> np.ndarray:
    """uint8 (B, H, W) or (B, C, H, W) -> float64 (B, C, H, W) in [0, 1]."""
    x = np.asarray(images, dtype=np.float64) / 255.0
    return x[:, None] if x.ndim == 3 else x


# --- float network -------------------------------------------------------------

@dataclass
class Layer:
    spec: LayerSpec
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None


@dataclass
class Network:
    layers: list[Layer]
    input_shape: tuple[int, int, int] = (1, 28, 28)

    def __post_init__(self):
        check_shapes([l.spec for l in self.layers], self.input_shape)
        for l in self.layers:
            if l.spec.parametric:
                if l.weight is None or l.weight.shape != l.spec.weight_shape:
                    raise ShapeError(f"{l.spec.kind.name} weight must be {l.spec.weight_shape}")
                if l.bias is None or l.bias.shape != (l.spec.dims[0],):
                    raise ShapeError(f"{l.spec.kind.name} bias must be ({l.spec.dims[0]},)")

    @property
    def specs(self) -> list[LayerSpec]:
        return [l.spec for l in self.layers]

    def parametric(self) -> Iterator[tuple[int, Layer]]:
        return ((i, l) for i, l in enumerate(self.layers) if l.spec.parametric)

    def copy(self) -> Network:
        return copy.deepcopy(self)

    def forward(self, x: np.ndarray, quantize_weights: bool = False,
                record: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
        """Float forward pass; ``record(i, input)`` sees each parametric layer's input."""
        logits, _ = self._forward(x, quantize_weights, record)
        return logits

    def _forward(self, x, quantize_weights, record=None):
        cache = []
        for i, layer in enumerate(self.layers):
            spec = layer.spec
            if spec.parametric:
                if record is not None:
                    record(i, x)
                w = quantizer.fake_quantize(layer.weight) if quantize_weights else layer.weight
                if spec.kind is LayerKind.CONV2D:
                    cols = _im2col(x, spec.dims[2])
                    out = cols @ w.reshape(spec.dims[0], -1).T + layer.bias
                    b, _, h, wd = x.shape
                    cache.append((cols, w, x.shape))
                    x = out.reshape(b, h, wd, spec.dims[0]).transpose(0, 3, 1, 2)
                else:
                    cache.append((x, w, x.shape))
                    x = x @ w.T + layer.bias
            elif spec.kind is LayerKind.RELU:
                cache.append(x > 0)
                x = np.maximum(x, 0)
            elif spec.kind is LayerKind.MAXPOOL2D:
                win = _pool_windows(x, spec.dims[0])
                arg = win.argmax(axis=-1)
                cache.append((arg, x.shape))
                x = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
            elif spec.kind is LayerKind.FLATTEN:
                cache.append(x.shape)
                x = x.reshape(x.shape[0], -1)
        return x, cache

    def forward_backward(self, images: np.ndarray, labels: np.ndarray, lam: float = 0.0,
                         quantize_weights: bool = True) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
        """Loss = cross entropy + lam * sum ||W||_F^2 and its gradients.

        With ``quantize_weights`` the forward pass and the Frobenius term use
        the fake-quantized weights, and gradients pass through the quantizer
        with the straight-through estimator. The per-tensor scale comes from
        max |W|, so every weight sits inside the representable range and the
        estimator is the identity. Gradients are returned as ``(dW, db)``
        per parametric layer, in layer order.
        """
        x = images if np.issubdtype(images.dtype, np.floating) else images_to_float(images)
        logits, cache = self._forward(x, quantize_weights)
        loss, d = softmax_cross_entropy(logits, labels)
        grads: list[tuple[np.ndarray, np.ndarray]] = []
        for layer, c in zip(reversed(self.layers), reversed(cache)):
            spec = layer.spec
            if spec.parametric:
                inp, w, in_shape = c
                if spec.kind is LayerKind.CONV2D:
                    n = spec.dims[0]
                    d2 = d.transpose(0, 2, 3, 1).reshape(-1, n)
                    dw = (d2.T @ inp).reshape(spec.dims)
                    db = d2.sum(axis=0)
                    d = _col2im(d2 @ w.reshape(n, -1), in_shape, spec.dims[2])
                else:
                    dw = d.T @ inp
                    db = d.sum(axis=0)
                    d = d @ w
                grads.append((dw + 2.0 * lam * w, db))
            elif spec.kind is LayerKind.RELU:
                d = d * c
            elif spec.kind is LayerKind.MAXPOOL2D:
                arg, in_shape = c
                d = _maxpool_backward(d, arg, in_shape, spec.dims[0])
            elif spec.kind is LayerKind.FLATTEN:
                d = d.reshape(c)
        grads.reverse()
        if lam:
            for _, layer in self.parametric():
                w = quantizer.fake_quantize(layer.weight) if quantize_weights else layer.weight
                loss += lam * float(np.sum(w * w))
        return loss, grads


def reference_network(seed: int = 42, input_shape: tuple[int, int, int] = (1, 28, 28),
                      classes: int = 10) -> Network:
    """Conv(8,3x3)-ReLU-MaxPool-Conv(16,3x3)-ReLU-MaxPool-Flatten-Linear(classes)."""
    c, h, w = input_shape
    specs = [
        conv2d(8, c, 3), relu(), maxpool(2),
        conv2d(16, 8, 3), relu(), maxpool(2),
        flatten(), linear(classes, 16 * (h // 4) * (w // 4)),
    ]
    return init_network(specs, seed, input_shape)


def init_network(specs: list[LayerSpec], seed: int, input_shape: tuple[int, int, int]) -> Network:
    """He-uniform weights, zero biases."""
    layers = []
    for i, spec in enumerate(specs):
        if spec.parametric:
            bound = np.sqrt(6.0 / spec.fan_in)
            w = stream(seed, "init", i).uniform(-bound, bound, size=spec.weight_shape)
            layers.append(Layer(spec, w, np.zeros(spec.dims[0])))
        else:
            layers.append(Layer(spec))
    return Network(layers, tuple(input_shape))


# --- training ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    lam: float = 0.0
    quantize_weights: bool = False
    seed: int = 42

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ArgumentError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ArgumentError("batch_size must be >= 1 and epochs >= 0")
        if self.lam < 0:
            raise ArgumentError("lam must be >= 0")


@dataclass
class SGD:
    """SGD with classical momentum over a network's parametric layers."""

    learning_rate: float
    momentum: float = 0.9
    velocity: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def step(self, net: Network, grads: list[tuple[np.ndarray, np.ndarray]]) -> None:
        for (i, layer), (dw, db) in zip(net.parametric(), grads):
            vw, vb = self.velocity.get(i, (np.zeros_like(dw), np.zeros_like(db)))
            vw = self.momentum * vw - self.learning_rate * dw
            vb = self.momentum * vb - self.learning_rate * db
            self.velocity[i] = (vw, vb)
            layer.weight += vw
            layer.bias += vb


def batches(n: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    order = stream(seed, "shuffle", epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train(net: Network, dataset, cfg: TrainConfig) -> tuple[Network, list[float]]:
    """Plain float (optionally QAT) training; returns the net and per-epoch mean loss."""
    opt = SGD(cfg.learning_rate, cfg.momentum)
    x_all = images_to_float(dataset.images)
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for idx in batches(len(dataset), cfg.batch_size, cfg.seed, epoch):
            loss, grads = net.forward_backward(x_all[idx], dataset.labels[idx], cfg.lam,
                                               cfg.quantize_weights)
            opt.step(net, grads)
            losses.append(loss)
        history.append(float(np.mean(losses)) if losses else 0.0)
        logger.info("epoch %d/%d: loss %.4f", epoch + 1, cfg.epochs, history[-1])
    return net, history


# --- int8 network ----------------------------------------------------------------

@dataclass(frozen=True)
class QuantizedLayer:
    spec: LayerSpec
    weights: QuantizedTensor | None = None
    bias: QuantizedBias | None = None

    @property
    def input_scale(self) -> float:
        """Activation scale of this layer's int8 input (bias scale = s_w * s_in)."""
        return self.bias.scale / self.weights.scale


@dataclass(frozen=True)
class QuantizedNetwork:
    layers: tuple[QuantizedLayer, ...]
    input_shape: tuple[int, int, int] = (1, 28, 28)

    def __post_init__(self):
        check_shapes([l.spec for l in self.layers], self.input_shape)
        for l in self.layers:
            if l.spec.parametric:
                if l.weights is None or l.weights.shape != l.spec.weight_shape or l.bias is None:
                    raise ShapeError(f"{l.spec.kind.name} needs weights {l.spec.weight_shape} and bias")
                if l.spec.fan_in > MAX_FAN_IN:
                    raise ShapeError(f"fan-in {l.spec.fan_in} risks int32 accumulator overflow")

    def weight_tensors(self) -> list[tuple[str, QuantizedTensor]]:
        return [(layer_name(i, l.spec), l.weights) for i, l in enumerate(self.layers) if l.spec.parametric]

    def with_weights(self, tensors: list[QuantizedTensor]) -> QuantizedNetwork:
        """Same network with the parametric layers' int8 weights replaced in order."""
        it = iter(tensors)
        layers = tuple(
            QuantizedLayer(l.spec, next(it), l.bias) if l.spec.parametric else l
            for l in self.layers
        )
        return QuantizedNetwork(layers, self.input_shape)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantizedNetwork):
            return NotImplemented
        return self.input_shape == other.input_shape and self.layers == other.layers


def quantize_network(net: Network, calibration: np.ndarray,
                     weight_hook: Callable[[QuantizedTensor], QuantizedTensor] | None = None
                     ) -> QuantizedNetwork:
    """Per-tensor int8 weights, calibrated activation scales, int32 biases.

    ``weight_hook`` post-processes each quantized weight tensor (e.g. throttling)
    before activations are calibrated.
    """
    qweights: dict[int, QuantizedTensor] = {}
    for i, layer in net.parametric():
        q = quantizer.quantize(layer.weight)
        qweights[i] = weight_hook(q) if weight_hook else q
    shadow = net.copy()
    for i, layer in shadow.parametric():
        layer.weight = quantizer.dequantize(qweights[i])
    maxima: dict[int, float] = {}

    def record(i: int, x: np.ndarray) -> None:
        maxima[i] = float(np.max(np.abs(x))) if x.size else 0.0

    shadow.forward(images_to_float(calibration), record=record)
    layers = []
    for i, layer in enumerate(net.layers):
        if layer.spec.parametric:
            s_in = maxima[i] / QMAX if maxima.get(i) else 1.0
            qw = qweights[i]
            qb = quantizer.quantize_bias(layer.bias, qw.scale * s_in)
            layers.append(QuantizedLayer(layer.spec, qw, qb))
        else:
            layers.append(QuantizedLayer(layer.spec))
    return QuantizedNetwork(tuple(layers), net.input_shape)


def dequantized_network(qnet: QuantizedNetwork) -> Network:
    """Float network carrying the dequantized weights and biases (reference oracle)."""
    layers = []
    for l in qnet.layers:
        if l.spec.parametric:
            layers.append(Layer(l.spec, quantizer.dequantize(l.weights),
                                quantizer.dequantize_bias(l.bias)))
        else:
            layers.append(Layer(l.spec))
    return Network(layers, qnet.input_shape)


def _accumulate(x_q: np.ndarray, w_q: np.ndarray, b_q: np.ndarray) -> np.ndarray:
    # int8 x int8 products summed in float64 are exact (|acc| < 2^31 < 2^53),
    # so the result does not depend on BLAS summation order
    acc = x_q.astype(np.float64) @ w_q.astype(np.float64).T
    acc = acc.astype(np.int64) + b_q.astype(np.int64)
    return acc.astype(np.int32)


def forward_int8(qnet: QuantizedNetwork, images: np.ndarray, accumulators: bool = False) -> np.ndarray:
    """int8 inference; returns float logits (int32 accumulators times bias scale).

    uint8 images are scaled to [0, 1] and quantized with the first layer's
    input scale; int8 input is taken as already quantized. With
    ``accumulators`` the raw int32 accumulators of the last parametric layer
    are returned instead.
    """
    images = np.asarray(images)
    param_idx = [i for i, l in enumerate(qnet.layers) if l.spec.parametric]
    if not param_idx:
        raise ShapeError("network has no parametric layers")
    if images.dtype == np.int8:
        v = images[:, None] if images.ndim == 3 else images
    else:
        first = qnet.layers[param_idx[0]]
        v = quantizer.quantize(images_to_float(images), scale=first.input_scale).values
    if v.shape[1:] != qnet.input_shape:
        raise ShapeError(f"input {v.shape[1:]} does not match network input {qnet.input_shape}")
    acc = None
    for i, layer in enumerate(qnet.layers):
        spec = layer.spec
        if spec.parametric:
            if spec.kind is LayerKind.CONV2D:
                b, _, h, w = v.shape
                cols = _im2col(v, spec.dims[2])
                out = _accumulate(cols, layer.weights.values.reshape(spec.dims[0], -1), layer.bias.values)
                out = out.reshape(b, h, w, spec.dims[0]).transpose(0, 3, 1, 2)
            else:
                out = _accumulate(v, layer.weights.values, layer.bias.values)
            later = [j for j in param_idx if j > i]
            if later:
                nxt = qnet.layers[later[0]].input_scale
                v = np.clip(quantizer.round_half_away(out * (layer.bias.scale / nxt)),
                            -QMAX, QMAX).astype(np.int8)
            else:
                acc = out
                v = out.astype(np.float64) * layer.bias.scale
        elif spec.kind is LayerKind.RELU:
            v = np.maximum(v, 0).astype(v.dtype)
        elif spec.kind is LayerKind.MAXPOOL2D:
            v = _pool_windows(v, spec.dims[0]).max(axis=-1)
        elif spec.kind is LayerKind.FLATTEN:
            v = v.reshape(v.shape[0], -1)
    if accumulators:
        return acc
    return v


def predict(qnet: QuantizedNetwork, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    preds = [forward_int8(qnet, images[s:s + batch_size]).argmax(axis=1)
             for s in range(0, len(images), batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(qnet: QuantizedNetwork, dataset, limit: int | None = None, batch_size: int = 500) -> float:
    """Top-1 accuracy of int8 inference on (the first ``limit`` samples of) a dataset."""
    n = len(dataset) if limit is None else min(limit, len(dataset))
    if n == 0:
        return 0.0
    preds = predict(qnet, dataset.images[:n], batch_size)
    return float(np.mean(preds == dataset.labels[:n]))


def evaluate_float(net: Network, dataset, limit: int | None = None, batch_size: int = 500) -> float:
    n = len(dataset) if limit is None else min(limit, len(dataset))
    correct = 0
    for s in range(0, n, batch_size):
        e = min(n, s + batch_size)
        logits = net.forward(images_to_float(dataset.images[s:e]))
        correct += int(np.sum(logits.argmax(axis=1) == dataset.labels[s:e]))
    return correct / n if n else 0.0
