from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from django.conf import settings
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from core.exceptions import DimensionError, GradientCheckError, LayerStateError, ParameterError

logger = logging.getLogger(__name__)

DTYPE = np.float64

LEAKY_SLOPE = 1e-2


class Tensor:
    """
    Dense float64 array plus an optional gradient buffer of identical shape.

    Parameters and running statistics are stored as tensors; activations flowing
    between layers are plain ndarrays.
    """

    def __init__(self, data, requires_grad: bool = True, decay: bool = True):
        self.data = np.array(data, dtype=DTYPE, copy=True)
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if requires_grad else None
        # SGD skips weight decay for norm mapping parameters and biases
        self.decay = decay

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self.grad is not None

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def accumulate(self, grad: np.ndarray):
        if grad.shape != self.data.shape:
            raise DimensionError(f'Gradient shape {grad.shape} does not match tensor shape {self.data.shape}')
        self.grad += grad

    def __repr__(self):
        return f'Tensor(shape={self.shape}, requires_grad={self.requires_grad})'


def _require_4d(x: np.ndarray, op: str):
    if x.ndim != 4:
        raise DimensionError(f'{op} expects a (N, C, H, W) input, got shape {x.shape}')


# Convolution

def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x

    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    _require_4d(x, 'conv2d')
    n, c, h, w = x.shape
    out_channels, in_channels, kh, kw = weight.shape

    if in_channels != c:
        raise DimensionError(f'conv2d weight expects {in_channels} input channels, input has {c}')
    if bias.shape != (out_channels,):
        raise DimensionError(f'conv2d bias shape {bias.shape} does not match {out_channels} filters')
    if stride < 1:
        raise ParameterError(f'conv2d stride must be >= 1, got {stride}')
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(f'conv2d kernel {kh}x{kw} exceeds padded input {h + 2 * pad}x{w + 2 * pad}')

    windows = _windows(_pad(x, pad), kh, kw, stride)
    out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3]))

    return out.transpose(0, 3, 1, 2) + bias[None, :, None, None]


def conv2d_backward(grad: np.ndarray, x: np.ndarray, weight: np.ndarray, stride: int, pad: int) \
        -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    _, _, h, w = x.shape
    _, _, kh, kw = weight.shape
    out_h, out_w = grad.shape[2:]

    xp = _pad(x, pad)
    windows = _windows(xp, kh, kw, stride)

    grad_bias = grad.sum(axis=(0, 2, 3))
    grad_weight = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))

    grad_xp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            contribution = np.tensordot(grad, weight[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            grad_xp[:, :, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride] += contribution

    grad_x = grad_xp[:, :, pad:pad + h, pad:pad + w]

    return np.ascontiguousarray(grad_x), grad_weight, grad_bias


# Linear

def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f'linear expects (N, {weight.shape[1]}) input, got {x.shape}')
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f'linear bias shape {bias.shape} does not match {weight.shape[0]} outputs')

    return x @ weight.T + bias


def linear_backward(grad: np.ndarray, x: np.ndarray, weight: np.ndarray) \
        -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return grad @ weight, grad.T @ x, grad.sum(axis=0)


# Activations

def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    if not 0.0 < slope < 1.0:
        raise ParameterError(f'leaky_relu slope must lie in (0, 1), got {slope}')

    return np.where(x >= 0.0, x, slope * x)


def leaky_relu_backward(grad: np.ndarray, x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    # derivative at exactly 0 is taken as 1
    return np.where(x >= 0.0, grad, slope * grad)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return special.expit(x)


def sigmoid_backward(grad: np.ndarray, out: np.ndarray) -> np.ndarray:
    return grad * out * (1.0 - out)


def activation(kind: str, x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    if kind == 'leaky_relu':
        return leaky_relu(x, slope)
    if kind == 'sigmoid':
        return sigmoid(x)

    raise ParameterError(f'Unknown activation {kind!r}')


# Pooling

def max_pool2d(x: np.ndarray, k: int, stride: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Windowed maxima. Returns the pooled array and the flat in-window argmax
    (first occurrence in row-major order) needed by the backward pass.
    """
    _require_4d(x, 'max_pool2d')
    n, c, h, w = x.shape

    if k > h or k > w:
        raise DimensionError(f'max_pool2d window {k} exceeds input {h}x{w}')
    if stride < 1:
        raise ParameterError(f'max_pool2d stride must be >= 1, got {stride}')

    windows = _windows(x, k, k, stride)
    flat = windows.reshape(*windows.shape[:4], k * k)
    indices = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, indices[..., None], axis=-1)[..., 0]

    return out, indices


def max_pool2d_backward(grad: np.ndarray, input_shape: Sequence[int], indices: np.ndarray,
                        k: int, stride: int) -> np.ndarray:
    n, c, out_h, out_w = grad.shape

    rows = np.arange(out_h)[None, None, :, None] * stride + indices // k
    cols = np.arange(out_w)[None, None, None, :] * stride + indices % k
    batch = np.broadcast_to(np.arange(n)[:, None, None, None], rows.shape)
    channels = np.broadcast_to(np.arange(c)[None, :, None, None], rows.shape)

    grad_x = np.zeros(input_shape, dtype=DTYPE)
    np.add.at(grad_x, (batch, channels, rows, cols), grad)

    return grad_x


def adaptive_windows(extent: int, size: int) -> List[Tuple[int, int]]:
    """Window i covers [floor(i * extent / size), ceil((i + 1) * extent / size))."""
    return [((i * extent) // size, -((-(i + 1) * extent) // size)) for i in range(size)]


def adaptive_max_pool2d(x: np.ndarray, size: int) -> Tuple[np.ndarray, np.ndarray]:
    _require_4d(x, 'adaptive_max_pool2d')
    n, c, h, w = x.shape

    if size < 1:
        raise ParameterError(f'adaptive_max_pool2d output size must be >= 1, got {size}')
    if size > h or size > w:
        raise DimensionError(f'adaptive_max_pool2d output size {size} exceeds input {h}x{w}')

    out = np.empty((n, c, size, size), dtype=DTYPE)
    indices = np.empty((n, c, size, size), dtype=np.int64)

    for i, (r0, r1) in enumerate(adaptive_windows(h, size)):
        for j, (c0, c1) in enumerate(adaptive_windows(w, size)):
            flat = x[:, :, r0:r1, c0:c1].reshape(n, c, -1)
            local = flat.argmax(axis=-1)
            indices[:, :, i, j] = local
            out[:, :, i, j] = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]

    return out, indices


def adaptive_max_pool2d_backward(grad: np.ndarray, input_shape: Sequence[int], indices: np.ndarray) -> np.ndarray:
    n, c, h, w = input_shape
    size = grad.shape[2]

    grad_x = np.zeros(input_shape, dtype=DTYPE)
    batch = np.arange(n)[:, None]
    channels = np.arange(c)[None, :]

    for i, (r0, r1) in enumerate(adaptive_windows(h, size)):
        for j, (c0, c1) in enumerate(adaptive_windows(w, size)):
            width = c1 - c0
            local = indices[:, :, i, j]
            # windows may overlap, so accumulate
            np.add.at(grad_x, (batch, channels, r0 + local // width, c0 + local % width), grad[:, :, i, j])

    return grad_x


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    _require_4d(x, 'global_avg_pool')

    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(grad: np.ndarray, input_shape: Sequence[int]) -> np.ndarray:
    h, w = input_shape[2:]

    return np.broadcast_to(grad / (h * w), input_shape).copy()


# Softmax

def temp_softmax(logits: np.ndarray, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ParameterError(f'Softmax temperature must be positive, got {tau}')

    return special.softmax(logits / tau, axis=-1)


def temp_softmax_backward(grad: np.ndarray, out: np.ndarray, tau: float) -> np.ndarray:
    return out * (grad - (grad * out).sum(axis=-1, keepdims=True)) / tau


# Loss

def l1_loss(pred: np.ndarray, target: np.ndarray) -> float:
    if pred.shape != target.shape:
        raise DimensionError(f'l1_loss shapes differ: {pred.shape} vs {target.shape}')

    return float(np.abs(pred - target).mean())


def l1_loss_backward(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    # np.sign(0) == 0 gives the subgradient convention at the kink
    return np.sign(pred - target) / pred.size


# Layers

def fan_in_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """
    A differentiable building block.

    ``forward`` stores whatever the backward pass needs; ``backward`` consumes it,
    so every backward must be preceded by its own forward.
    """

    def __init__(self):
        self.training = True
        self._ctx: Optional[dict] = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray, **kwargs) -> np.ndarray:
        return self.forward(x, **kwargs)

    def _save(self, **ctx):
        self._ctx = ctx

    def _pop(self) -> dict:
        if self._ctx is None:
            raise LayerStateError(f'{type(self).__name__}.backward called without a matching forward')

        ctx, self._ctx = self._ctx, None
        return ctx

    def parameters(self) -> Dict[str, Tensor]:
        return {}

    def buffers(self) -> Dict[str, Tensor]:
        return {}

    def children(self) -> Dict[str, Layer]:
        return {}

    def named_modules(self, prefix: str = '') -> Iterator[Tuple[str, Layer]]:
        yield prefix, self
        for name, child in self.children().items():
            yield from child.named_modules(f'{prefix}.{name}' if prefix else name)

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        for module_name, module in self.named_modules(prefix):
            for name, tensor in module.parameters().items():
                yield (f'{module_name}.{name}' if module_name else name), tensor

    def named_buffers(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        for module_name, module in self.named_modules(prefix):
            for name, tensor in module.buffers().items():
                yield (f'{module_name}.{name}' if module_name else name), tensor

    def zero_grad(self):
        for _, tensor in self.named_parameters():
            tensor.zero_grad()

    def train(self, mode: bool = True) -> Layer:
        for _, module in self.named_modules():
            module.training = mode
        return self

    def eval(self) -> Layer:
        return self.train(False)


class Conv2d(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size

        self.weight = Tensor(fan_in_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Tensor(fan_in_uniform(rng, (out_channels,), fan_in), decay=False)
        self.stride = stride
        self.pad = pad

    def parameters(self):
        return {'weight': self.weight, 'bias': self.bias}

    def forward(self, x):
        self._save(x=x)
        return conv2d(x, self.weight.data, self.bias.data, self.stride, self.pad)

    def backward(self, grad):
        x = self._pop()['x']
        grad_x, grad_weight, grad_bias = conv2d_backward(grad, x, self.weight.data, self.stride, self.pad)

        self.weight.accumulate(grad_weight)
        self.bias.accumulate(grad_bias)

        return grad_x


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, zero_init: bool = False):
        super().__init__()

        if zero_init:
            weight = np.zeros((out_features, in_features))
            bias = np.zeros(out_features)
        else:
            weight = fan_in_uniform(rng, (out_features, in_features), in_features)
            bias = fan_in_uniform(rng, (out_features,), in_features)

        self.weight = Tensor(weight)
        self.bias = Tensor(bias, decay=False)

    def parameters(self):
        return {'weight': self.weight, 'bias': self.bias}

    def forward(self, x):
        self._save(x=x)
        return linear(x, self.weight.data, self.bias.data)

    def backward(self, grad):
        x = self._pop()['x']
        grad_x, grad_weight, grad_bias = linear_backward(grad, x, self.weight.data)

        self.weight.accumulate(grad_weight)
        self.bias.accumulate(grad_bias)

        return grad_x


class LeakyReLU(Layer):
    def __init__(self, slope: float = LEAKY_SLOPE):
        super().__init__()
        self.slope = slope

    def forward(self, x):
        self._save(x=x)
        return leaky_relu(x, self.slope)

    def backward(self, grad):
        return leaky_relu_backward(grad, self._pop()['x'], self.slope)


class Sigmoid(Layer):
    def forward(self, x):
        out = sigmoid(x)
        self._save(out=out)
        return out

    def backward(self, grad):
        return sigmoid_backward(grad, self._pop()['out'])


class MaxPool2d(Layer):
    def __init__(self, k: int = 2, stride: int = 2):
        super().__init__()
        self.k = k
        self.stride = stride

    def forward(self, x):
        out, indices = max_pool2d(x, self.k, self.stride)
        self._save(shape=x.shape, indices=indices)
        return out

    def backward(self, grad):
        ctx = self._pop()
        return max_pool2d_backward(grad, ctx['shape'], ctx['indices'], self.k, self.stride)


class AdaptiveMaxPool2d(Layer):
    def __init__(self, size: int):
        super().__init__()
        if size < 1:
            raise ParameterError(f'adaptive_max_pool2d output size must be >= 1, got {size}')
        self.size = size

    def forward(self, x):
        out, indices = adaptive_max_pool2d(x, self.size)
        self._save(shape=x.shape, indices=indices)
        return out

    def backward(self, grad):
        ctx = self._pop()
        return adaptive_max_pool2d_backward(grad, ctx['shape'], ctx['indices'])


class GlobalAvgPool(Layer):
    def forward(self, x):
        self._save(shape=x.shape)
        return global_avg_pool(x)

    def backward(self, grad):
        return global_avg_pool_backward(grad, self._pop()['shape'])


class Flatten(Layer):
    def forward(self, x):
        self._save(shape=x.shape)
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._pop()['shape'])


class Sequential(Layer):
    def __init__(self, layers: Sequence[Tuple[str, Layer]]):
        super().__init__()
        self.layers: Dict[str, Layer] = dict(layers)

    def children(self):
        return self.layers

    def forward(self, x):
        for layer in self.layers.values():
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(list(self.layers.values())):
            grad = layer.backward(grad)
        return grad


# Gradient checking

def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass(frozen=True)
class GradientFailure:
    layer: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    relative_error: float


@dataclass(frozen=True)
class LayerGradientCheck:
    layer: str
    checked: int
    max_relative_error: float


@dataclass
class GradCheckReport:
    tolerance: float
    layers: List[LayerGradientCheck] = field(default_factory=list)
    failures: List[GradientFailure] = field(default_factory=list)

    @property
    def max_relative_error(self) -> float:
        return max((layer.max_relative_error for layer in self.layers), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.failures

    def raise_for_failures(self):
        if self.failures:
            raise GradientCheckError(self)


def _sample_indices(shape: Tuple[int, ...], samples: int, rng: np.random.Generator) -> List[Tuple[int, ...]]:
    size = int(np.prod(shape))
    flat = np.arange(size) if size <= samples else np.sort(rng.choice(size, samples, replace=False))

    return [tuple(int(i) for i in np.unravel_index(f, shape)) for f in flat]


def grad_check(network: Layer, x: np.ndarray, tolerance: float,
               loss: Optional[Callable[[np.ndarray], Tuple[float, np.ndarray]]] = None,
               h: float = 1e-5, samples: Optional[int] = None, rng: Optional[np.random.Generator] = None,
               check_input: bool = True) -> GradCheckReport:
    """
    Compares the analytic gradient of every parameter tensor (and of the input)
    with central differences.

    ``loss`` maps the network output to ``(value, d value / d output)``; by default
    a fixed random linear functional of the output is used, which is smooth.
    Tensors larger than ``samples`` elements are checked on a random subsample.
    """
    rng = rng or np.random.default_rng(0)
    samples = samples or settings.SEPBN_GRADCHECK_SAMPLES
    x = np.array(x, dtype=DTYPE, copy=True)

    if loss is None:
        direction = rng.standard_normal(network.forward(x).shape)

        def loss(out):
            return float((out * direction).sum()), direction

    network.zero_grad()
    value, grad_out = loss(network.forward(x))
    grad_x = network.backward(grad_out)

    if not np.isfinite(value):
        raise ParameterError('Gradient check needs a finite loss')

    targets: List[Tuple[str, np.ndarray, np.ndarray]] = [
        (name, tensor.data, tensor.grad.copy()) for name, tensor in network.named_parameters()
    ]
    if check_input:
        targets.append(('input', x, grad_x))

    report = GradCheckReport(tolerance=tolerance)

    for name, data, analytic in targets:
        worst = 0.0
        indices = _sample_indices(data.shape, samples, rng)

        for index in indices:
            original = data[index]

            data[index] = original + h
            plus, _ = loss(network.forward(x))
            data[index] = original - h
            minus, _ = loss(network.forward(x))
            data[index] = original

            numeric = (plus - minus) / (2.0 * h)
            error = relative_error(float(analytic[index]), numeric)
            worst = max(worst, error)

            if error > tolerance:
                report.failures.append(GradientFailure(name, index, float(analytic[index]), numeric, error))

        report.layers.append(LayerGradientCheck(name, len(indices), worst))
        logger.debug('Gradient check %s: %d elements, max relative error %.3e', name, len(indices), worst)

    return report
