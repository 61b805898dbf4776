from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from django.db import models

from core.exceptions import DegenerateStatisticsError, DimensionError, ParameterError, RoutingError, \
    UndefinedSimilarityError
from core.tensor import AdaptiveMaxPool2d, Conv2d, Flatten, GlobalAvgPool, Layer, LeakyReLU, Linear, Sequential, \
    Sigmoid, Tensor, temp_softmax, temp_softmax_backward

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1
MAPPING_NOISE = 0.1


class NormKind(models.TextChoices):
    BN = "BN"
    SepBN = "SepBN"
    BruteForceSepBN = "BruteForceSepBN"
    SimpleSepBN = "SimpleSepBN"


class Aggregation(models.TextChoices):
    Soft = "soft"
    Hard = "hard"


class _Normalization(Layer):
    """Per-channel batch statistics shared by every normalization variant."""

    def __init__(self, channels: int, eps: float = DEFAULT_EPS, momentum: float = DEFAULT_MOMENTUM):
        super().__init__()
        if eps <= 0:
            raise ParameterError(f'eps must be positive, got {eps}')

        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.running_mean = Tensor(np.zeros(channels), requires_grad=False)
        self.running_var = Tensor(np.ones(channels), requires_grad=False)

    def buffers(self):
        return {'running_mean': self.running_mean, 'running_var': self.running_var}

    def _normalize(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f'{type(self).__name__} expects (N, {self.channels}, H, W), got {x.shape}')

        if not self.training:
            std = np.sqrt(self.running_var.data + self.eps)[None, :, None, None]
            return (x - self.running_mean.data[None, :, None, None]) / std, std

        n, _, h, w = x.shape
        if n * h * w < 2:
            raise DegenerateStatisticsError(
                f'{type(self).__name__} needs at least 2 values per channel in train mode, got {n * h * w}')

        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        std = np.sqrt(var + self.eps)[None, :, None, None]

        self.running_mean.data[...] = (1.0 - self.momentum) * self.running_mean.data + self.momentum * mean
        self.running_var.data[...] = (1.0 - self.momentum) * self.running_var.data + self.momentum * var

        return (x - mean[None, :, None, None]) / std, std

    def _normalize_backward(self, grad_xhat: np.ndarray, xhat: np.ndarray, std: np.ndarray, training: bool):
        if not training:
            return grad_xhat / std

        mean_grad = grad_xhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_grad_xhat = (grad_xhat * xhat).mean(axis=(0, 2, 3), keepdims=True)

        return (grad_xhat - mean_grad - xhat * mean_grad_xhat) / std


class BatchNorm2d(_Normalization):
    def __init__(self, channels: int, eps: float = DEFAULT_EPS, momentum: float = DEFAULT_MOMENTUM):
        super().__init__(channels, eps, momentum)
        self.gamma = Tensor(np.ones(channels), decay=False)
        self.beta = Tensor(np.zeros(channels), decay=False)

    def parameters(self):
        return {'gamma': self.gamma, 'beta': self.beta}

    def forward(self, x):
        xhat, std = self._normalize(x)
        self._save(xhat=xhat, std=std, training=self.training)

        return self.gamma.data[None, :, None, None] * xhat + self.beta.data[None, :, None, None]

    def backward(self, grad):
        ctx = self._pop()
        xhat = ctx['xhat']

        self.gamma.accumulate((grad * xhat).sum(axis=(0, 2, 3)))
        self.beta.accumulate(grad.sum(axis=(0, 2, 3)))

        grad_xhat = grad * self.gamma.data[None, :, None, None]
        return self._normalize_backward(grad_xhat, xhat, ctx['std'], ctx['training'])


class BruteForceSepBN(Layer):
    """
    K complete BN branches. Each sample is normalized and mapped only by the
    branch of its domain label, and only that branch tracks its statistics.
    """

    def __init__(self, channels: int, branches: int, eps: float = DEFAULT_EPS, momentum: float = DEFAULT_MOMENTUM):
        super().__init__()
        if branches < 1:
            raise ParameterError(f'Brute-force SepBN needs at least one branch, got {branches}')

        self.channels = channels
        self.branches = [BatchNorm2d(channels, eps, momentum) for _ in range(branches)]
        self.domains: Optional[np.ndarray] = None
        self.forced_branch: Optional[int] = None

    @property
    def k(self) -> int:
        return len(self.branches)

    def children(self):
        return {f'branches.{i}': branch for i, branch in enumerate(self.branches)}

    def set_routing(self, domains: Optional[Sequence[int]] = None, forced_branch: Optional[int] = None):
        if forced_branch is not None and not 0 <= forced_branch < self.k:
            raise RoutingError(f'Forced branch {forced_branch} outside [0, {self.k})')

        if domains is not None and any(d is None for d in domains):
            raise RoutingError('Brute-force SepBN needs a domain label for every sample')

        self.domains = None if domains is None else np.asarray(domains, dtype=np.int64)
        self.forced_branch = forced_branch

    def _labels(self, n: int) -> np.ndarray:
        if self.forced_branch is not None:
            return np.full(n, self.forced_branch, dtype=np.int64)

        if self.domains is None:
            raise RoutingError('Brute-force SepBN needs domain labels or a forced branch')
        if self.domains.shape != (n,):
            raise RoutingError(f'Got {self.domains.shape[0]} domain labels for a batch of {n}')
        if np.any((self.domains < 0) | (self.domains >= self.k)):
            raise RoutingError(f'Domain labels must lie in [0, {self.k}), got {sorted(set(self.domains.tolist()))}')

        return self.domains

    def forward(self, x):
        labels = self._labels(x.shape[0])
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f'{type(self).__name__} expects (N, {self.channels}, H, W), got {x.shape}')

        # every branch is checked before any running statistics move
        if self.training:
            counts = np.bincount(labels, minlength=self.k)
            spatial = x.shape[2] * x.shape[3]
            degenerate = [k for k, count in enumerate(counts) if 0 < count * spatial < 2]
            if degenerate:
                raise DegenerateStatisticsError(
                    f'Brute-force SepBN branches {degenerate} get fewer than 2 values per channel in train mode')

        out = np.empty_like(x)
        routes = []

        for k, branch in enumerate(self.branches):
            indices = np.flatnonzero(labels == k)
            if indices.size == 0:
                continue

            out[indices] = branch.forward(x[indices])
            routes.append((k, indices))

        self._save(routes=routes)
        return out

    def backward(self, grad):
        grad_x = np.zeros_like(grad)

        for k, indices in self._pop()['routes']:
            grad_x[indices] = self.branches[k].backward(grad[indices])

        return grad_x


def _mapping_sets(k: int, channels: int, rng: np.random.Generator):
    gamma = np.ones((k, channels))
    if k > 1:
        # identical sets would sit on a saddle
        gamma += rng.uniform(-MAPPING_NOISE, MAPPING_NOISE, size=(k, channels))

    return Tensor(gamma, decay=False), Tensor(np.zeros((k, channels)), decay=False)


class _TemperatureMixin:
    _tau: float

    @property
    def tau(self) -> float:
        return self._tau

    @tau.setter
    def tau(self, value: float):
        if value <= 0:
            raise ParameterError(f'Softmax temperature must be positive, got {value}')
        self._tau = float(value)


class SimpleSepBN(_TemperatureMixin, _Normalization):
    """Shared normalization with K mapping sets mixed by a squeeze-and-excitation attention."""

    def __init__(self, channels: int, k: int, rng: np.random.Generator, reduction: int = 16, tau: float = 1.0,
                 eps: float = DEFAULT_EPS, momentum: float = DEFAULT_MOMENTUM):
        super().__init__(channels, eps, momentum)
        if reduction < 1 or channels % reduction:
            raise ParameterError(f'Channels ({channels}) must be divisible by the reduction rate ({reduction})')

        self.k = k
        self.reduction = reduction
        self.tau = tau
        self.gamma, self.beta = _mapping_sets(k, channels, rng)
        self.attention = Sequential([
            ('pool', GlobalAvgPool()),
            ('flatten', Flatten()),
            ('squeeze', Linear(channels, channels // reduction, rng)),
            ('act', LeakyReLU()),
            ('excite', Linear(channels // reduction, k, rng)),
            ('gate', Sigmoid()),
        ])
        self.last_attention: Optional[np.ndarray] = None

    def parameters(self):
        return {'gamma': self.gamma, 'beta': self.beta}

    def children(self):
        return {'attention': self.attention}

    def attention_weights(self, x: np.ndarray) -> np.ndarray:
        return temp_softmax(self.attention.forward(x), self.tau)

    def forward(self, x):
        xhat, std = self._normalize(x)
        weights = self.attention_weights(x)
        gamma_hat = weights @ self.gamma.data
        beta_hat = weights @ self.beta.data

        self.last_attention = weights
        self._save(xhat=xhat, std=std, training=self.training, weights=weights, gamma_hat=gamma_hat, tau=self.tau)

        return gamma_hat[:, :, None, None] * xhat + beta_hat[:, :, None, None]

    def backward(self, grad):
        ctx = self._pop()
        xhat, weights = ctx['xhat'], ctx['weights']

        grad_gamma_hat = (grad * xhat).sum(axis=(2, 3))
        grad_beta_hat = grad.sum(axis=(2, 3))

        self.gamma.accumulate(weights.T @ grad_gamma_hat)
        self.beta.accumulate(weights.T @ grad_beta_hat)

        grad_weights = grad_gamma_hat @ self.gamma.data.T + grad_beta_hat @ self.beta.data.T
        grad_gate = temp_softmax_backward(grad_weights, weights, ctx['tau'])
        grad_x_attention = self.attention.backward(grad_gate)

        grad_xhat = grad * ctx['gamma_hat'][:, :, None, None]
        return self._normalize_backward(grad_xhat, xhat, ctx['std'], ctx['training']) + grad_x_attention


class SepBN(_TemperatureMixin, _Normalization):
    """
    Shared normalization with K mapping sets, selected per sample and per
    channel group by an attention block:
    adaptive max pool (T x T) -> 1x1 conv (C -> G) -> MLP -> softmax over K.

    Channel group g is the contiguous block [g * M, (g + 1) * M) with M = C / G.
    """

    def __init__(self, channels: int, k: int, groups: int, pool_size: int, rng: np.random.Generator,
                 tau: float = 1.0, aggregation: str = Aggregation.Soft,
                 eps: float = DEFAULT_EPS, momentum: float = DEFAULT_MOMENTUM):
        super().__init__(channels, eps, momentum)
        if groups < 1 or channels % groups:
            raise ParameterError(f'Channels ({channels}) must be divisible by the group count ({groups})')
        if aggregation not in Aggregation.values:
            raise ParameterError(f'Unknown aggregation {aggregation!r}')

        self.k = k
        self.groups = groups
        self.pool_size = pool_size
        self.group_channels = channels // groups
        self.aggregation = aggregation
        self.tau = tau
        self.gamma, self.beta = _mapping_sets(k, channels, rng)

        features = groups * pool_size * pool_size
        self.attention = Sequential([
            ('pool', AdaptiveMaxPool2d(pool_size)),
            ('conv', Conv2d(channels, groups, 1, rng)),
            ('flatten', Flatten()),
            ('hidden', Linear(features, features, rng)),
            ('act', LeakyReLU()),
            # zero logits start every sample at uniform attention
            ('out', Linear(features, groups * k, rng, zero_init=True)),
        ])
        self.last_attention: Optional[np.ndarray] = None

    def parameters(self):
        return {'gamma': self.gamma, 'beta': self.beta}

    def children(self):
        return {'attention': self.attention}

    def attention_weights(self, x: np.ndarray) -> np.ndarray:
        """Attention weights of shape (N, G, K), each (n, g) row on the simplex."""
        logits = self.attention.forward(x).reshape(x.shape[0], self.groups, self.k)
        return temp_softmax(logits, self.tau)

    def _grouped(self, values: np.ndarray) -> np.ndarray:
        return values.reshape(self.k, self.groups, self.group_channels)

    def mix(self, weights: np.ndarray):
        """Per-sample, per-group mapping parameters as (N, C) arrays."""
        n = weights.shape[0]
        gamma_hat = np.einsum('ngk,kgm->ngm', weights, self._grouped(self.gamma.data)).reshape(n, self.channels)
        beta_hat = np.einsum('ngk,kgm->ngm', weights, self._grouped(self.beta.data)).reshape(n, self.channels)

        return gamma_hat, beta_hat

    def forward(self, x):
        xhat, std = self._normalize(x)
        attention = self.attention_weights(x)

        if self.aggregation == Aggregation.Hard:
            # first index on ties
            weights = np.zeros_like(attention)
            np.put_along_axis(weights, attention.argmax(axis=-1)[..., None], 1.0, axis=-1)
        else:
            weights = attention

        gamma_hat, beta_hat = self.mix(weights)

        self.last_attention = attention
        self._save(xhat=xhat, std=std, training=self.training, attention=attention, weights=weights,
                   gamma_hat=gamma_hat, tau=self.tau, aggregation=self.aggregation)

        return gamma_hat[:, :, None, None] * xhat + beta_hat[:, :, None, None]

    def backward(self, grad):
        ctx = self._pop()
        xhat, weights = ctx['xhat'], ctx['weights']
        n = grad.shape[0]

        grad_gamma_hat = (grad * xhat).sum(axis=(2, 3)).reshape(n, self.groups, self.group_channels)
        grad_beta_hat = grad.sum(axis=(2, 3)).reshape(n, self.groups, self.group_channels)

        self.gamma.accumulate(np.einsum('ngk,ngm->kgm', weights, grad_gamma_hat).reshape(self.k, self.channels))
        self.beta.accumulate(np.einsum('ngk,ngm->kgm', weights, grad_beta_hat).reshape(self.k, self.channels))

        grad_xhat = grad * ctx['gamma_hat'][:, :, None, None]
        grad_x = self._normalize_backward(grad_xhat, xhat, ctx['std'], ctx['training'])

        # hard selection passes no gradient to the attention block
        if ctx['aggregation'] == Aggregation.Soft:
            grad_attention = np.einsum('ngm,kgm->ngk', grad_gamma_hat, self._grouped(self.gamma.data)) \
                             + np.einsum('ngm,kgm->ngk', grad_beta_hat, self._grouped(self.beta.data))
            grad_logits = temp_softmax_backward(grad_attention, ctx['attention'], ctx['tau'])
            grad_x = grad_x + self.attention.backward(grad_logits.reshape(n, self.groups * self.k))

        return grad_x


# Similarity analysis

def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a == 0 or norm_b == 0:
        raise UndefinedSimilarityError('Cosine similarity of a zero vector is undefined')

    return float(np.dot(a, b) / (norm_a * norm_b))


def param_similarity(params: Sequence[np.ndarray]) -> float:
    """Mean cosine similarity over all unordered pairs of the K parameter vectors."""
    if len(params) < 2:
        raise ParameterError(f'Similarity needs at least two parameter vectors, got {len(params)}')

    pairs = [cosine_similarity(np.ravel(a), np.ravel(b)) for a, b in itertools.combinations(params, 2)]
    return float(np.clip(np.mean(pairs), -1.0, 1.0))


class ParameterKind(models.TextChoices):
    RunningMean = "running_mean"
    RunningVar = "running_var"
    Scale = "scale"
    Shift = "shift"


@dataclass
class SimilarityRow:
    module: str
    values: Dict[str, Optional[float]] = field(default_factory=dict)


@dataclass
class SimilarityReport:
    rows: List[SimilarityRow] = field(default_factory=list)

    def _mean(self, kinds: Sequence[str]) -> Optional[float]:
        values = [row.values.get(kind) for row in self.rows for kind in kinds]
        values = [v for v in values if v is not None]

        return float(np.mean(values)) if values else None

    @property
    def mean_tracking(self) -> Optional[float]:
        return self._mean((ParameterKind.RunningMean, ParameterKind.RunningVar))

    @property
    def mean_mapping(self) -> Optional[float]:
        return self._mean((ParameterKind.Scale, ParameterKind.Shift))


def _safe_similarity(module: str, kind: str, params: Sequence[np.ndarray]) -> Optional[float]:
    try:
        return param_similarity(params)
    except UndefinedSimilarityError:
        logger.warning('Similarity of %s in %s is undefined (zero vector)', kind, module)
        return None


def similarity_report(network: Layer) -> SimilarityReport:
    report = SimilarityReport()

    for name, module in network.named_modules():
        if isinstance(module, BruteForceSepBN) and module.k >= 2:
            kinds = {
                ParameterKind.RunningMean: [b.running_mean.data for b in module.branches],
                ParameterKind.RunningVar: [b.running_var.data for b in module.branches],
                ParameterKind.Scale: [b.gamma.data for b in module.branches],
                ParameterKind.Shift: [b.beta.data for b in module.branches],
            }
        elif isinstance(module, (SepBN, SimpleSepBN)) and module.k >= 2:
            kinds = {
                ParameterKind.Scale: list(module.gamma.data),
                ParameterKind.Shift: list(module.beta.data),
            }
        else:
            continue

        report.rows.append(SimilarityRow(
            module=name,
            values={str(kind): _safe_similarity(name, kind, params) for kind, params in kinds.items()},
        ))

    return report
