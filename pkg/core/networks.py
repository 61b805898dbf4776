from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from django.db import models

from core.exceptions import ConfigurationError, DimensionError, RoutingError
from core.norm import Aggregation, BatchNorm2d, BruteForceSepBN, NormKind, SepBN, SimpleSepBN
from core.tensor import Conv2d, Flatten, Layer, LeakyReLU, Linear, MaxPool2d, Sequential, Tensor

logger = logging.getLogger(__name__)

FULL_CHANNELS = (64, 128, 256, 512, 1024, 2048)
DESK_CHANNELS = (8, 16, 32, 64)


class Architecture(models.TextChoices):
    Vanilla = "vanilla"
    MultiHead = "multihead"


def _from_dict(cls, data: dict, tuple_fields: Sequence[str] = ()):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f'Unknown {cls.__name__} keys: {sorted(unknown)}')

    values = dict(data)
    for name in tuple_fields:
        if name in values:
            values[name] = tuple(values[name])

    return cls(**values)


@dataclass(frozen=True)
class VanillaConfig:
    input_size: int = 64
    base_channels: Tuple[int, ...] = DESK_CHANNELS
    hidden_width: int = 128
    landmarks: int = 5
    norm_mask: Tuple[str, ...] = (NormKind.BN,) * len(DESK_CHANNELS)
    k: int = 3
    groups: int = 2
    pool_size: int = 3
    reduction: int = 4
    aggregation: str = Aggregation.Soft
    tau: float = 1.0
    in_channels: int = 3

    @classmethod
    def full(cls, landmarks: int, norm: str = NormKind.BN, **overrides) -> VanillaConfig:
        values = dict(input_size=128, base_channels=FULL_CHANNELS, hidden_width=1024, landmarks=landmarks,
                      norm_mask=(norm,) * len(FULL_CHANNELS), reduction=16)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def desk(cls, landmarks: int, norm: str = NormKind.BN, **overrides) -> VanillaConfig:
        values = dict(input_size=64, base_channels=DESK_CHANNELS, hidden_width=128, landmarks=landmarks,
                      norm_mask=(norm,) * len(DESK_CHANNELS), reduction=4)
        values.update(overrides)
        return cls(**values)

    @property
    def stages(self) -> int:
        return len(self.base_channels)

    @property
    def feature_size(self) -> int:
        """Spatial extent after the last stage."""
        return self.input_size // 2 ** self.stages

    @property
    def flat_features(self) -> int:
        return self.base_channels[-1] * self.feature_size ** 2

    def stage_input_size(self, stage: int) -> int:
        return self.input_size // 2 ** stage

    def validate(self) -> VanillaConfig:
        if len(self.norm_mask) != self.stages:
            raise ConfigurationError(
                f'Norm mask has {len(self.norm_mask)} entries for {self.stages} stages')
        if self.input_size < 2 ** self.stages or self.input_size % 2 ** self.stages:
            raise ConfigurationError(
                f'Input size {self.input_size} must be divisible by 2^{self.stages}')
        if self.landmarks < 1:
            raise ConfigurationError(f'Landmark count must be positive, got {self.landmarks}')

        for stage, (kind, channels) in enumerate(zip(self.norm_mask, self.base_channels)):
            if kind not in NormKind.values:
                raise ConfigurationError(f'Unknown norm kind {kind!r} at stage {stage + 1}')
            if kind == NormKind.SepBN:
                if channels % self.groups:
                    raise ConfigurationError(
                        f'Stage {stage + 1}: {channels} channels are not divisible into {self.groups} groups')
                if self.pool_size > self.stage_input_size(stage):
                    raise ConfigurationError(
                        f'Stage {stage + 1}: pool size {self.pool_size} exceeds {self.stage_input_size(stage)}')
            if kind == NormKind.SimpleSepBN and channels % self.reduction:
                raise ConfigurationError(
                    f'Stage {stage + 1}: {channels} channels are not divisible by reduction {self.reduction}')

        if self.aggregation not in Aggregation.values:
            raise ConfigurationError(f'Unknown aggregation {self.aggregation!r}')

        return self

    def to_dict(self) -> dict:
        values = dataclasses.asdict(self)
        values['base_channels'] = list(self.base_channels)
        values['norm_mask'] = [str(kind) for kind in self.norm_mask]
        values['aggregation'] = str(self.aggregation)
        return values

    @classmethod
    def from_dict(cls, data: dict) -> VanillaConfig:
        return _from_dict(cls, data, tuple_fields=('base_channels', 'norm_mask'))


@dataclass(frozen=True)
class HeadSpec:
    protocol_id: str
    landmarks: int
    hidden_width: int = 128


@dataclass(frozen=True)
class MultiHeadConfig:
    backbone: VanillaConfig
    heads: Tuple[HeadSpec, ...] = field(default_factory=tuple)

    def validate(self, min_heads: int = 2) -> MultiHeadConfig:
        self.backbone.validate()

        if len(self.heads) < min_heads:
            raise ConfigurationError(f'A multi-head network needs at least {min_heads} heads, got {len(self.heads)}')

        ids = [head.protocol_id for head in self.heads]
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            raise ConfigurationError(f'Duplicate head ids: {duplicates}')

        return self

    def to_dict(self) -> dict:
        return {
            'backbone': self.backbone.to_dict(),
            'heads': [dataclasses.asdict(head) for head in self.heads],
        }

    @classmethod
    def from_dict(cls, data: dict) -> MultiHeadConfig:
        return cls(
            backbone=VanillaConfig.from_dict(data['backbone']),
            heads=tuple(_from_dict(HeadSpec, head) for head in data['heads']),
        )


def build_norm(kind: str, channels: int, cfg: VanillaConfig, rng: np.random.Generator) -> Layer:
    if kind == NormKind.BN:
        return BatchNorm2d(channels)
    if kind == NormKind.BruteForceSepBN:
        return BruteForceSepBN(channels, cfg.k)
    if kind == NormKind.SimpleSepBN:
        return SimpleSepBN(channels, cfg.k, rng, reduction=cfg.reduction, tau=cfg.tau)
    if kind == NormKind.SepBN:
        return SepBN(channels, cfg.k, cfg.groups, cfg.pool_size, rng, tau=cfg.tau, aggregation=cfg.aggregation)

    raise ConfigurationError(f'Unknown norm kind {kind!r}')


def build_backbone(cfg: VanillaConfig, rng: np.random.Generator) -> Sequential:
    stages = []
    in_channels = cfg.in_channels

    for stage, (kind, channels) in enumerate(zip(cfg.norm_mask, cfg.base_channels)):
        stages.append((f'stage{stage + 1}', Sequential([
            ('conv', Conv2d(in_channels, channels, 3, rng, pad=1)),
            ('norm', build_norm(kind, channels, cfg, rng)),
            ('act', LeakyReLU()),
            ('pool', MaxPool2d(2, 2)),
        ])))
        in_channels = channels

    return Sequential(stages)


def build_regressor(in_features: int, hidden_width: int, landmarks: int, rng: np.random.Generator) -> Sequential:
    return Sequential([
        ('flatten', Flatten()),
        ('fc', Linear(in_features, hidden_width, rng)),
        ('act', LeakyReLU()),
        ('out', Linear(hidden_width, 2 * landmarks, rng, zero_init=True)),
    ])


class LandmarkNetwork(Layer):
    """
    A coordinate regressor. Outputs are crop-normalized and centred:
    ``pixel / input_size - 0.5`` for every x and y, so zeros mean the crop centre.
    """

    architecture: str
    backbone: Sequential
    config: VanillaConfig

    def norm_layers(self) -> Iterator[Tuple[str, Layer]]:
        for name, module in self.named_modules():
            if isinstance(module, (BatchNorm2d, BruteForceSepBN, SimpleSepBN, SepBN)) \
                    and not name.split('.')[-2:-1] == ['branches']:
                yield name, module

    def brute_force_layers(self) -> List[BruteForceSepBN]:
        return [module for _, module in self.named_modules() if isinstance(module, BruteForceSepBN)]

    def set_tau(self, tau: float):
        for _, module in self.named_modules():
            if isinstance(module, (SepBN, SimpleSepBN)):
                module.tau = tau

    def set_routing(self, domains: Optional[Sequence[int]] = None, forced_branch: Optional[int] = None):
        for module in self.brute_force_layers():
            module.set_routing(domains=domains, forced_branch=forced_branch)

    def _check_images(self, images: np.ndarray):
        expected = (self.config.in_channels, self.config.input_size, self.config.input_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise DimensionError(f'Expected images of shape (N, {", ".join(map(str, expected))}), got {images.shape}')

    def active_parameters(self, head_id: Optional[str] = None) -> Dict[str, Tensor]:
        """Parameters on the forward path of ``head_id``."""
        return dict(self.named_parameters())

    def landmarks_for(self, head_id: Optional[str] = None) -> int:
        raise NotImplementedError

    def config_dict(self) -> dict:
        raise NotImplementedError

    def forward(self, x, head_id: Optional[str] = None):
        raise NotImplementedError


class VanillaCNN(LandmarkNetwork):
    architecture = Architecture.Vanilla

    def __init__(self, cfg: VanillaConfig, rng: np.random.Generator):
        super().__init__()
        self.config = cfg.validate()
        self.backbone = build_backbone(cfg, rng)
        self.head = build_regressor(cfg.flat_features, cfg.hidden_width, cfg.landmarks, rng)

    def children(self):
        return {'backbone': self.backbone, 'head': self.head}

    def landmarks_for(self, head_id=None):
        if head_id is not None:
            raise RoutingError(f'Single-head network has no head {head_id!r}')
        return self.config.landmarks

    def forward(self, x, head_id=None):
        self.landmarks_for(head_id)
        self._check_images(x)
        return self.head.forward(self.backbone.forward(x))

    def backward(self, grad):
        return self.backbone.backward(self.head.backward(grad))

    def config_dict(self):
        return {'architecture': str(self.architecture), 'model': self.config.to_dict()}


class MultiHeadNetwork(LandmarkNetwork):
    """Shared convolutional backbone with one regression head per annotation protocol."""

    architecture = Architecture.MultiHead

    def __init__(self, cfg: MultiHeadConfig, rng: np.random.Generator, min_heads: int = 2):
        super().__init__()
        self.multihead_config = cfg.validate(min_heads=min_heads)
        self.config = cfg.backbone
        self.backbone = build_backbone(cfg.backbone, rng)

        channels = cfg.backbone.base_channels[-1]
        self.heads: Dict[str, Sequential] = {}
        for spec in cfg.heads:
            self.heads[spec.protocol_id] = Sequential([
                ('conv', Conv2d(channels, channels, 3, rng, pad=1)),
                *build_regressor(cfg.backbone.flat_features, spec.hidden_width, spec.landmarks, rng).layers.items(),
            ])

    @property
    def head_ids(self) -> List[str]:
        return list(self.heads)

    def children(self):
        return {'backbone': self.backbone, **{f'heads.{head_id}': head for head_id, head in self.heads.items()}}

    def _resolve(self, head_id: Optional[str]) -> str:
        if head_id is None and len(self.heads) == 1:
            return self.head_ids[0]
        if head_id not in self.heads:
            raise RoutingError(f'Unknown head {head_id!r}, registered: {self.head_ids}')
        return head_id

    def active_parameters(self, head_id=None):
        head_id = self._resolve(head_id)
        return {
            name: tensor for name, tensor in self.named_parameters()
            if name.startswith('backbone.') or name.startswith(f'heads.{head_id}.')
        }

    def landmarks_for(self, head_id=None):
        head_id = self._resolve(head_id)
        return next(spec.landmarks for spec in self.multihead_config.heads if spec.protocol_id == head_id)

    def forward(self, x, head_id=None):
        head_id = self._resolve(head_id)
        self._check_images(x)
        self._save(head_id=head_id)

        return self.heads[head_id].forward(self.backbone.forward(x))

    def backward(self, grad):
        head_id = self._pop()['head_id']
        return self.backbone.backward(self.heads[head_id].backward(grad))

    def keep_only(self, head_id: str) -> MultiHeadNetwork:
        """Disconnects every head except ``head_id``; parameters are shared with this network."""
        head_id = self._resolve(head_id)

        network = MultiHeadNetwork.__new__(MultiHeadNetwork)
        Layer.__init__(network)
        network.multihead_config = dataclasses.replace(
            self.multihead_config,
            heads=tuple(spec for spec in self.multihead_config.heads if spec.protocol_id == head_id),
        )
        network.config = self.config
        network.backbone = self.backbone
        network.heads = {head_id: self.heads[head_id]}
        network.train(self.training)

        return network

    def config_dict(self):
        return {'architecture': str(self.architecture), 'model': self.multihead_config.to_dict()}


def build_vanilla(cfg: VanillaConfig, rng: np.random.Generator) -> VanillaCNN:
    return VanillaCNN(cfg, rng)


def forward_vanilla(network: VanillaCNN, images: np.ndarray) -> np.ndarray:
    return network.forward(images)


def build_multihead(cfg: MultiHeadConfig, rng: np.random.Generator) -> MultiHeadNetwork:
    return MultiHeadNetwork(cfg, rng)


def forward_multihead(network: MultiHeadNetwork, images: np.ndarray, head_id: str) -> np.ndarray:
    return network.forward(images, head_id)


def network_from_config(config: dict, rng: np.random.Generator) -> LandmarkNetwork:
    architecture = config.get('architecture')

    if architecture == Architecture.Vanilla:
        return VanillaCNN(VanillaConfig.from_dict(config['model']), rng)
    if architecture == Architecture.MultiHead:
        cfg = MultiHeadConfig.from_dict(config['model'])
        return MultiHeadNetwork(cfg, rng, min_heads=1)

    raise ConfigurationError(f'Unknown architecture {architecture!r}')


def parameter_count(network: Layer) -> int:
    return sum(tensor.size for _, tensor in network.named_parameters())
