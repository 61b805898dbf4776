from __future__ import annotations

import json
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import Optional, Union

from django.db import models
from rest_framework import serializers

from core.data import AugmentConfig, SynthConfig
from core.exceptions import ConfigurationError
from core.networks import HeadSpec, MultiHeadConfig, VanillaConfig
from core.norm import Aggregation, NormKind
from core.train import ScheduleConfig, TrainConfig

logger = getLogger(__name__)


class ModelVariant(models.TextChoices):
    Full = "full"
    Desk = "desk"


class StrictSerializer(serializers.Serializer):
    """
    Rejects keys it does not declare. Missing nested sections are validated as
    empty objects so their defaults are resolved too.
    """

    def to_internal_value(self, data):
        if not isinstance(data, dict):
            raise serializers.ValidationError({'non_field_errors': ['Expected an object.']})

        unknown = sorted(set(data) - set(self.fields))
        if unknown:
            raise serializers.ValidationError({key: ['Unknown field.'] for key in unknown})

        data = dict(data)
        for name, serializer in self.fields.items():
            if isinstance(serializer, serializers.Serializer) and name not in data:
                data[name] = {}

        return super().to_internal_value(data)

    def update(self, instance, validated_data):
        raise RuntimeError("StrictSerializer can not perform update")

    def create(self, validated_data):
        raise RuntimeError("StrictSerializer can not perform create")


def _run_validate(build):
    try:
        return build()
    except (ConfigurationError, TypeError) as e:
        raise serializers.ValidationError(str(e))


class ModelSerializer(StrictSerializer):
    variant = serializers.ChoiceField(choices=ModelVariant.choices, default=ModelVariant.Desk)
    norm = serializers.ChoiceField(choices=NormKind.choices, default=NormKind.BN)
    norm_mask = serializers.ListField(child=serializers.ChoiceField(choices=NormKind.choices), required=False)
    input_size = serializers.IntegerField(min_value=8, required=False)
    base_channels = serializers.ListField(child=serializers.IntegerField(min_value=1), min_length=1, required=False)
    hidden_width = serializers.IntegerField(min_value=1, required=False)
    landmarks = serializers.IntegerField(min_value=1, required=False)
    k = serializers.IntegerField(min_value=1, default=3)
    groups = serializers.IntegerField(min_value=1, default=2)
    pool_size = serializers.IntegerField(min_value=1, default=3)
    reduction = serializers.IntegerField(min_value=1, required=False)
    aggregation = serializers.ChoiceField(choices=Aggregation.choices, default=Aggregation.Soft)
    tau = serializers.FloatField(min_value=1e-12, default=1.0)

    def validate(self, attrs):
        _run_validate(lambda: vanilla_config(attrs, attrs.get('landmarks', 5)).validate())
        return attrs


class ScheduleSerializer(StrictSerializer):
    lr_max = serializers.FloatField(default=1e-3)
    lr_min = serializers.FloatField(default=5e-6)
    warmup_epochs = serializers.IntegerField(min_value=0, default=10)
    total_epochs = serializers.IntegerField(min_value=1, default=60)
    tau_start = serializers.FloatField(default=30.0)
    tau_end = serializers.FloatField(default=1.0)
    tau_anneal_epochs = serializers.IntegerField(min_value=0, default=6)


class TrainSerializer(StrictSerializer):
    schedule = ScheduleSerializer()
    batch_size = serializers.IntegerField(min_value=2, default=8)
    momentum = serializers.FloatField(min_value=0, max_value=0.999999, default=0.9)
    weight_decay = serializers.FloatField(min_value=0, default=5e-4)
    backbone_lr_factor = serializers.FloatField(min_value=0, default=1e-4)
    eval_every = serializers.IntegerField(min_value=0, default=10)

    def validate(self, attrs):
        _run_validate(lambda: TrainConfig.from_dict(attrs).validate())
        return attrs


class AugmentSerializer(StrictSerializer):
    enabled = serializers.BooleanField(default=True)
    rot_deg = serializers.FloatField(min_value=0, default=25.0)
    bbox_jitter_frac = serializers.FloatField(min_value=0, default=0.15)
    hflip_prob = serializers.FloatField(min_value=0, max_value=1, default=0.5)
    shear_max = serializers.FloatField(min_value=0, default=0.1)

    def validate(self, attrs):
        _run_validate(lambda: augment_config(attrs, seed=0).validate())
        return attrs


class SynthSerializer(StrictSerializer):
    n_samples = serializers.IntegerField(min_value=0, default=256)
    image_size = serializers.IntegerField(min_value=8, default=64)
    landmarks = serializers.IntegerField(min_value=1, default=5)
    domain_weights = serializers.ListField(child=serializers.FloatField(min_value=0), min_length=1,
                                           default=[1 / 3, 1 / 3, 1 / 3])
    yaw_centers = serializers.ListField(child=serializers.FloatField(), min_length=1, default=[-40.0, 0.0, 40.0])
    yaw_jitter = serializers.FloatField(min_value=0, default=10.0)
    brightness = serializers.ListField(child=serializers.FloatField(), min_length=1, default=[0.0, -30.0, 30.0])
    contrast = serializers.ListField(child=serializers.FloatField(min_value=0), min_length=1,
                                     default=[1.0, 0.8, 1.2])
    noise_sigma = serializers.FloatField(min_value=0, default=0.5)
    protocol_id = serializers.RegexField(r'^[A-Za-z0-9_-]+$', default='synth')

    def validate(self, attrs):
        _run_validate(lambda: synth_config(attrs, seed=0).validate())
        return attrs


class HeadsSerializer(StrictSerializer):
    hidden_width = serializers.IntegerField(min_value=1, default=128)


class EvalSerializer(StrictSerializer):
    failure_threshold = serializers.FloatField(min_value=1e-12, default=10.0)


class GradcheckSerializer(StrictSerializer):
    batch_size = serializers.IntegerField(min_value=2, default=2)
    input_size = serializers.IntegerField(min_value=8, default=32)
    tolerance = serializers.FloatField(min_value=0, default=1e-4)


class RunConfigSerializer(StrictSerializer):
    seed = serializers.IntegerField(min_value=0, max_value=2 ** 63 - 1, default=0)
    model = ModelSerializer()
    train = TrainSerializer()
    augment = AugmentSerializer()
    synth = SynthSerializer()
    heads = HeadsSerializer()
    eval = EvalSerializer()
    gradcheck = GradcheckSerializer()


def vanilla_config(model: dict, landmarks: int, **overrides) -> VanillaConfig:
    """Preset for the model variant, then the explicit fields of the section."""
    preset = VanillaConfig.full if model.get('variant', ModelVariant.Desk) == ModelVariant.Full else VanillaConfig.desk

    values = {
        name: model[name]
        for name in ('input_size', 'hidden_width', 'k', 'groups', 'pool_size', 'reduction', 'aggregation', 'tau')
        if name in model
    }
    if 'base_channels' in model:
        values['base_channels'] = tuple(model['base_channels'])

    stages = len(values.get('base_channels', preset(landmarks).base_channels))
    norm = model.get('norm', NormKind.BN)
    values['norm_mask'] = tuple(model['norm_mask']) if 'norm_mask' in model else (norm,) * stages
    values.update(overrides)

    return preset(landmarks, **values)


def augment_config(section: dict, seed: int) -> Optional[AugmentConfig]:
    if not section.get('enabled', True):
        return None
    return AugmentConfig(
        rot_deg=section.get('rot_deg', 25.0),
        bbox_jitter_frac=section.get('bbox_jitter_frac', 0.15),
        hflip_prob=section.get('hflip_prob', 0.5),
        shear_max=section.get('shear_max', 0.1),
        seed=seed,
    )


def synth_config(section: dict, seed: int) -> SynthConfig:
    values = dict(section)
    for name in ('domain_weights', 'yaw_centers', 'brightness', 'contrast'):
        if name in values:
            values[name] = tuple(values[name])
    return SynthConfig(seed=seed, **values)


@dataclass
class RunConfig:
    """A validated run configuration. ``resolved`` is the echo written to run.json."""

    resolved: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.resolved['seed']

    @property
    def train(self) -> TrainConfig:
        return TrainConfig.from_dict(self.resolved['train']).validate()

    @property
    def schedule(self) -> ScheduleConfig:
        return self.train.schedule

    @property
    def augment(self) -> Optional[AugmentConfig]:
        return augment_config(self.resolved['augment'], self.seed)

    @property
    def synth(self) -> SynthConfig:
        return synth_config(self.resolved['synth'], self.seed)

    @property
    def failure_threshold(self) -> float:
        return self.resolved['eval']['failure_threshold']

    @property
    def gradcheck(self) -> dict:
        return self.resolved['gradcheck']

    def model(self, landmarks: Optional[int] = None, **overrides) -> VanillaConfig:
        section = self.resolved['model']
        configured = section.get('landmarks')
        if configured is not None and landmarks is not None and configured != landmarks:
            raise ConfigurationError(f'Config sets {configured} landmarks, the dataset has {landmarks}')
        landmarks = configured if configured is not None else landmarks
        if landmarks is None:
            raise ConfigurationError('The landmark count is neither configured nor implied by a dataset')
        return vanilla_config(section, landmarks, **overrides).validate()

    def multihead(self, heads: dict) -> MultiHeadConfig:
        """``heads`` maps protocol id to landmark count."""
        hidden = self.resolved['heads']['hidden_width']
        return MultiHeadConfig(
            backbone=vanilla_config(self.resolved['model'], min(heads.values())),
            heads=tuple(HeadSpec(protocol_id=pid, landmarks=count, hidden_width=hidden)
                        for pid, count in heads.items()),
        ).validate()


def parse_run_config(data: dict) -> RunConfig:
    serializer = RunConfigSerializer(data=data)
    if not serializer.is_valid():
        raise ConfigurationError(json.dumps(serializer.errors, sort_keys=True))

    return RunConfig(resolved=json.loads(json.dumps(serializer.validated_data)))


def load_run_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except ValueError as e:
        raise ConfigurationError(f'{path} is not valid JSON: {e}') from e

    config = parse_run_config(data)
    logger.debug('Loaded run config %s', path)

    return config
