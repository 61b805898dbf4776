import factory
import numpy as np

from core.data import FIVE_POINT, LandmarkDataset, LandmarkSample, NormRule, ProtocolSpec, SynthConfig
from core.networks import VanillaConfig
from core.norm import NormKind


def tiny_model_config(norm: str = NormKind.BN, landmarks: int = 5, **overrides) -> VanillaConfig:
    values = dict(input_size=32, base_channels=(4, 8, 8, 8), hidden_width=16)
    values.update(overrides)
    return VanillaConfig.desk(landmarks, norm, **values)


class ProtocolSpecFactory(factory.Factory):
    class Meta:
        model = ProtocolSpec

    id = factory.Sequence(lambda n: f'protocol{n}')
    landmarks = 5
    flip_perm = FIVE_POINT.flip_perm
    norm_rule = NormRule.BboxSize
    eye_indices = None


class LandmarkSampleFactory(factory.Factory):
    class Meta:
        model = LandmarkSample

    class Params:
        size = 64

    image = factory.LazyAttribute(
        lambda o: np.random.default_rng(o.size).integers(0, 256, size=(o.size, o.size, 3), dtype=np.uint8))
    landmarks = factory.LazyAttribute(lambda o: np.array(FIVE_POINT.points) * o.size)
    bbox = factory.LazyAttribute(lambda o: (0.0, 0.0, float(o.size), float(o.size)))
    protocol_id = 'synth'
    domain = factory.Iterator([0, 1, 2])


class LandmarkDatasetFactory(factory.Factory):
    class Meta:
        model = LandmarkDataset

    class Params:
        protocol = factory.LazyFunction(lambda: ProtocolSpecFactory(id='synth'))
        count = 4

    samples = factory.LazyAttribute(
        lambda o: LandmarkSampleFactory.build_batch(o.count, protocol_id=o.protocol.id))
    protocols = factory.LazyAttribute(lambda o: {o.protocol.id: o.protocol})


class SynthConfigFactory(factory.Factory):
    class Meta:
        model = SynthConfig

    n_samples = 24
    image_size = 32
    protocol_id = factory.Faker('lexify', text='proto????')
    seed = factory.Sequence(lambda n: n)


class RunConfigFactory(factory.DictFactory):
    """A desk-sized run configuration small enough for unit tests."""

    seed = 7
    model = factory.Dict({
        'variant': 'desk',
        'norm': NormKind.BN,
        'input_size': 32,
        'base_channels': [4, 8, 8, 8],
        'hidden_width': 16,
    })
    train = factory.Dict({
        'batch_size': 4,
        'eval_every': 1,
        'schedule': factory.Dict({
            'total_epochs': 2,
            'warmup_epochs': 1,
            'tau_anneal_epochs': 1,
        }),
    })
    synth = factory.Dict({
        'n_samples': 12,
        'image_size': 40,
    })
    augment = factory.Dict({'enabled': True})
