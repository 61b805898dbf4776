from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from django.conf import settings

from core.data import AugmentConfig, CroppedSample, LandmarkDataset, LandmarkSample, ProportionalSampler, \
    ProtocolSpec, augment, crop_resize, normalize_landmarks, to_network_input
from core.evaluation import evaluate
from core.exceptions import CheckpointError, ConfigurationError, RoutingError, TrainingDivergenceError
from core.networks import LandmarkNetwork, MultiHeadNetwork, network_from_config
from core.tensor import Tensor, l1_loss, l1_loss_backward
from core.utils import Datadog, child_seeds, format_float, rng_from_state, rng_state

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'SBNCKPT1'
CHECKPOINT_VERSION = 1
CHECKPOINT_NAME = 'checkpoint.sbn'
DIVERGED_CHECKPOINT_NAME = 'diverged.sbn'
METRICS_NAME = 'metrics.csv'
METRICS_HEADER = ['epoch', 'lr', 'tau', 'loss', 'nme']


@dataclass(frozen=True)
class ScheduleConfig:
    lr_max: float = 1e-3
    lr_min: float = 5e-6
    warmup_epochs: int = 10
    total_epochs: int = 60
    tau_start: float = 30.0
    tau_end: float = 1.0
    tau_anneal_epochs: int = 6

    @classmethod
    def full(cls) -> ScheduleConfig:
        return cls(warmup_epochs=120, total_epochs=500, tau_anneal_epochs=30)

    def validate(self) -> ScheduleConfig:
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigurationError(f'Need 0 < lr_min <= lr_max, got {self.lr_min} and {self.lr_max}')
        if self.total_epochs < 1 or not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ConfigurationError('Need total_epochs >= 1 and 0 <= warmup_epochs <= total_epochs')
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ConfigurationError('Temperatures must be positive')
        if self.tau_anneal_epochs < 0:
            raise ConfigurationError('tau_anneal_epochs must be nonnegative')
        return self


@dataclass(frozen=True)
class TrainConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # backbone lr relative to the head lr while fine-tuning
    backbone_lr_factor: float = 1e-4
    eval_every: int = 10

    def validate(self) -> TrainConfig:
        self.schedule.validate()
        if self.batch_size < 2:
            raise ConfigurationError(f'Batch size must be at least 2 for batch statistics, got {self.batch_size}')
        if not 0 <= self.momentum < 1:
            raise ConfigurationError('Momentum must lie in [0, 1)')
        if self.weight_decay < 0 or self.backbone_lr_factor < 0 or self.eval_every < 0:
            raise ConfigurationError('weight_decay, backbone_lr_factor and eval_every must be nonnegative')
        return self

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        data = dict(data)
        schedule = ScheduleConfig(**data.pop('schedule', {}))
        return cls(schedule=schedule, **data)


def cosine_lr(epoch: int, cfg: ScheduleConfig) -> float:
    if epoch < cfg.warmup_epochs:
        return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * epoch / cfg.warmup_epochs

    # the last training epoch, total_epochs - 1, lands on lr_min
    span = max(1, cfg.total_epochs - cfg.warmup_epochs - 1)
    t = min(1.0, (epoch - cfg.warmup_epochs) / span)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * t))


def tau_schedule(epoch: int, cfg: ScheduleConfig) -> float:
    if cfg.tau_anneal_epochs == 0 or epoch >= cfg.tau_anneal_epochs:
        return cfg.tau_end
    return cfg.tau_start + (cfg.tau_end - cfg.tau_start) * epoch / cfg.tau_anneal_epochs


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocities: Dict[str, np.ndarray] = field(default_factory=dict)
    # per-parameter multiplier on lr, missing names use 1
    lr_scales: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def for_network(cls, network: LandmarkNetwork, lr: float, momentum: float, weight_decay: float,
                    backbone_lr_factor: Optional[float] = None) -> OptimizerState:
        opt = cls(lr=lr, momentum=momentum, weight_decay=weight_decay)

        for name, tensor in network.named_parameters():
            opt.velocities[name] = np.zeros_like(tensor.data)
            if backbone_lr_factor is not None:
                opt.lr_scales[name] = backbone_lr_factor if name.startswith('backbone.') else 1.0

        return opt

    def group_lrs(self) -> Dict[float, int]:
        """Effective learning rates and how many parameters use each."""
        groups: Dict[float, int] = {}
        for name in self.velocities:
            rate = self.lr * self.lr_scales.get(name, 1.0)
            groups[rate] = groups.get(rate, 0) + 1
        return groups


def sgd_step(params: Dict[str, Tensor], opt: OptimizerState, grads: Optional[Dict[str, np.ndarray]] = None):
    """
    Momentum SGD, in place: ``v = mu * v + g + wd * w`` then ``w -= lr * v``.
    Weight decay applies only to tensors flagged ``decay``.
    """
    for name, tensor in params.items():
        grad = tensor.grad if grads is None else grads[name]
        if grad is None:
            continue
        if grad.shape != tensor.shape:
            raise ConfigurationError(f'Gradient shape {grad.shape} does not match {name} {tensor.shape}')
        if not np.isfinite(grad).all():
            raise TrainingDivergenceError(f'Non-finite gradient in {name}')

        velocity = opt.velocities.get(name)
        if velocity is None:
            velocity = opt.velocities[name] = np.zeros_like(tensor.data)

        velocity *= opt.momentum
        velocity += grad
        if tensor.decay and opt.weight_decay:
            velocity += opt.weight_decay * tensor.data

        tensor.data -= opt.lr * opt.lr_scales.get(name, 1.0) * velocity


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    tau: float
    loss: float
    steps: int
    nme: Optional[float] = None
    head_steps: Dict[str, int] = field(default_factory=dict)

    def csv_row(self) -> List[str]:
        return [str(self.epoch), format_float(self.lr), format_float(self.tau), format_float(self.loss),
                '' if self.nme is None else format_float(self.nme)]


def _prepare(sample: LandmarkSample, protocol: ProtocolSpec, augment_cfg: Optional[AugmentConfig],
             seed: int, input_size: int) -> CroppedSample:
    if augment_cfg is not None:
        sample = augment(sample, augment_cfg, np.random.default_rng(seed), protocol)
    return crop_resize(sample, input_size)


def prepare_batch(samples: Sequence[LandmarkSample], protocol: ProtocolSpec,
                  augment_cfg: Optional[AugmentConfig], seeds: Sequence[int],
                  input_size: int) -> Tuple[np.ndarray, np.ndarray, List[Optional[int]]]:
    """Augments and crops a batch; returns (images, normalized targets, domains)."""
    if settings.SEPBN_THREADS > 1:
        with ThreadPoolExecutor(max_workers=settings.SEPBN_THREADS) as pool:
            crops = list(pool.map(
                lambda pair: _prepare(pair[0], protocol, augment_cfg, pair[1], input_size), zip(samples, seeds)))
    else:
        crops = [_prepare(sample, protocol, augment_cfg, seed, input_size) for sample, seed in zip(samples, seeds)]

    targets = np.stack([normalize_landmarks(crop.landmarks, input_size).reshape(-1) for crop in crops])
    return to_network_input(crops), targets, [crop.domain for crop in crops]


def train_step(network: LandmarkNetwork, images: np.ndarray, targets: np.ndarray, domains: Sequence[Optional[int]],
               opt: OptimizerState, head_id: Optional[str] = None) -> float:
    if network.brute_force_layers():
        network.set_routing(domains=domains)

    pred = network.forward(images, head_id)
    loss = l1_loss(pred, targets)
    if not math.isfinite(loss):
        raise TrainingDivergenceError(f'Non-finite loss {loss}')

    network.zero_grad()
    network.backward(l1_loss_backward(pred, targets))
    sgd_step(network.active_parameters(head_id), opt)

    return loss


def _start_epoch(network: LandmarkNetwork, opt: OptimizerState, epoch: int, schedule: ScheduleConfig) \
        -> Tuple[float, float]:
    opt.lr = cosine_lr(epoch, schedule)
    tau = tau_schedule(epoch, schedule)
    network.set_tau(tau)
    network.train()
    return opt.lr, tau


def train_epoch(network: LandmarkNetwork, dataset: LandmarkDataset, opt: OptimizerState, cfg: TrainConfig,
                rng: np.random.Generator, epoch: int, augment_cfg: Optional[AugmentConfig] = None,
                head_id: Optional[str] = None) -> EpochMetrics:
    """One shuffled pass; a trailing batch smaller than 2 is dropped."""
    if len(dataset) < 2:
        raise ConfigurationError(f'Training needs at least 2 samples, got {len(dataset)}')

    lr, tau = _start_epoch(network, opt, epoch, cfg.schedule)
    protocol = dataset.protocol
    order = rng.permutation(len(dataset))

    losses = []
    for start in range(0, len(order), cfg.batch_size):
        indices = order[start:start + cfg.batch_size]
        if len(indices) < 2:
            break

        seeds = child_seeds(rng, len(indices))
        images, targets, domains = prepare_batch(
            [dataset[i] for i in indices], protocol, augment_cfg, seeds, network.config.input_size)
        try:
            losses.append(train_step(network, images, targets, domains, opt, head_id))
        except TrainingDivergenceError as e:
            raise TrainingDivergenceError(f'Epoch {epoch}, step {len(losses)}: {e}') from e

    return EpochMetrics(epoch=epoch, lr=lr, tau=tau, loss=float(np.mean(losses)), steps=len(losses))


def cnt_stage1(network: MultiHeadNetwork, datasets: Dict[str, LandmarkDataset], opt: OptimizerState,
               cfg: TrainConfig, rng: np.random.Generator, epoch: int,
               augment_cfg: Optional[AugmentConfig] = None) -> EpochMetrics:
    """
    One epoch of joint training. Each batch comes from a single dataset chosen
    with probability proportional to its size and only passes through that head.
    """
    missing = sorted(set(datasets) - set(network.head_ids))
    if missing:
        raise ConfigurationError(f'Datasets without a registered head: {missing}')

    lr, tau = _start_epoch(network, opt, epoch, cfg.schedule)
    sampler = ProportionalSampler([(dataset_id, len(dataset)) for dataset_id, dataset in datasets.items()], rng)
    steps = math.ceil(sampler.total / cfg.batch_size)

    losses = []
    head_steps = {dataset_id: 0 for dataset_id in datasets}
    for step in range(steps):
        dataset_id, indices = sampler.draw_batch(cfg.batch_size)
        dataset = datasets[dataset_id]

        seeds = child_seeds(rng, len(indices))
        images, targets, domains = prepare_batch(
            [dataset[i] for i in indices], dataset.protocol, augment_cfg, seeds, network.config.input_size)
        try:
            losses.append(train_step(network, images, targets, domains, opt, head_id=dataset_id))
        except TrainingDivergenceError as e:
            raise TrainingDivergenceError(f'Epoch {epoch}, step {step}, head {dataset_id}: {e}') from e
        head_steps[dataset_id] += 1

    logger.debug('Epoch %d head steps %s', epoch, head_steps)

    return EpochMetrics(epoch=epoch, lr=lr, tau=tau, loss=float(np.mean(losses)), steps=steps,
                        head_steps=head_steps)


def cnt_stage2_finetune(network: MultiHeadNetwork, target_id: str, cfg: TrainConfig) \
        -> Tuple[MultiHeadNetwork, OptimizerState]:
    """
    Drops every head but ``target_id`` and returns the single-head network with an
    optimizer whose backbone learning rate is scaled by ``backbone_lr_factor``.
    """
    try:
        network = network.keep_only(target_id)
    except RoutingError as e:
        raise ConfigurationError(str(e)) from e

    opt = OptimizerState.for_network(
        network,
        lr=cfg.schedule.lr_max,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        backbone_lr_factor=cfg.backbone_lr_factor,
    )

    logger.info('Fine-tuning head %s, backbone lr factor %g', target_id, cfg.backbone_lr_factor)

    return network, opt


@dataclass
class TrainingState:
    network: LandmarkNetwork
    optimizer: OptimizerState
    rng: np.random.Generator
    seed: int
    # next epoch to run
    epoch: int = 0
    config: dict = field(default_factory=dict)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)


def _tensor_blocks(state: TrainingState) -> List[Tuple[str, str, np.ndarray]]:
    blocks = [('param', name, tensor.data) for name, tensor in state.network.named_parameters()]
    blocks += [('buffer', name, tensor.data) for name, tensor in state.network.named_buffers()]
    blocks += [('velocity', name, velocity) for name, velocity in state.optimizer.velocities.items()]
    return blocks


def checkpoint_bytes(state: TrainingState) -> bytes:
    blocks = _tensor_blocks(state)
    header = {
        'version': CHECKPOINT_VERSION,
        'network': state.network.config_dict(),
        'config': state.config,
        'epoch': state.epoch,
        'seed': state.seed,
        'schedule': dataclasses.asdict(state.schedule),
        'optimizer': {
            'lr': state.optimizer.lr,
            'momentum': state.optimizer.momentum,
            'weight_decay': state.optimizer.weight_decay,
            'lr_scales': state.optimizer.lr_scales,
        },
        'rng': rng_state(state.rng),
        'tensors': [{'kind': kind, 'name': name, 'shape': list(data.shape)} for kind, name, data in blocks],
    }
    encoded = json.dumps(header, sort_keys=True, separators=(',', ':')).encode()

    parts = [CHECKPOINT_MAGIC, struct.pack('<Q', len(encoded)), encoded]
    parts += [np.ascontiguousarray(data, dtype='<f8').tobytes() for _, _, data in blocks]

    return b''.join(parts)


def checkpoint_save(path: Union[str, Path], state: TrainingState) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    # replace atomically so a crash never leaves half a checkpoint behind
    tmp = path.with_suffix(path.suffix + '.tmp')
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)

    return path


def checkpoint_load(path: Union[str, Path]) -> TrainingState:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f'Cannot read checkpoint {path}: {e}') from e

    prefix = len(CHECKPOINT_MAGIC) + 8
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f'{path} is not a checkpoint (bad magic bytes)')
    if len(raw) < prefix:
        raise CheckpointError(f'{path} is truncated')

    (length,) = struct.unpack('<Q', raw[len(CHECKPOINT_MAGIC):prefix])
    if len(raw) < prefix + length:
        raise CheckpointError(f'{path} is truncated inside the header')

    try:
        header = json.loads(raw[prefix:prefix + length])
    except ValueError as e:
        raise CheckpointError(f'{path} has a corrupt header: {e}') from e

    if header.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f'{path} has version {header.get("version")}, expected {CHECKPOINT_VERSION}')

    network = network_from_config(header['network'], np.random.default_rng(0))
    params = dict(network.named_parameters())
    buffers = dict(network.named_buffers())
    optimizer = OptimizerState(lr=header['optimizer']['lr'], momentum=header['optimizer']['momentum'],
                               weight_decay=header['optimizer']['weight_decay'],
                               lr_scales=header['optimizer']['lr_scales'])

    offset = prefix + length
    for entry in header['tensors']:
        shape = tuple(entry['shape'])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise CheckpointError(f'{path} is truncated at {entry["kind"]} {entry["name"]}')
        data = np.frombuffer(raw, dtype='<f8', count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes

        kind, name = entry['kind'], entry['name']
        if kind == 'velocity':
            optimizer.velocities[name] = data
            continue

        target = (params if kind == 'param' else buffers).get(name)
        if target is None or target.shape != shape:
            raise CheckpointError(f'{path}: {kind} {name} {shape} does not fit the network')
        target.data = data

    if offset != len(raw):
        raise CheckpointError(f'{path} has {len(raw) - offset} trailing bytes')

    schedule = ScheduleConfig(**header['schedule'])
    if header['epoch']:
        # temperature of the last finished epoch
        network.set_tau(tau_schedule(header['epoch'] - 1, schedule))

    return TrainingState(
        network=network,
        optimizer=optimizer,
        rng=rng_from_state(header['rng']),
        seed=header['seed'],
        epoch=header['epoch'],
        config=header['config'],
        schedule=schedule,
    )


def _append_metrics(path: Path, metrics: EpochMetrics):
    new = not path.exists()
    with open(path, 'a', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        if new:
            writer.writerow(METRICS_HEADER)
        writer.writerow(metrics.csv_row())


def fit(state: TrainingState, datasets: Dict[str, LandmarkDataset], cfg: TrainConfig,
        augment_cfg: Optional[AugmentConfig], out_dir: Union[str, Path], cnt: bool = False,
        epochs: Optional[int] = None) -> List[EpochMetrics]:
    """
    Runs epochs from ``state.epoch`` up to the schedule's end (or ``epochs`` more),
    checkpointing and appending metrics after each one. A diverging run dumps its
    state to ``diverged.sbn`` before the error propagates.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    datadog = Datadog()

    last = cfg.schedule.total_epochs if epochs is None else min(cfg.schedule.total_epochs, state.epoch + epochs)
    history = []

    while state.epoch < last:
        epoch = state.epoch
        try:
            if cnt:
                metrics = cnt_stage1(state.network, datasets, state.optimizer, cfg, state.rng, epoch, augment_cfg)
            else:
                (dataset_id, dataset), = datasets.items()
                head_id = dataset_id if isinstance(state.network, MultiHeadNetwork) else None
                metrics = train_epoch(state.network, dataset, state.optimizer, cfg, state.rng, epoch,
                                      augment_cfg, head_id)
        except TrainingDivergenceError:
            dump = checkpoint_save(out_dir / DIVERGED_CHECKPOINT_NAME, state)
            logger.error('Training diverged at epoch %d, state written to %s', epoch, dump)
            raise

        if cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == last):
            reports = {
                dataset_id: evaluate(
                    state.network, dataset,
                    head_id=dataset_id if isinstance(state.network, MultiHeadNetwork) else None)
                for dataset_id, dataset in datasets.items()
            }
            total = sum(report.sample_count for report in reports.values())
            metrics.nme = sum(report.nme * report.sample_count for report in reports.values()) / total
            datadog.gauge('sepbn.eval.nme', metrics.nme)

        state.epoch = epoch + 1
        checkpoint_save(out_dir / CHECKPOINT_NAME, state)
        _append_metrics(out_dir / METRICS_NAME, metrics)

        datadog.gauge('sepbn.train.loss', metrics.loss)
        datadog.gauge('sepbn.train.lr', metrics.lr)
        datadog.gauge('sepbn.train.tau', metrics.tau)

        logger.info('Epoch %d/%d lr %.3e tau %.3f loss %.6f%s', epoch + 1, cfg.schedule.total_epochs,
                    metrics.lr, metrics.tau, metrics.loss,
                    '' if metrics.nme is None else f' nme {metrics.nme:.3f}')
        history.append(metrics)

    return history
