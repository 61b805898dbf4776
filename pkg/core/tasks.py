import dataclasses
import logging
from pathlib import Path
from typing import Dict, List, Optional

from celery import shared_task
from django.conf import settings
from django.db import models

from core.data import LandmarkDataset, SynthConfig, synth_samples
from core.evaluation import evaluate
from core.exceptions import ConfigurationError
from core.networks import LandmarkNetwork, build_multihead, build_vanilla
from core.norm import NormKind
from core.serializers import RunConfig
from core.train import OptimizerState, TrainingState, cnt_stage2_finetune, cosine_lr, fit
from core.utils import Datadog, make_rng

logger = logging.getLogger(__name__)

TEST_SEED_OFFSET = 1_000_003
IMBALANCED_WEIGHTS = (0.6, 0.2, 0.2)
LARGE_PROTOCOL_FACTOR = 10


class Experiment(models.TextChoices):
    Learnability = "learnability"
    SepBNVsBN = "sepbn_vs_bn"
    Cnt = "cnt"


def _test_split(cfg: SynthConfig) -> SynthConfig:
    return dataclasses.replace(cfg, seed=cfg.seed + TEST_SEED_OFFSET, n_samples=max(8, cfg.n_samples // 4))


def _train(network: LandmarkNetwork, datasets: Dict[str, LandmarkDataset], run_config: RunConfig, seed: int,
           out_dir: Path, cnt: bool = False, optimizer: OptimizerState = None) -> LandmarkNetwork:
    train_config = run_config.train
    optimizer = optimizer or OptimizerState.for_network(
        network, cosine_lr(0, train_config.schedule), train_config.momentum, train_config.weight_decay)
    state = TrainingState(
        network=network,
        optimizer=optimizer,
        rng=make_rng(seed),
        seed=seed,
        config=run_config.resolved,
        schedule=train_config.schedule,
    )
    fit(state, datasets, train_config, run_config.augment, out_dir, cnt=cnt)
    return state.network


def _learnability(run_config: RunConfig, seed: int, out_dir: Path) -> dict:
    synth = dataclasses.replace(run_config.synth, seed=seed)
    train_set, test_set = synth_samples(synth), synth_samples(_test_split(synth))

    network = build_vanilla(run_config.model(synth.landmarks), make_rng(seed))
    untrained = evaluate(network, test_set).nme
    _train(network, {synth.protocol_id: train_set}, run_config, seed, out_dir / 'vanilla')
    trained = evaluate(network, test_set).nme

    return {'seed': seed, 'baseline_nme': untrained, 'candidate_nme': trained}


def _sepbn_vs_bn(run_config: RunConfig, seed: int, out_dir: Path) -> dict:
    synth = run_config.synth
    if synth.domain_count != len(IMBALANCED_WEIGHTS):
        raise ConfigurationError(f'The imbalanced comparison needs {len(IMBALANCED_WEIGHTS)} domains')
    synth = dataclasses.replace(synth, seed=seed, domain_weights=IMBALANCED_WEIGHTS)
    train_set, test_set = synth_samples(synth), synth_samples(_test_split(synth))

    result = {'seed': seed}
    for key, kind in (('baseline_nme', NormKind.BN), ('candidate_nme', NormKind.SepBN)):
        stages = len(run_config.model(synth.landmarks).base_channels)
        network = build_vanilla(run_config.model(synth.landmarks, norm_mask=(kind,) * stages), make_rng(seed))
        _train(network, {synth.protocol_id: train_set}, run_config, seed, out_dir / str(kind))
        result[key] = evaluate(network, test_set).nme

    return result


def _cnt(run_config: RunConfig, seed: int, out_dir: Path) -> dict:
    small = dataclasses.replace(run_config.synth, seed=seed, landmarks=5, protocol_id='small')
    large = dataclasses.replace(small, seed=seed + 1, landmarks=9, protocol_id='large',
                                n_samples=small.n_samples * LARGE_PROTOCOL_FACTOR)
    datasets = {'small': synth_samples(small), 'large': synth_samples(large)}
    test_set = synth_samples(_test_split(small))

    standalone = build_vanilla(run_config.model(5), make_rng(seed))
    _train(standalone, {'small': datasets['small']}, run_config, seed, out_dir / 'standalone')

    multihead = build_multihead(run_config.multihead({'small': 5, 'large': 9}), make_rng(seed))
    multihead = _train(multihead, datasets, run_config, seed, out_dir / 'stage1', cnt=True)
    target, optimizer = cnt_stage2_finetune(multihead, 'small', run_config.train)
    _train(target, {'small': datasets['small']}, run_config, seed, out_dir / 'stage2', optimizer=optimizer)

    return {
        'seed': seed,
        'baseline_nme': evaluate(standalone, test_set).nme,
        'candidate_nme': evaluate(target, test_set).nme,
    }


EXPERIMENTS = {
    Experiment.Learnability: _learnability,
    Experiment.SepBNVsBN: _sepbn_vs_bn,
    Experiment.Cnt: _cnt,
}


@shared_task
def run_benchmark_seed(experiment: str, resolved_config: dict, seed: int, out_dir: str) -> dict:
    run_config = RunConfig(resolved=resolved_config)
    out = Path(out_dir) / f'seed_{seed}'

    logger.info('Running %s for seed %d', experiment, seed)
    result = EXPERIMENTS[Experiment(experiment)](run_config, seed, out)

    Datadog().gauge(f'sepbn.benchmark.{experiment}.candidate_nme', result['candidate_nme'], tags=[f'seed:{seed}'])

    return result


def summarize(experiment: str, results: List[dict], tie_tolerance: float = 0.01,
              nme_threshold: Optional[float] = None) -> dict:
    """
    Mean errors over seeds and a verdict. Learnability passes when training at
    least halves the error and reaches ``nme_threshold`` (default
    ``settings.SEPBN_LEARNABILITY_NME_THRESHOLD``); comparisons within
    ``tie_tolerance`` relative are inconclusive.
    """
    baseline = sum(r['baseline_nme'] for r in results) / len(results)
    candidate = sum(r['candidate_nme'] for r in results) / len(results)

    summary = {}
    if experiment == Experiment.Learnability:
        if nme_threshold is None:
            nme_threshold = settings.SEPBN_LEARNABILITY_NME_THRESHOLD
        passed = candidate <= 0.5 * baseline and candidate <= nme_threshold
        verdict = 'pass' if passed else 'fail'
        inconclusive = False
        summary['nme_threshold'] = nme_threshold
    else:
        inconclusive = abs(candidate - baseline) <= tie_tolerance * max(abs(baseline), abs(candidate))
        verdict = 'inconclusive' if inconclusive else ('pass' if candidate < baseline else 'fail')

    return {
        'experiment': str(experiment),
        'seeds': [r['seed'] for r in results],
        'mean_baseline_nme': baseline,
        'mean_candidate_nme': candidate,
        'inconclusive': inconclusive,
        'verdict': verdict,
        **summary,
    }
