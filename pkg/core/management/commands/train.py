import logging
from pathlib import Path

from core.data import load_dataset
from core.management.base import ExperimentCommand
from core.networks import build_vanilla
from core.serializers import RunConfig, load_run_config
from core.train import OptimizerState, TrainingState, checkpoint_load, cosine_lr, fit
from core.utils import make_rng

logger = logging.getLogger(__name__)


class Command(ExperimentCommand):
    help = 'Trains a single-dataset landmark regressor'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, type=Path)
        parser.add_argument('--data', required=True, type=Path)
        parser.add_argument('--out', required=True, type=Path)
        parser.add_argument('--resume', type=Path, default=None, help='Checkpoint to continue from')

    def execute_command(self, config, data, out, resume=None, **options):
        run_config = load_run_config(config)
        dataset = load_dataset(data)
        protocol = dataset.protocol
        train_config = run_config.train

        if resume is not None:
            state = checkpoint_load(resume)
            if state.config != run_config.resolved:
                logger.warning('Resuming with the configuration stored in %s, not %s', resume, config)
                run_config = RunConfig(resolved=state.config)
                train_config = run_config.train
            logger.info('Resuming %s at epoch %d', resume, state.epoch)
        else:
            rng = make_rng(run_config.seed)
            network = build_vanilla(run_config.model(protocol.landmarks), rng)
            state = TrainingState(
                network=network,
                optimizer=OptimizerState.for_network(
                    network, cosine_lr(0, train_config.schedule), train_config.momentum, train_config.weight_decay),
                rng=rng,
                seed=run_config.seed,
                config=run_config.resolved,
                schedule=train_config.schedule,
            )

        self.write_run_echo(out, {'config': config, 'data': data, 'out': out, 'resume': resume}, state.config)

        history = fit(state, {protocol.id: dataset}, train_config, run_config.augment, out)

        if history:
            last = history[-1]
            self.stdout.write(f'Trained {len(history)} epochs, final loss {last.loss:.6f}'
                              + ('' if last.nme is None else f', NME {last.nme:.4f}%'))
        else:
            self.stdout.write('Nothing to train, the checkpoint already finished its schedule')
