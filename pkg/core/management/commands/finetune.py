from pathlib import Path

from core.data import load_dataset
from core.exceptions import ConfigurationError
from core.management.base import ExperimentCommand
from core.networks import MultiHeadNetwork
from core.serializers import load_run_config
from core.train import TrainingState, checkpoint_load, cnt_stage2_finetune, fit
from core.utils import make_rng


class Command(ExperimentCommand):
    help = 'Stage two of cross-protocol training: keep the target head and fine-tune it'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, type=Path)
        parser.add_argument('--checkpoint', required=True, type=Path, help='Stage one checkpoint')
        parser.add_argument('--data', required=True, type=Path, help='Target dataset, its protocol picks the head')
        parser.add_argument('--out', required=True, type=Path)

    def execute_command(self, config, checkpoint, data, out, **options):
        run_config = load_run_config(config)
        train_config = run_config.train
        dataset = load_dataset(data)

        stage1 = checkpoint_load(checkpoint)
        if not isinstance(stage1.network, MultiHeadNetwork):
            raise ConfigurationError(f'{checkpoint} does not hold a multi-head network')

        network, optimizer = cnt_stage2_finetune(stage1.network, dataset.protocol.id, train_config)
        state = TrainingState(
            network=network,
            optimizer=optimizer,
            rng=make_rng(run_config.seed),
            seed=run_config.seed,
            config=run_config.resolved,
            schedule=train_config.schedule,
        )

        self.write_run_echo(out, {'config': config, 'checkpoint': checkpoint, 'data': data, 'out': out},
                            run_config.resolved)

        history = fit(state, {dataset.protocol.id: dataset}, train_config, run_config.augment, out)

        last = history[-1]
        self.stdout.write(f'Fine-tuned head {dataset.protocol.id} for {len(history)} epochs, '
                          f'final loss {last.loss:.6f}' + ('' if last.nme is None else f', NME {last.nme:.4f}%'))
