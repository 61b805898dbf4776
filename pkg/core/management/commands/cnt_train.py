from pathlib import Path

from core.data import load_dataset
from core.exceptions import ConfigurationError
from core.management.base import ExperimentCommand
from core.networks import build_multihead
from core.serializers import load_run_config
from core.train import OptimizerState, TrainingState, cosine_lr, fit
from core.utils import make_rng


class Command(ExperimentCommand):
    help = 'Stage one of cross-protocol training: one shared backbone, one head per dataset'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, type=Path)
        parser.add_argument('--data', required=True, type=Path, action='append',
                            help='Dataset directory, repeat once per protocol')
        parser.add_argument('--out', required=True, type=Path)

    def execute_command(self, config, data, out, **options):
        run_config = load_run_config(config)
        train_config = run_config.train

        datasets = {}
        for path in data:
            dataset = load_dataset(path)
            protocol_id = dataset.protocol.id
            if protocol_id in datasets:
                raise ConfigurationError(f'Protocol {protocol_id} is given twice')
            datasets[protocol_id] = dataset

        rng = make_rng(run_config.seed)
        network = build_multihead(
            run_config.multihead({pid: dataset.protocol.landmarks for pid, dataset in datasets.items()}), rng)

        state = TrainingState(
            network=network,
            optimizer=OptimizerState.for_network(
                network, cosine_lr(0, train_config.schedule), train_config.momentum, train_config.weight_decay),
            rng=rng,
            seed=run_config.seed,
            config=run_config.resolved,
            schedule=train_config.schedule,
        )

        self.write_run_echo(out, {'config': config, 'data': data, 'out': out}, run_config.resolved)

        history = fit(state, datasets, train_config, run_config.augment, out, cnt=True)

        steps = {pid: sum(m.head_steps.get(pid, 0) for m in history) for pid in datasets}
        self.stdout.write(f'Trained {len(history)} epochs over {", ".join(datasets)}, head steps {steps}')
