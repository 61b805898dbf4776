from pathlib import Path

from core.data import synth_generate
from core.management.base import ExperimentCommand
from core.serializers import load_run_config


class Command(ExperimentCommand):
    help = 'Generates a synthetic multi-domain landmark dataset'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, type=Path)
        parser.add_argument('--out', required=True, type=Path)

    def execute_command(self, config, out, **options):
        run_config = load_run_config(config)
        dataset = synth_generate(run_config.synth, out)
        self.write_run_echo(out, {'config': config, 'out': out}, run_config.resolved)

        self.stdout.write(f'Generated {len(dataset)} samples in {out}')
