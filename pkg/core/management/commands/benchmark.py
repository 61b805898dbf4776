import csv
from pathlib import Path

from core.management.base import ExperimentCommand
from core.serializers import load_run_config
from core.tasks import Experiment, run_benchmark_seed, summarize
from core.utils import format_float, write_json


class Command(ExperimentCommand):
    help = 'Runs a desk-scale comparison over several seeds, one Celery task per seed'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, type=Path)
        parser.add_argument('--out', required=True, type=Path)
        parser.add_argument('--experiment', required=True, choices=Experiment.values)
        parser.add_argument('--seeds', type=int, default=5)

    def execute_command(self, config, out, experiment, seeds=5, **options):
        run_config = load_run_config(config)
        out.mkdir(parents=True, exist_ok=True)
        self.write_run_echo(out, {'config': config, 'out': out, 'experiment': experiment, 'seeds': seeds},
                            run_config.resolved)

        first = run_config.seed
        pending = [
            run_benchmark_seed.delay(experiment, run_config.resolved, seed, str(out))
            for seed in range(first, first + seeds)
        ]
        results = [result.get() for result in pending]

        with open(out / f'{experiment}.csv', 'w', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(['seed', 'baseline_nme', 'candidate_nme'])
            for result in results:
                writer.writerow([result['seed'], format_float(result['baseline_nme']),
                                 format_float(result['candidate_nme'])])

        summary = summarize(experiment, results)
        write_json(out / f'{experiment}.json', {**summary, 'per_seed': results})

        self.stdout.write(f'{experiment}: baseline {summary["mean_baseline_nme"]:.4f}%, '
                          f'candidate {summary["mean_candidate_nme"]:.4f}%, verdict {summary["verdict"]}')
