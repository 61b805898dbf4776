from pathlib import Path

from core.data import load_dataset
from core.evaluation import DEFAULT_FAILURE_THRESHOLD, bruteforce_best_of_k, emit_report, evaluate, report_format
from core.management.base import ExperimentCommand
from core.networks import MultiHeadNetwork
from core.train import checkpoint_load


class Command(ExperimentCommand):
    help = 'Scores a checkpoint on a dataset (NME, failure rate, per-domain breakdown)'

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True, type=Path)
        parser.add_argument('--data', required=True, type=Path)
        parser.add_argument('--report', required=True, type=Path, help='Report path, .json or .csv')
        parser.add_argument('--best-of-k', action='store_true',
                            help='Force every brute-force branch and keep the best error per sample')

    def execute_command(self, checkpoint, data, report, best_of_k=False, **options):
        report_format(report)

        state = checkpoint_load(checkpoint)
        dataset = load_dataset(data)
        network = state.network

        head_id = None
        if isinstance(network, MultiHeadNetwork) and len(network.head_ids) > 1:
            head_id = dataset.protocol.id

        threshold = state.config.get('eval', {}).get('failure_threshold', DEFAULT_FAILURE_THRESHOLD)
        scorer = bruteforce_best_of_k if best_of_k else evaluate
        result = scorer(network, dataset, head_id=head_id, failure_threshold=threshold, config=state.config)

        emit_report(result, report)
        self.write_run_echo(report.parent, {
            'checkpoint': checkpoint, 'data': data, 'report': report, 'best_of_k': best_of_k,
        }, state.config, seed=state.seed)

        self.stdout.write(f'NME {result.nme:.4f}%, failure rate {result.failure_rate:.2f}% '
                          f'over {result.sample_count} samples')
