import csv
from pathlib import Path

from core.evaluation import ReportFormat, report_format
from core.management.base import ExperimentCommand
from core.norm import ParameterKind, similarity_report
from core.train import checkpoint_load
from core.utils import format_float, write_json


class Command(ExperimentCommand):
    help = 'Mean pairwise cosine similarity of per-branch normalization parameters, per layer'

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True, type=Path)
        parser.add_argument('--report', required=True, type=Path, help='Report path, .csv or .json')

    def execute_command(self, checkpoint, report, **options):
        format = report_format(report)
        state = checkpoint_load(checkpoint)
        similarity = similarity_report(state.network)

        if not similarity.rows:
            self.stderr.write(f'{checkpoint} has no multi-branch normalization layers')

        kinds = [str(kind) for kind in ParameterKind]
        report.parent.mkdir(parents=True, exist_ok=True)

        if format == ReportFormat.Json:
            write_json(report, {
                'rows': [{'module': row.module, **{k: row.values.get(k) for k in kinds}} for row in similarity.rows],
                'mean_tracking': similarity.mean_tracking,
                'mean_mapping': similarity.mean_mapping,
            })
        else:
            with open(report, 'w', newline='') as f:
                writer = csv.writer(f, lineterminator='\n')
                writer.writerow(['module', *kinds])
                for row in similarity.rows:
                    writer.writerow([row.module] + [
                        '' if row.values.get(k) is None else format_float(row.values[k]) for k in kinds
                    ])

        self.write_run_echo(report.parent, {'checkpoint': checkpoint, 'report': report}, state.config,
                            seed=state.seed)

        for row in similarity.rows:
            cells = ' '.join('      -' if row.values.get(k) is None else f'{row.values[k]:7.4f}' for k in kinds)
            self.stdout.write(f'{row.module:<32} {cells}')
