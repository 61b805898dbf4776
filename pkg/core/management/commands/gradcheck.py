import csv
from pathlib import Path

import numpy as np

from core.management.base import ExperimentCommand
from core.networks import build_vanilla
from core.serializers import load_run_config
from core.tensor import grad_check
from core.utils import format_float, make_rng


class Command(ExperimentCommand):
    help = 'Checks analytic gradients of the configured network against central differences'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, type=Path)
        parser.add_argument('--out', required=True, type=Path)

    def execute_command(self, config, out, **options):
        run_config = load_run_config(config)
        check = run_config.gradcheck
        rng = make_rng(run_config.seed)

        landmarks = run_config.resolved['model'].get('landmarks', 5)
        network = build_vanilla(run_config.model(landmarks, input_size=check['input_size']), rng)
        network.set_tau(1.0)
        if network.brute_force_layers():
            k = network.brute_force_layers()[0].k
            network.set_routing(domains=np.arange(check['batch_size']) % k)

        size = check['input_size']
        images = rng.standard_normal((check['batch_size'], 3, size, size))

        report = grad_check(network, images, check['tolerance'], rng=rng)

        out.mkdir(parents=True, exist_ok=True)
        with open(out / 'gradcheck.csv', 'w', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(['layer', 'checked', 'max_relative_error'])
            for layer in report.layers:
                writer.writerow([layer.layer, layer.checked, format_float(layer.max_relative_error)])
        self.write_run_echo(out, {'config': config, 'out': out}, run_config.resolved)

        for layer in report.layers:
            self.stdout.write(f'{layer.layer:<48} {layer.checked:>6} {layer.max_relative_error:.3e}')
        self.stdout.write(f'max relative error {report.max_relative_error:.3e}, tolerance {report.tolerance:g}')

        report.raise_for_failures()
