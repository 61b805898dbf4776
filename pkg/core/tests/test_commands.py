import json
import tempfile
from io import StringIO
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from core.evaluation import read_report
from core.management.base import ExitCode
from core.norm import NormKind
from core.tests.factories import RunConfigFactory
from core.train import CHECKPOINT_NAME, METRICS_NAME, checkpoint_load


class CommandTestCase(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)

    def write_config(self, name='config.json', **overrides) -> Path:
        path = self.root / name
        path.write_text(json.dumps(RunConfigFactory(**overrides)))
        return path

    def call(self, name, *args, **options):
        call_command(name, *args, stdout=StringIO(), stderr=StringIO(), **options)

    def assertFailsWith(self, code, error, name, *args, **options):
        with self.assertRaises(CommandError) as cm:
            self.call(name, *args, **options)

        self.assertEqual(cm.exception.returncode, code)
        self.assertEqual(json.loads(str(cm.exception))['error'], error)

    def data_args(self, *paths):
        return [arg for path in paths for arg in ('--data', str(path))]

    def generate(self, name='data', **synth) -> Path:
        config = self.write_config(f'{name}.json', synth={'n_samples': 8, 'image_size': 40, **synth})
        self.call('gen_data', config=config, out=self.root / name)
        return self.root / name


class GenDataCommandTests(CommandTestCase):

    def test_writes_dataset_and_run_echo(self):
        out = self.generate()

        echo = json.loads((out / 'run.json').read_text())

        self.assertTrue((out / 'manifest.csv').exists())
        self.assertEqual(len(list((out / 'images').iterdir())), 8)
        self.assertEqual(echo['command'], 'gen_data')
        self.assertEqual(echo['seed'], 7)
        self.assertEqual(echo['config']['train']['momentum'], 0.9)
        self.assertEqual(echo['arguments']['out'], str(out))

    def test_unknown_key(self):
        config = self.write_config(train={'epochs': 3})

        self.assertFailsWith(ExitCode.Configuration, 'ConfigurationError', 'gen_data', config=config,
                             out=self.root / 'data')

    def test_invalid_json(self):
        config = self.root / 'broken.json'
        config.write_text('{"seed": ')

        self.assertFailsWith(ExitCode.Configuration, 'ConfigurationError', 'gen_data', config=config,
                             out=self.root / 'data')


class TrainCommandTests(CommandTestCase):

    def test_train_then_eval(self):
        data = self.generate()
        config = self.write_config()

        self.call('train', config=config, data=data, out=self.root / 'run')
        self.call('eval', checkpoint=self.root / 'run' / CHECKPOINT_NAME, data=data,
                  report=self.root / 'eval' / 'report.json')

        report = read_report(self.root / 'eval' / 'report.json')
        metrics = (self.root / 'run' / METRICS_NAME).read_text().splitlines()
        self.assertEqual(len(metrics), 3)
        self.assertEqual(report.sample_count, 8)
        self.assertFalse(report.oracle_assisted)
        self.assertEqual(json.loads((self.root / 'eval' / 'run.json').read_text())['command'], 'eval')

    def test_resume_finished_run_is_a_no_op(self):
        data = self.generate()
        config = self.write_config()
        self.call('train', config=config, data=data, out=self.root / 'run')
        checkpoint = self.root / 'run' / CHECKPOINT_NAME
        before = checkpoint.read_bytes()

        self.call('train', config=config, data=data, out=self.root / 'run', resume=checkpoint)

        self.assertEqual(checkpoint.read_bytes(), before)

    def test_missing_data(self):
        self.assertFailsWith(ExitCode.MissingInput, 'DatasetLoadError', 'train', config=self.write_config(),
                             data=self.root / 'absent', out=self.root / 'run')

    def test_landmark_count_disagrees_with_data(self):
        data = self.generate()
        config = self.write_config(model={'landmarks': 9, 'input_size': 32, 'base_channels': [4, 8, 8, 8]})

        self.assertFailsWith(ExitCode.Configuration, 'ConfigurationError', 'train', config=config, data=data,
                             out=self.root / 'run')

    def test_best_of_k_needs_brute_force_layers(self):
        data = self.generate()
        self.call('train', config=self.write_config(), data=data, out=self.root / 'run')

        self.assertFailsWith(ExitCode.Configuration, 'ConfigurationError', 'eval',
                             checkpoint=self.root / 'run' / CHECKPOINT_NAME, data=data,
                             report=self.root / 'report.json', best_of_k=True)

    def test_best_of_k_report(self):
        data = self.generate()
        config = self.write_config(model={
            'norm': NormKind.BruteForceSepBN, 'input_size': 32, 'base_channels': [4, 8, 8, 8], 'hidden_width': 16,
        })
        self.call('train', config=config, data=data, out=self.root / 'run')

        self.call('eval', checkpoint=self.root / 'run' / CHECKPOINT_NAME, data=data,
                  report=self.root / 'report.csv', best_of_k=True)

        rows = (self.root / 'report.csv').read_text().splitlines()
        self.assertEqual(rows[0], 'metric,value,domain')
        self.assertIn('oracle_assisted,1,', rows)
        self.assertTrue(any(row.startswith('branch2_nme,') for row in rows))


class CrossProtocolCommandTests(CommandTestCase):

    def setUp(self):
        super().setUp()
        self.small = self.generate('small', protocol_id='small')
        self.large = self.generate('large', protocol_id='large', landmarks=9, n_samples=16)
        self.config = self.write_config()

    def test_cnt_then_finetune_then_eval(self):
        self.call('cnt_train', *self.data_args(self.small, self.large), config=self.config,
                  out=self.root / 'stage1')
        stage1 = checkpoint_load(self.root / 'stage1' / CHECKPOINT_NAME)
        self.assertEqual(stage1.network.head_ids, ['small', 'large'])

        self.call('finetune', config=self.config, checkpoint=self.root / 'stage1' / CHECKPOINT_NAME,
                  data=self.small, out=self.root / 'stage2')
        stage2 = checkpoint_load(self.root / 'stage2' / CHECKPOINT_NAME)
        self.assertEqual(stage2.network.head_ids, ['small'])
        self.assertEqual(set(stage2.optimizer.lr_scales.values()), {1e-4, 1.0})

        self.call('eval', checkpoint=self.root / 'stage2' / CHECKPOINT_NAME, data=self.small,
                  report=self.root / 'eval' / 'small.json')
        self.assertEqual(read_report(self.root / 'eval' / 'small.json').sample_count, 8)

    def test_same_protocol_twice(self):
        self.assertFailsWith(ExitCode.Configuration, 'ConfigurationError', 'cnt_train',
                             *self.data_args(self.small, self.small),
                             config=self.config, out=self.root / 'stage1')

    def test_single_dataset(self):
        self.assertFailsWith(ExitCode.Configuration, 'ConfigurationError', 'cnt_train',
                             *self.data_args(self.small),
                             config=self.config, out=self.root / 'stage1')

    def test_finetune_needs_multihead_checkpoint(self):
        self.call('train', config=self.config, data=self.small, out=self.root / 'run')

        self.assertFailsWith(ExitCode.Configuration, 'ConfigurationError', 'finetune', config=self.config,
                             checkpoint=self.root / 'run' / CHECKPOINT_NAME, data=self.small,
                             out=self.root / 'stage2')

    def test_finetune_missing_checkpoint(self):
        self.assertFailsWith(ExitCode.MissingInput, 'CheckpointError', 'finetune', config=self.config,
                             checkpoint=self.root / 'absent.sbn', data=self.small, out=self.root / 'stage2')


class GradcheckCommandTests(CommandTestCase):

    def test_every_norm_kind_passes(self):
        for norm in NormKind.values:
            with self.subTest(norm=norm):
                config = self.write_config(model={
                    'norm': norm, 'input_size': 32, 'base_channels': [4, 8, 8, 8], 'hidden_width': 16,
                })
                out = self.root / norm

                self.call('gradcheck', config=config, out=out)

                rows = (out / 'gradcheck.csv').read_text().splitlines()
                self.assertEqual(rows[0], 'layer,checked,max_relative_error')
                self.assertEqual(rows[-1].split(',')[0], 'input')

    def test_out_is_required(self):
        with self.assertRaises(CommandError):
            self.call('gradcheck', config=self.write_config())


class AnalyzeParamsCommandTests(CommandTestCase):

    def test_similarity_report(self):
        data = self.generate()
        config = self.write_config(model={
            'norm': NormKind.SepBN, 'input_size': 32, 'base_channels': [4, 8, 8, 8], 'hidden_width': 16,
        })
        self.call('train', config=config, data=data, out=self.root / 'run')

        self.call('analyze_params', checkpoint=self.root / 'run' / CHECKPOINT_NAME,
                  report=self.root / 'analysis' / 'similarity.json')

        report = json.loads((self.root / 'analysis' / 'similarity.json').read_text())
        self.assertEqual([row['module'] for row in report['rows']],
                         [f'backbone.stage{i}.norm' for i in range(1, 5)])
        self.assertIsNone(report['mean_tracking'])
        self.assertTrue(all(-1.0 <= row['scale'] <= 1.0 for row in report['rows']))

    def test_brute_force_tracking_is_more_similar_than_mapping(self):
        data = self.generate(n_samples=24)
        config = self.write_config(
            model={'norm': NormKind.BruteForceSepBN, 'input_size': 64, 'base_channels': [4, 4, 8, 8, 8, 8],
                   'hidden_width': 16},
            train={'batch_size': 4, 'eval_every': 0,
                   'schedule': {'total_epochs': 3, 'warmup_epochs': 1, 'tau_anneal_epochs': 1}},
        )
        self.call('train', config=config, data=data, out=self.root / 'run')

        self.call('analyze_params', checkpoint=self.root / 'run' / CHECKPOINT_NAME,
                  report=self.root / 'analysis' / 'similarity.json')

        report = json.loads((self.root / 'analysis' / 'similarity.json').read_text())
        self.assertEqual([row['module'] for row in report['rows']],
                         [f'backbone.stage{i}.norm' for i in range(1, 7)])
        for row in report['rows']:
            self.assertEqual(set(row), {'module', 'running_mean', 'running_var', 'scale', 'shift'})
            self.assertTrue(all(row[kind] is not None for kind in ('running_mean', 'running_var', 'scale')))
        self.assertGreater(report['mean_tracking'], report['mean_mapping'])


class BenchmarkCommandTests(CommandTestCase):

    def test_learnability_over_two_seeds(self):
        config = self.write_config(synth={'n_samples': 8, 'image_size': 40})

        self.call('benchmark', config=config, out=self.root / 'bench', experiment='learnability', seeds=2)

        summary = json.loads((self.root / 'bench' / 'learnability.json').read_text())
        self.assertEqual(summary['seeds'], [7, 8])
        self.assertIn(summary['verdict'], ('pass', 'fail'))
        self.assertEqual(len((self.root / 'bench' / 'learnability.csv').read_text().splitlines()), 3)
