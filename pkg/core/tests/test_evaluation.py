import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from core.data import NormRule, crop_resize, normalize_landmarks, synth_samples
from core.evaluation import ReportFormat, bruteforce_best_of_k, emit_report, evaluate, failure_rate, nme, predict, \
    read_report, sample_errors
from core.exceptions import ConfigurationError, UndefinedRateError, ZeroNormalizerError
from core.networks import LandmarkNetwork, build_vanilla
from core.norm import NormKind
from core.tests.factories import ProtocolSpecFactory, SynthConfigFactory, tiny_model_config
from core.utils import format_float, lossless_json, make_rng


class OracleNetwork(LandmarkNetwork):
    """Replays the ground truth of a dataset, batch after batch."""

    architecture = 'oracle'

    def __init__(self, dataset, size=32):
        super().__init__()
        self.config = tiny_model_config(input_size=size)
        self.targets = [normalize_landmarks(crop_resize(sample, size).landmarks, size).reshape(-1)
                        for sample in dataset]
        self.cursor = 0

    def landmarks_for(self, head_id=None):
        return self.config.landmarks

    def forward(self, x, head_id=None):
        out = np.stack(self.targets[self.cursor:self.cursor + len(x)])
        self.cursor += len(x)
        return out


class NmeTests(SimpleTestCase):

    def setUp(self):
        self.protocol = ProtocolSpecFactory(landmarks=1, flip_perm=(0,))

    def test_perfect_prediction(self):
        points = np.array([[3.0, 4.0]])

        self.assertEqual(nme(points, points, self.protocol, (0, 0, 10, 10)), 0.0)

    def test_single_point(self):
        self.assertEqual(nme(np.array([[3.0, 4.0]]), np.zeros((1, 2)), self.protocol, (0, 0, 10, 10)), 50.0)

    def test_box_normalizer_is_geometric_mean(self):
        self.assertAlmostEqual(nme(np.array([[3.0, 4.0]]), np.zeros((1, 2)), self.protocol, (0, 0, 4, 25)), 50.0)

    def test_translation_invariance_and_scaling(self):
        rng = np.random.default_rng(0)
        protocol = ProtocolSpecFactory()
        pred, gt = rng.uniform(0, 50, (5, 2)), rng.uniform(0, 50, (5, 2))
        base = nme(pred, gt, protocol, (0, 0, 40, 40))

        self.assertAlmostEqual(nme(pred + 7.5, gt + 7.5, protocol, (0, 0, 40, 40)), base, places=10)
        self.assertAlmostEqual(nme(pred, gt, protocol, (0, 0, 80, 80)), base / 2, places=10)

    def test_inter_ocular(self):
        protocol = ProtocolSpecFactory(landmarks=2, flip_perm=(1, 0), norm_rule=NormRule.InterOcular,
                                       eye_indices=(0, 1))
        gt = np.array([[0.0, 0.0], [20.0, 0.0]])

        self.assertEqual(nme(gt + (0.0, 2.0), gt, protocol, (0, 0, 1, 1)), 10.0)

    def test_coincident_eyes(self):
        protocol = ProtocolSpecFactory(landmarks=2, flip_perm=(1, 0), norm_rule=NormRule.InterOcular,
                                       eye_indices=(0, 1))

        with self.assertRaises(ZeroNormalizerError):
            nme(np.zeros((2, 2)), np.ones((2, 2)), protocol, (0, 0, 1, 1))


class FailureRateTests(SimpleTestCase):

    def test_rates(self):
        self.assertEqual(failure_rate([1.0, 2.0, 3.0]), 0.0)
        self.assertEqual(failure_rate([1.0, 12.0, 3.0, 4.0]), 25.0)
        self.assertEqual(failure_rate([10.0]), 0.0)

    def test_empty(self):
        with self.assertRaises(UndefinedRateError):
            failure_rate([])

    def test_threshold_must_be_positive(self):
        with self.assertRaises(ConfigurationError):
            failure_rate([1.0], 0.0)


class EvaluateTests(SimpleTestCase):

    def setUp(self):
        self.dataset = synth_samples(SynthConfigFactory(n_samples=12, image_size=40))
        self.network = build_vanilla(tiny_model_config(), make_rng(0))

    def test_oracle_scores_zero(self):
        report = evaluate(OracleNetwork(self.dataset), self.dataset)

        self.assertAlmostEqual(report.nme, 0.0, places=9)
        self.assertEqual(report.failure_rate, 0.0)
        self.assertEqual(report.sample_count, 12)

    def test_per_domain_recombines_to_overall(self):
        report = evaluate(self.network, self.dataset)

        weighted = sum(report.per_domain_nme[d] * report.per_domain_count[d] for d in report.per_domain_nme)

        self.assertEqual(sum(report.per_domain_count.values()), report.sample_count)
        self.assertAlmostEqual(weighted / report.sample_count, report.nme, delta=1e-10)

    def test_matches_direct_recomputation(self):
        report = evaluate(self.network, self.dataset)
        predictions = predict(self.network, self.dataset)

        direct = []
        for pred, sample in zip(predictions, self.dataset):
            _, _, w, h = sample.bbox
            direct.append(np.mean(np.hypot(*(pred - sample.landmarks).T)) / np.sqrt(w * h) * 100)

        np.testing.assert_allclose(report.sample_nmes, direct, rtol=1e-12)

    def test_predict_restores_training_mode(self):
        self.network.train()

        predict(self.network, self.dataset)

        self.assertTrue(all(module.training for _, module in self.network.named_modules()))

    def test_protocol_mismatch(self):
        with self.assertRaises(ConfigurationError):
            evaluate(self.network, self.dataset, protocol=ProtocolSpecFactory(id='other'))

    def test_landmark_count_mismatch(self):
        nine = synth_samples(SynthConfigFactory(n_samples=2, image_size=40, landmarks=9))

        with self.assertRaises(ConfigurationError):
            evaluate(self.network, nine)


class BestOfKTests(SimpleTestCase):

    def test_single_branch_equals_evaluate(self):
        dataset = synth_samples(SynthConfigFactory(
            n_samples=6, image_size=40, domain_weights=(1.0,), yaw_centers=(0.0,), brightness=(0.0,),
            contrast=(1.0,)))
        network = build_vanilla(tiny_model_config(NormKind.BruteForceSepBN, k=1), make_rng(0))

        best = bruteforce_best_of_k(network, dataset)

        self.assertEqual(best.sample_nmes, evaluate(network, dataset).sample_nmes)
        self.assertTrue(best.oracle_assisted)

    def test_best_is_below_every_branch(self):
        dataset = synth_samples(SynthConfigFactory(n_samples=9, image_size=40))
        network = build_vanilla(tiny_model_config(NormKind.BruteForceSepBN), make_rng(1))
        # distinct running statistics per branch
        for seed, (name, tensor) in enumerate(network.named_buffers()):
            if name.endswith('running_mean'):
                tensor.data += make_rng(seed).normal(0, 0.3, tensor.shape)
        out = network.head.layers['out'].weight
        out.data[:] = make_rng(2).normal(0, 0.1, out.shape)

        best = bruteforce_best_of_k(network, dataset)

        for branch in range(3):
            forced = sample_errors(network, dataset, dataset.protocol, forced_branch=branch)
            self.assertTrue(all(b <= f for b, f in zip(best.sample_nmes, forced)))
            self.assertAlmostEqual(best.branch_nme[str(branch)], float(np.mean(forced)), places=12)
        self.assertLessEqual(best.nme, min(best.branch_nme.values()))

    def test_needs_brute_force_layers(self):
        dataset = synth_samples(SynthConfigFactory(n_samples=2, image_size=40))

        with self.assertRaises(ConfigurationError):
            bruteforce_best_of_k(build_vanilla(tiny_model_config(), make_rng(0)), dataset)


class ReportTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        dataset = synth_samples(SynthConfigFactory(n_samples=6, image_size=40))
        self.report = evaluate(build_vanilla(tiny_model_config(), make_rng(0)), dataset, config={'seed': 3})

    def test_json_round_trip(self):
        path = emit_report(self.report, self.root / 'report.json')

        self.assertEqual(read_report(path), self.report)

    def test_csv_layout(self):
        path = emit_report(self.report, self.root / 'report.csv')

        rows = path.read_text().splitlines()

        self.assertEqual(rows[0], 'metric,value,domain')
        self.assertEqual(rows[1], f'nme,{format_float(self.report.nme)},')

    def test_explicit_format_wins_over_suffix(self):
        path = emit_report(self.report, self.root / 'report.txt', format=ReportFormat.Csv)

        self.assertTrue(path.read_text().startswith('metric,value,domain'))

    def test_unknown_format(self):
        with self.assertRaises(ConfigurationError):
            emit_report(self.report, self.root / 'report.xml')

    def test_lossless_numbers(self):
        self.assertEqual(format_float(0.1), '0.10000000000000001')
        self.assertEqual(float(format_float(1 / 3)), 1 / 3)

    def test_json_report_numbers_carry_17_digits(self):
        text = emit_report(self.report, self.root / 'report.json').read_text()

        self.assertIn(f'"nme": {format_float(self.report.nme)},', text)
        self.assertIn(f'"failure_threshold": {format_float(self.report.failure_threshold)},', text)

    def test_lossless_json_layout(self):
        payload = {'b': [0.1, 1, True, None, 'x'], 'a': {}}

        text = lossless_json(payload, sort_keys=True)

        self.assertEqual(text, '{\n  "a": {},\n  "b": [\n    0.10000000000000001,\n    1,\n    true,\n'
                               '    null,\n    "x"\n  ]\n}')
        self.assertEqual(json.loads(text), payload)
