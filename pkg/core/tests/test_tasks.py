import tempfile

from django.test import SimpleTestCase, override_settings

from core.exceptions import ConfigurationError
from core.serializers import parse_run_config
from core.tasks import Experiment, run_benchmark_seed, summarize
from core.tests.factories import RunConfigFactory


def result(seed, baseline, candidate):
    return {'seed': seed, 'baseline_nme': baseline, 'candidate_nme': candidate}


class SummarizeTests(SimpleTestCase):

    def test_learnability_needs_half_the_error(self):
        self.assertEqual(summarize(Experiment.Learnability, [result(0, 40.0, 19.0)],
                                   nme_threshold=20.0)['verdict'], 'pass')
        self.assertEqual(summarize(Experiment.Learnability, [result(0, 40.0, 21.0)],
                                   nme_threshold=30.0)['verdict'], 'fail')

    def test_learnability_needs_the_registered_threshold(self):
        summary = summarize(Experiment.Learnability, [result(0, 40.0, 12.0)], nme_threshold=10.0)

        self.assertEqual(summary['verdict'], 'fail')
        self.assertEqual(summary['nme_threshold'], 10.0)

    @override_settings(SEPBN_LEARNABILITY_NME_THRESHOLD=15.0)
    def test_threshold_defaults_to_setting(self):
        summary = summarize(Experiment.Learnability, [result(0, 40.0, 12.0)])

        self.assertEqual(summary['verdict'], 'pass')
        self.assertEqual(summary['nme_threshold'], 15.0)

    def test_comparison_verdicts(self):
        self.assertEqual(summarize(Experiment.SepBNVsBN, [result(0, 10.0, 9.0)])['verdict'], 'pass')
        self.assertEqual(summarize(Experiment.SepBNVsBN, [result(0, 10.0, 11.0)])['verdict'], 'fail')

    def test_close_means_are_inconclusive(self):
        summary = summarize(Experiment.Cnt, [result(0, 10.0, 9.8), result(1, 10.0, 10.15)])

        self.assertTrue(summary['inconclusive'])
        self.assertEqual(summary['verdict'], 'inconclusive')
        self.assertAlmostEqual(summary['mean_candidate_nme'], 9.975)
        self.assertEqual(summary['seeds'], [0, 1])


class RunBenchmarkSeedTests(SimpleTestCase):

    def test_imbalanced_comparison_needs_three_domains(self):
        config = parse_run_config(RunConfigFactory(synth={
            'n_samples': 8, 'image_size': 40, 'domain_weights': [0.5, 0.5], 'yaw_centers': [0, 30],
            'brightness': [0, 10], 'contrast': [1, 1],
        }))

        with tempfile.TemporaryDirectory() as tmp, self.assertRaises(ConfigurationError):
            run_benchmark_seed(Experiment.SepBNVsBN, config.resolved, 0, tmp)

    def test_sepbn_against_bn(self):
        config = parse_run_config(RunConfigFactory(synth={'n_samples': 8, 'image_size': 40}))

        with tempfile.TemporaryDirectory() as tmp:
            outcome = run_benchmark_seed.delay(str(Experiment.SepBNVsBN), config.resolved, 3, tmp).get()

        self.assertEqual(outcome['seed'], 3)
        self.assertGreaterEqual(outcome['baseline_nme'], 0.0)
        self.assertGreaterEqual(outcome['candidate_nme'], 0.0)
