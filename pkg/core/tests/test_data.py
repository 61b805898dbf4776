import dataclasses
import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from core.data import FIVE_POINT, MANIFEST_NAME, NINE_POINT, AugmentConfig, AugmentParams, ProportionalSampler, \
    apply_affine, apply_augmentation, augment, crop_affine, crop_resize, draw_augmentation, load_dataset, \
    normalize_landmarks, denormalize_landmarks, read_ppm, save_dataset, synth_samples, write_ppm
from core.exceptions import ConfigurationError, DatasetLoadError, EmptyDatasetError, GeometryError
from core.tests.factories import LandmarkDatasetFactory, LandmarkSampleFactory, ProtocolSpecFactory, \
    SynthConfigFactory


class ProtocolTests(SimpleTestCase):

    def test_templates_flip_twice_to_identity(self):
        for template in (FIVE_POINT, NINE_POINT):
            perm = template.flip_perm
            self.assertEqual([perm[perm[i]] for i in range(len(perm))], list(range(len(perm))))

    def test_flip_perm_must_be_an_involution(self):
        with self.assertRaises(ConfigurationError):
            ProtocolSpecFactory(flip_perm=(1, 2, 0, 3, 4)).validate()

    def test_inter_ocular_needs_eyes(self):
        with self.assertRaises(ConfigurationError):
            ProtocolSpecFactory(norm_rule='inter_ocular').validate()


class PpmTests(SimpleTestCase):

    def test_round_trip(self):
        image = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)

        with tempfile.TemporaryDirectory() as tmp:
            write_ppm(Path(tmp) / 'a.ppm', image)
            np.testing.assert_array_equal(read_ppm(Path(tmp) / 'a.ppm'), image)

    def test_wrong_magic(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'a.ppm'
            path.write_bytes(b'P3\n1 1\n255\n0 0 0\n')

            with self.assertRaises(DatasetLoadError):
                read_ppm(path)

    def test_short_body(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'a.ppm'
            path.write_bytes(b'P6\n2 2\n255\n' + bytes(5))

            with self.assertRaises(DatasetLoadError):
                read_ppm(path)


class DatasetIOTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        self.dataset = synth_samples(SynthConfigFactory(n_samples=6, protocol_id='synth'))

    def test_write_then_read_is_bit_exact(self):
        save_dataset(self.dataset, self.root)

        loaded = load_dataset(self.root)

        self.assertEqual(len(loaded), len(self.dataset))
        self.assertEqual(loaded.protocols, self.dataset.protocols)
        for original, restored in zip(self.dataset, loaded):
            np.testing.assert_array_equal(restored.image, original.image)
            np.testing.assert_array_equal(restored.landmarks, original.landmarks)
            self.assertEqual(restored.bbox, original.bbox)
            self.assertEqual(restored.domain, original.domain)

    def test_manifest_header(self):
        save_dataset(self.dataset, self.root)

        header = (self.root / MANIFEST_NAME).read_text().splitlines()[0]

        self.assertEqual(header, 'file,protocol,domain,bx,by,bw,bh,x1,y1,x2,y2,x3,y3,x4,y4,x5,y5')

    def test_missing_manifest(self):
        with self.assertRaises(DatasetLoadError):
            load_dataset(self.root / 'absent')

    def test_missing_image(self):
        save_dataset(self.dataset, self.root)
        (self.root / 'images' / '000003.ppm').unlink()

        with self.assertRaises(DatasetLoadError):
            load_dataset(self.root)

    def test_malformed_header(self):
        save_dataset(self.dataset, self.root)
        manifest = self.root / MANIFEST_NAME
        lines = manifest.read_text().splitlines()
        manifest.write_text('\n'.join(['file,protocol,domain,x1,y1'] + lines[1:]) + '\n')

        with self.assertRaises(DatasetLoadError):
            load_dataset(self.root)

    def test_unknown_protocol(self):
        save_dataset(self.dataset, self.root)
        manifest = self.root / MANIFEST_NAME
        manifest.write_text(manifest.read_text().replace(',synth,', ',other,'))

        with self.assertRaises(DatasetLoadError):
            load_dataset(self.root)

    def test_empty_manifest(self):
        save_dataset(dataclasses.replace(self.dataset, samples=[]), self.root)

        with self.assertRaises(EmptyDatasetError):
            load_dataset(self.root)


class SynthTests(SimpleTestCase):

    def test_same_seed_same_samples(self):
        cfg = SynthConfigFactory()

        first, second = synth_samples(cfg), synth_samples(cfg)

        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.image, b.image)
            np.testing.assert_array_equal(a.landmarks, b.landmarks)

    def test_domain_frequencies_follow_weights(self):
        cfg = SynthConfigFactory(n_samples=400, image_size=16, domain_weights=(0.6, 0.2, 0.2))

        counts = np.bincount(synth_samples(cfg).domains, minlength=3) / 400

        np.testing.assert_allclose(counts, (0.6, 0.2, 0.2), atol=0.08)

    def test_nine_point_protocol(self):
        dataset = synth_samples(SynthConfigFactory(n_samples=2, landmarks=9))

        self.assertEqual(dataset.protocol.landmarks, 9)
        self.assertEqual(dataset.protocol.eye_indices, (0, 3))

    def test_domain_tuples_must_match(self):
        with self.assertRaises(ConfigurationError):
            SynthConfigFactory(domain_weights=(0.5, 0.5)).validate()


class CropTests(SimpleTestCase):

    def test_full_image_bbox_is_identity(self):
        sample = LandmarkSampleFactory(size=16)

        crop = crop_resize(sample, 16)

        np.testing.assert_array_equal(crop.affine, np.eye(3))
        np.testing.assert_array_equal(crop.image, sample.image.astype(np.float64))
        np.testing.assert_array_equal(crop.landmarks, sample.landmarks)

    def test_bbox_corners_map_to_crop_corners(self):
        matrix = crop_affine((10.0, 20.0, 40.0, 50.0), 64)

        out = apply_affine(matrix, np.array([[10.0, 20.0], [50.0, 70.0]]))

        np.testing.assert_allclose(out, [[0.0, 0.0], [64.0, 64.0]], atol=1e-12)

    def test_round_trip_through_inverse(self):
        matrix = crop_affine((3.5, -2.0, 17.0, 23.0), 32)
        points = np.random.default_rng(0).uniform(0, 40, size=(9, 2))

        np.testing.assert_allclose(apply_affine(np.linalg.inv(matrix), apply_affine(matrix, points)), points,
                                   atol=1e-9)

    def test_degenerate_bbox(self):
        with self.assertRaises(GeometryError):
            crop_resize(LandmarkSampleFactory(size=16, bbox=(0.0, 0.0, 0.0, 5.0)), 16)

    def test_bbox_outside_image(self):
        with self.assertRaises(GeometryError):
            crop_resize(LandmarkSampleFactory(size=16, bbox=(20.0, 20.0, 5.0, 5.0)), 16)

    def test_normalized_coordinates(self):
        points = np.array([[0.0, 32.0], [64.0, 16.0]])

        normalized = normalize_landmarks(points, 64)

        np.testing.assert_array_equal(normalized, [[-0.5, 0.0], [0.5, -0.25]])
        np.testing.assert_array_equal(denormalize_landmarks(normalized, 64), points)


class AugmentTests(SimpleTestCase):

    def setUp(self):
        self.protocol = ProtocolSpecFactory(id='synth')
        self.sample = LandmarkSampleFactory(size=32)

    def test_zero_magnitudes_are_identity(self):
        out = augment(self.sample, AugmentConfig.disabled(), np.random.default_rng(0), self.protocol)

        np.testing.assert_array_equal(out.image, self.sample.image)
        np.testing.assert_array_equal(out.landmarks, self.sample.landmarks)
        self.assertEqual(out.bbox, self.sample.bbox)

    def test_double_flip_restores_landmarks(self):
        params = AugmentParams(bbox=self.sample.bbox, flip=True)

        once = apply_augmentation(self.sample, params, self.protocol)
        twice = apply_augmentation(once, params, self.protocol)

        np.testing.assert_allclose(twice.landmarks, self.sample.landmarks, atol=1e-9)

    def test_flip_swaps_left_and_right(self):
        once = apply_augmentation(self.sample, AugmentParams(bbox=self.sample.bbox, flip=True), self.protocol)

        # the left eye lands where the mirrored right eye was
        right_eye = self.sample.landmarks[1]
        np.testing.assert_allclose(once.landmarks[0], (32.0 - right_eye[0], right_eye[1]), atol=1e-9)

    def test_rotation_matches_rotation_matrix(self):
        center = np.array([16.0, 16.0])
        sample = dataclasses.replace(self.sample, landmarks=np.array([center + (10.0, 0.0)] * 5))

        out = apply_augmentation(sample, AugmentParams(bbox=sample.bbox, angle_deg=25.0), self.protocol)

        angle = math.radians(25.0)
        expected = center + 10.0 * np.array([math.cos(angle), math.sin(angle)])
        np.testing.assert_allclose(out.landmarks[0], expected, atol=1e-9)

    def test_jitter_stays_within_fraction(self):
        cfg = AugmentConfig(rot_deg=0, hflip_prob=0, shear_max=0)
        rng = np.random.default_rng(3)

        for _ in range(50):
            x, y, w, h = draw_augmentation(self.sample, cfg, rng).bbox
            self.assertLessEqual(abs(x), 0.15 * 32 + 1e-9)
            self.assertLessEqual(abs(x + w - 32), 0.15 * 32 + 1e-9)
            self.assertLessEqual(abs(y + h - 32), 0.15 * 32 + 1e-9)

    def test_landmarks_follow_the_image_map(self):
        params = draw_augmentation(self.sample, AugmentConfig(hflip_prob=0), np.random.default_rng(4))

        out = apply_augmentation(self.sample, params, self.protocol)

        np.testing.assert_allclose(apply_affine(np.linalg.inv(params.matrix), out.landmarks),
                                   self.sample.landmarks, atol=1e-9)


class ProportionalSamplerTests(SimpleTestCase):

    def test_probabilities_follow_sizes(self):
        sampler = ProportionalSampler([('cofw', 1345), ('aflw', 20000)], np.random.default_rng(0))

        np.testing.assert_allclose(sampler.probabilities, (0.0630, 0.9370), atol=5e-5)

    def test_empirical_frequencies(self):
        sampler = ProportionalSampler([('a', 100), ('b', 300)], np.random.default_rng(1))

        draws = [sampler.choose_dataset() for _ in range(4000)]

        self.assertAlmostEqual(draws.count('a') / 4000, 0.25, delta=0.03)

    def test_every_index_once_per_pass(self):
        sampler = ProportionalSampler([('a', 7)], np.random.default_rng(2))

        self.assertEqual(sorted(sampler.next_index('a') for _ in range(7)), list(range(7)))

    def test_batches_come_from_one_dataset(self):
        sampler = ProportionalSampler([('a', 5), ('b', 5)], np.random.default_rng(3))

        dataset_id, indices = sampler.draw_batch(4)

        self.assertIn(dataset_id, ('a', 'b'))
        self.assertEqual(len(set(indices)), 4)

    def test_empty_dataset_is_rejected(self):
        with self.assertRaises(ConfigurationError):
            ProportionalSampler([('a', 5), ('b', 0)], np.random.default_rng(0))

    def test_no_datasets(self):
        with self.assertRaises(ConfigurationError):
            ProportionalSampler([], np.random.default_rng(0))


class DatasetTests(SimpleTestCase):

    def test_mixed_protocols_have_no_single_protocol(self):
        first = ProtocolSpecFactory(id='a')
        second = ProtocolSpecFactory(id='b')
        dataset = LandmarkDatasetFactory(protocol=first)
        dataset.samples.append(LandmarkSampleFactory(protocol_id='b'))
        dataset.protocols['b'] = second

        with self.assertRaises(ConfigurationError):
            dataset.protocol
