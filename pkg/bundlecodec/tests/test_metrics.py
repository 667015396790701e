"""
Tests for MDF distances, bundle adjacency and per-class reports.
"""

import numpy as np
import pandas as pd
from django.test import SimpleTestCase, override_settings

from ..curves import Bundle
from ..diffnum import Rng
from ..exceptions import ConfigError, DataError, ShapeError
from ..metrics import (
    REPORT_COLUMNS, BuanConfig, bundle_adjacency, bundle_adjacency_naive, format_report, mdf_distance,
    mdf_matrix, recon_report, score_bundles, summarize_scores,
)
from .fixtures import random_bundle, tiny_bundles


class MdfTests(SimpleTestCase):

    def test_flip_invariance(self):
        rng = Rng(1)
        a, b = rng.normal((7, 3)), rng.normal((7, 3))
        self.assertEqual(mdf_distance(a, b), mdf_distance(a, b[::-1]))
        self.assertEqual(mdf_distance(a, b), mdf_distance(b, a))
        self.assertEqual(mdf_distance(a, a[::-1]), 0.0)

    def test_parallel_offset(self):
        a = np.column_stack([np.linspace(0, 1, 5), np.zeros(5), np.zeros(5)])
        self.assertAlmostEqual(mdf_distance(a, a + [0.0, 3.0, 4.0]), 5.0)

    def test_matrix_equals_pairwise(self):
        rng = Rng(2)
        a, b = rng.normal((4, 9, 3)), rng.normal((6, 9, 3))
        matrix = mdf_matrix(a, b)
        for i in range(4):
            for j in range(6):
                self.assertEqual(matrix[i, j], mdf_distance(a[i], b[j]))

    def test_point_count_mismatch(self):
        with self.assertRaises(ShapeError):
            mdf_distance(np.zeros((4, 3)), np.zeros((5, 3)))


class AdjacencyTests(SimpleTestCase):

    def test_optimized_equals_naive(self):
        rng = Rng(3)
        cfg = BuanConfig(theta=1.5)
        for _ in range(50):
            a = random_bundle(rng, int(rng.integers(1, 6)), 8)
            b = random_bundle(rng, int(rng.integers(1, 6)), 8)
            self.assertEqual(bundle_adjacency(a, b, cfg), bundle_adjacency_naive(a, b, cfg))

    def test_self_adjacency_and_symmetry(self):
        rng = Rng(4)
        a, b = random_bundle(rng, 5, 8), random_bundle(rng, 3, 8)
        cfg = BuanConfig(theta=1.0)
        self.assertEqual(bundle_adjacency(a, a, cfg), 1.0)
        self.assertEqual(bundle_adjacency(a, b, cfg), bundle_adjacency(b, a, cfg))

    def test_monotone_in_threshold(self):
        rng = Rng(5)
        a, b = random_bundle(rng, 6, 8), random_bundle(rng, 6, 8)
        scores = [bundle_adjacency(a, b, BuanConfig(theta=t)) for t in (0.2, 0.8, 1.5, 3.0, 100.0)]
        self.assertEqual(scores, sorted(scores))
        self.assertEqual(scores[-1], 1.0)

    def test_distant_bundles(self):
        near = tiny_bundles(0, families=1, per_family=1)[0]
        far = Bundle(near.streamlines + 100.0, near.label)
        self.assertEqual(bundle_adjacency(near, far, BuanConfig(theta=1.0)), 0.0)

    def test_threshold_from_settings(self):
        with override_settings(BUNDLECODEC_BUAN_THRESHOLD=0.3):
            self.assertEqual(BuanConfig().theta, 0.3)
        with self.assertRaises(ConfigError):
            BuanConfig(theta=0.0)

    def test_empty_bundle(self):
        with self.assertRaises(DataError):
            bundle_adjacency(np.zeros((0, 4, 3)), np.zeros((2, 4, 3)))


class ReportTests(SimpleTestCase):

    def test_identity_reconstruction(self):
        bundles = tiny_bundles(1, families=2, per_family=3)
        report = recon_report(lambda b: b.streamlines, bundles, BuanConfig(theta=0.1), threads=2)
        self.assertEqual(list(report.columns), REPORT_COLUMNS)
        self.assertEqual(REPORT_COLUMNS[:4], ['class', 'mean_buan', 'std_buan', 'mean_mse'])
        self.assertEqual(list(report['class']), ['arc', 'u_shape'])
        self.assertEqual(list(report['mean_buan']), [1.0, 1.0])
        self.assertEqual(list(report['mean_mse']), [0.0, 0.0])
        self.assertEqual(list(report['n_bundles']), [3, 3])

    def test_scores_keep_input_order(self):
        bundles = tiny_bundles(2, families=2, per_family=2)[::-1]
        scores = score_bundles(lambda b: b.streamlines + 0.5, bundles, BuanConfig(theta=0.1), threads=3)
        self.assertEqual(list(scores['provenance']), [b.provenance for b in bundles])
        np.testing.assert_allclose(scores['mse'], 0.25)
        self.assertEqual(list(scores['buan']), [0.0] * 4)

    def test_empty_class_is_skipped(self):
        scores = pd.DataFrame({'class': ['a', 'a'], 'provenance': ['p', 'q'], 'buan': [0.5, 1.0],
                               'mse': [0.1, 0.3]})
        with self.assertLogs('bundlecodec.metrics', level='WARNING'):
            report = summarize_scores(scores, classes=['a', 'b'])
        self.assertEqual(list(report['class']), ['a'])
        self.assertAlmostEqual(report['mean_buan'][0], 0.75)
        self.assertAlmostEqual(report['std_buan'][0], 0.25)
        self.assertAlmostEqual(report['mean_mse'][0], 0.2)

    def test_reconstruction_shape_checked(self):
        bundle = tiny_bundles(3, families=1, per_family=1)[0]
        with self.assertRaises(ShapeError):
            score_bundles(lambda b: b.streamlines[:-1], [bundle], threads=1)

    def test_format(self):
        self.assertEqual(format_report(pd.DataFrame(columns=REPORT_COLUMNS)), '(no classes)')
