"""
Tests for perturbation sweeps, PCA projections and the report files.
"""

import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from django.test import SimpleTestCase

from ..analysis import (
    SWEEP_COLUMNS, PerturbSpec, cluster_silhouette, emit_plots, pca_project, perturb_sweep, perturb_sweeps,
    stack_latents,
)
from ..codec import Model
from ..dataio import LatentRecord
from ..diffnum import Rng
from ..exceptions import ConfigError, DataError
from ..metrics import BuanConfig
from .fixtures import tiny_bundles, tiny_model_config


class PerturbSpecTests(SimpleTestCase):

    def test_zero_is_added_and_grid_sorted(self):
        spec = PerturbSpec(eps_grid=[0.5, 0.1, 0.5], trials=2, seed=1)
        self.assertEqual(spec.eps_grid, [0.0, 0.1, 0.5])

    def test_defaults_from_settings(self):
        spec = PerturbSpec()
        self.assertIn(0.0, spec.eps_grid)
        self.assertGreaterEqual(spec.trials, 1)

    def test_invalid(self):
        with self.assertRaises(ConfigError):
            PerturbSpec(eps_grid=[-0.1], trials=1)
        with self.assertRaises(ConfigError):
            PerturbSpec(eps_grid=[0.1], trials=0)


class PerturbSweepTests(SimpleTestCase):

    def setUp(self):
        self.bundles = tiny_bundles(0, families=2, per_family=1)
        self.models = [Model.create(tiny_model_config(kind), Rng(1)) for kind in ('ae', 'vqdiff')]
        self.spec = PerturbSpec(eps_grid=[0.0, 0.5, 2.0], trials=2, seed=3)
        self.cfg = BuanConfig(theta=0.5)

    def test_zero_magnitude_is_plain_reconstruction(self):
        sweep = perturb_sweep(self.models[0], self.bundles[0], self.spec, self.cfg)
        self.assertEqual(list(sweep.columns), SWEEP_COLUMNS)
        self.assertEqual(list(sweep['eps']), [0.0, 0.5, 2.0])
        diff = self.models[0].reconstruct(self.bundles[0]) - self.bundles[0].streamlines
        self.assertAlmostEqual(sweep['mean_mse'][0], float(np.mean(diff * diff)), places=12)
        self.assertTrue(((sweep['mean_buan'] >= 0.0) & (sweep['mean_buan'] <= 1.0)).all())

    def test_sweeps_over_models_and_bundles(self):
        sweeps = perturb_sweeps(self.models, self.bundles, self.spec, self.cfg)
        self.assertEqual(len(sweeps), 6)
        self.assertEqual(list(sweeps['arch'].unique()), ['ae', 'vqdiff'])
        self.assertEqual(set(sweeps['samples']), {4})
        again = perturb_sweeps(self.models, self.bundles, self.spec, self.cfg, threads=2)
        pd.testing.assert_frame_equal(sweeps, again)

    def test_needs_bundles(self):
        with self.assertRaises(DataError):
            perturb_sweeps(self.models, [], self.spec, self.cfg)


class ProjectionTests(SimpleTestCase):

    def test_recovers_dominant_direction(self):
        rng = Rng(4)
        direction = np.array([1.0, 2.0, 0.0]) / np.sqrt(5.0)
        data = rng.normal((200, 1), scale=5.0) * direction + rng.normal((200, 3), scale=0.01)
        projection = pca_project(-data, out_dim=2)
        np.testing.assert_allclose(projection.components[0], direction, atol=1e-3)
        self.assertGreater(projection.explained[0], 0.99)
        self.assertEqual(projection.coords.shape, (200, 2))

    def test_full_rank_projection_reconstructs(self):
        data = Rng(5).normal((30, 4))
        projection = pca_project(data, out_dim=4)
        np.testing.assert_allclose(projection.reconstruct(), data, atol=1e-10)
        np.testing.assert_allclose(projection.components @ projection.components.T, np.eye(4), atol=1e-10)
        self.assertAlmostEqual(float(projection.explained.sum()), 1.0)

    def test_isotropic_cloud_spreads_variance(self):
        projection = pca_project(Rng(8).normal((20000, 6)))
        self.assertAlmostEqual(float(projection.explained.sum()), 2.0 / 6.0, delta=0.03)

    def test_duplicate_rows_share_coordinates(self):
        data = Rng(9).normal((12, 5))
        data[7] = data[2]
        coords = pca_project(data).coords
        np.testing.assert_array_equal(coords[7], coords[2])

    def test_zero_variance(self):
        with self.assertLogs('bundlecodec.analysis', level='WARNING'):
            projection = pca_project(np.ones((5, 3)))
        np.testing.assert_array_equal(projection.coords, np.zeros((5, 2)))

    def test_invalid(self):
        with self.assertRaises(DataError):
            pca_project(np.zeros((1, 3)))
        with self.assertRaises(ConfigError):
            pca_project(np.zeros((4, 3)), out_dim=4)

    def test_stack_latents(self):
        records = [LatentRecord('ae', 'arc', 'p0', np.zeros((3, 2))),
                   LatentRecord('ae', 'fan', 'p1', np.ones((3, 2)))]
        latents, labels = stack_latents(records)
        self.assertEqual(latents.shape, (6, 2))
        self.assertEqual(list(labels), ['arc'] * 3 + ['fan'] * 3)
        with self.assertRaises(DataError):
            stack_latents([])

    def test_silhouette(self):
        rng = Rng(6)
        coords = np.concatenate([rng.normal((20, 2), scale=0.1), rng.normal((20, 2), scale=0.1) + 10.0])
        labels = ['a'] * 20 + ['b'] * 20
        self.assertGreater(cluster_silhouette(coords, labels), 0.9)
        self.assertTrue(np.isnan(cluster_silhouette(coords, ['a'] * 40)))


class EmitPlotsTests(SimpleTestCase):

    def test_writes_csv_and_png(self):
        sweeps = pd.DataFrame({'arch': ['ae', 'ae', 'vqdiff', 'vqdiff'], 'eps': [0.0, 0.5, 0.0, 0.5],
                               'mean_buan': [1.0, 0.5, 1.0, 0.9], 'mean_mse': [0.0, 0.1, 0.0, 0.01],
                               'samples': [2, 2, 2, 2]}, columns=SWEEP_COLUMNS)
        projection = pca_project(Rng(7).normal((10, 3)))
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp) / 'plots'
            written = emit_plots(sweeps, {'ae': (projection, ['a'] * 5 + ['b'] * 5)}, out)
            names = sorted(p.name for p in written)
            self.assertEqual(names, ['perturb.png', 'perturb_ae.csv', 'perturb_vqdiff.csv',
                                     'projection_ae.csv', 'projection_ae.png'])
            for path in written:
                self.assertGreater(path.stat().st_size, 0)
            frame = pd.read_csv(out / 'projection_ae.csv')
            self.assertEqual(list(frame.columns), ['label', 'pc1', 'pc2'])

    def test_nothing_to_plot(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(emit_plots(None, {}, tmp), [])
