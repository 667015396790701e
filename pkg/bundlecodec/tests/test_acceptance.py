"""
Long-running acceptance checks on desk-scale synthetic data.
Run with BUNDLECODEC_SLOW=1; each class trains real models for minutes to hours.
"""

import tempfile
import unittest
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from ..analysis import PerturbSpec, perturb_sweeps
from ..curves import get_families, synth_dataset
from ..dataio import BndDataset, SplitSpec, prepare_dataset
from ..diffnum import Rng
from ..klcheck import KlParams, kl_closed_form, kl_monte_carlo
from ..metrics import BuanConfig
from ..trainer import TrainConfig, evaluate_split, train_run
from .fixtures import SLOW, SLOW_REASON

DESK_ARCHES = ('ae', 'vae', 'vqvae', 'vqema', 'vqdiff')
DESK_SEEDS = (0, 1, 2)


def desk_split(seed: int):
    bundles = synth_dataset(get_families(4), 100, 64, 64, 0.05, Rng(seed))
    return prepare_dataset(BndDataset.from_bundles(bundles), SplitSpec(seed=seed))


def holds_in_most(outcomes):
    return sum(bool(o) for o in outcomes) >= 2


@unittest.skipUnless(SLOW, SLOW_REASON)
class DeskScaleTests(SimpleTestCase):
    """Architecture ordering and perturbation robustness over three seeds"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls._tmp = tempfile.TemporaryDirectory()
        tmp = Path(cls._tmp.name)
        cls.runs = {}
        for seed in DESK_SEEDS:
            split, stats = desk_split(seed)
            checkpoints = {}
            for arch in DESK_ARCHES:
                config = TrainConfig(arch=arch, iterations=2000, batch_size=16, seed=seed, log_every=0,
                                     eval_every=0, checkpoint_path=str(tmp / f'{arch}-{seed}.bnc'),
                                     log_path=str(tmp / f'{arch}-{seed}.csv'))
                checkpoints[arch] = train_run(config, split, stats).checkpoint
            cls.runs[seed] = (split, checkpoints)

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()
        super().tearDownClass()

    def test_architecture_ordering(self):
        cfg = BuanConfig(theta=0.05)
        outcomes = []
        for seed, (split, checkpoints) in self.runs.items():
            buan = {arch: float(evaluate_split(ckpt, split.val, cfg).scores['buan'].mean())
                    for arch, ckpt in checkpoints.items()}
            outcomes.append(buan['ae'] >= 0.9 and buan['vqdiff'] >= 0.9
                            and all(buan['vqdiff'] > buan[a] for a in ('vqvae', 'vqema', 'vae')))
        self.assertTrue(holds_in_most(outcomes), outcomes)

    def test_perturbation_robustness(self):
        spec = PerturbSpec(eps_grid=[0.0, 0.5], trials=10, seed=11)
        cfg = BuanConfig(theta=0.05)
        outcomes = []
        for seed, (split, checkpoints) in self.runs.items():
            models = [checkpoints['ae'].model, checkpoints['vqdiff'].model]
            sweeps = perturb_sweeps(models, split.val[:10], spec, cfg)
            drops = {}
            for arch, part in sweeps.groupby('arch'):
                values = part.set_index('eps')['mean_buan']
                drops[arch] = float(values[0.0] - values[0.5])
            outcomes.append(drops['vqdiff'] < drops['ae'])
        self.assertTrue(holds_in_most(outcomes), outcomes)


@unittest.skipUnless(SLOW, SLOW_REASON)
class OverfitTests(SimpleTestCase):
    """A single bundle is memorized within 500 iterations"""

    def test_single_bundle(self):
        bundles = synth_dataset(get_families(1), 1, 64, 64, 0.05, Rng(0))
        dataset = BndDataset.from_bundles(bundles)
        split, stats = prepare_dataset(dataset, SplitSpec(train_fraction=1.0, seed=0))
        with tempfile.TemporaryDirectory() as tmp:
            for arch in ('ae', 'vqdiff'):
                with self.subTest(arch=arch):
                    config = TrainConfig(arch=arch, iterations=500, batch_size=1, seed=0, log_every=0,
                                         eval_every=0, checkpoint_path=str(Path(tmp) / f'{arch}.bnc'),
                                         log_path=str(Path(tmp) / f'{arch}.csv'))
                    ckpt = train_run(config, split, stats).checkpoint
                    bundle = split.train[0]
                    diff = ckpt.model.reconstruct(bundle) - bundle.streamlines
                    self.assertLess(float(np.mean(diff * diff)), 1e-3)


@unittest.skipUnless(SLOW, SLOW_REASON)
class MonteCarloKlTests(SimpleTestCase):

    def test_million_samples(self):
        for sigma, beta in [(1.0, 1.0), (2.0, 10.0)]:
            params = KlParams(sigma, beta)
            mean, se = kl_monte_carlo(params, 10 ** 6, Rng(1))
            self.assertLess(abs(mean - kl_closed_form(params)), 3.0 * se)
