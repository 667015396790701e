"""
Tests for the encoder/decoder, the five bottlenecks and the Model wrapper.
"""

import numpy as np
from django.test import SimpleTestCase

from ..codec import (
    KINDS, EmaState, Model, ModelConfig, codebook_usage, end_to_end_check, forward, init_params, model_loss,
    nearest_codes, param_shapes, quantize_vqdiff, quantize_vqema_update, quantize_vqvae,
)
from ..diffnum import Rng, Tape, Tensor, backward, mse_loss, mul, pairwise_sq_dist, sum_all
from ..exceptions import ConfigError, ShapeError
from .fixtures import TINY_POINTS, random_bundle, tiny_model_config


class ModelConfigTests(SimpleTestCase):

    def test_validation(self):
        with self.assertRaises(ConfigError):
            ModelConfig(kind='gan')
        with self.assertRaises(ConfigError):
            ModelConfig(points=30)
        with self.assertRaises(ConfigError):
            ModelConfig(kind='vqvae', codebook_size=1)
        with self.assertRaises(ConfigError):
            ModelConfig(beta_temp=0.0)
        with self.assertRaises(ConfigError):
            ModelConfig(activation='tanh')

    def test_dict_round_trip(self):
        config = tiny_model_config('vae', kl_weight=0.5)
        self.assertEqual(ModelConfig.from_dict(config.to_dict()), config)

    def test_parameter_sets(self):
        vae = param_shapes(tiny_model_config('vae'))
        self.assertIn('enc.logvar.w', vae)
        self.assertNotIn('codebook', vae)
        vq = param_shapes(tiny_model_config('vqdiff'))
        self.assertEqual(vq['codebook'], (8, 4))
        self.assertEqual(vq['enc.proj.w'], (4, 4 * TINY_POINTS // 4))
        self.assertNotIn('codebook', param_shapes(tiny_model_config('ae')))


class InitTests(SimpleTestCase):

    def test_seeded_and_shaped(self):
        config = tiny_model_config('vqdiff', sigma_codebook=2.0, codebook_size=64, latent_dim=32)
        a = init_params(config, Rng(1))
        b = init_params(config, Rng(1))
        for name, shape in param_shapes(config).items():
            self.assertEqual(a[name].shape, shape)
            np.testing.assert_array_equal(a[name].data, b[name].data)
        self.assertTrue(np.all(a['enc.stem.b'].data == 0.0))
        self.assertAlmostEqual(float(a['codebook'].data.std()), 2.0, delta=0.1)

    def test_logvar_head_starts_at_zero(self):
        params = init_params(tiny_model_config('vae'), Rng(2))
        self.assertTrue(np.all(params['enc.logvar.w'].data == 0.0))


class ForwardTests(SimpleTestCase):

    def test_shapes_for_every_kind(self):
        x = Tensor(Rng(3).normal((5, 3, TINY_POINTS)))
        for kind in KINDS:
            with self.subTest(kind=kind):
                config = tiny_model_config(kind)
                out = forward(init_params(config, Rng(4)), config, x, mode='train', rng=Rng(5))
                self.assertEqual(out.recon.shape, (5, 3, TINY_POINTS))
                self.assertEqual(out.z.shape, (5, 4))
                self.assertEqual(out.s.shape, (5, 4))
                loss = model_loss(config, x, out)
                self.assertEqual(loss.shape, ())
                self.assertTrue(np.isfinite(loss.item()))

    def test_differentiable_quantizer_loss_is_reconstruction_only(self):
        x = Tensor(Rng(3).normal((4, 3, TINY_POINTS)))
        config = tiny_model_config('vqdiff')
        out = forward(init_params(config, Rng(4)), config, x, mode='train', rng=Rng(5))
        self.assertEqual(model_loss(config, x, out).item(), mse_loss(out.recon, x).item())

    def test_streamlines_are_encoded_independently(self):
        config = tiny_model_config('ae')
        model = Model.create(config, Rng(6))
        bundle = random_bundle(Rng(7), 4, TINY_POINTS)
        full = model.reconstruct(bundle)
        part = model.reconstruct(type(bundle)(bundle.streamlines[1:3], bundle.label))
        np.testing.assert_allclose(full[1:3], part, atol=1e-12)

    def test_reconstruction_and_latents_follow_a_permutation(self):
        bundle = random_bundle(Rng(7), 6, TINY_POINTS)
        perm = Rng(14).permutation(6)
        shuffled = type(bundle)(bundle.streamlines[perm], bundle.label)
        for kind in KINDS:
            with self.subTest(kind=kind):
                model = Model.create(tiny_model_config(kind), Rng(6))
                np.testing.assert_allclose(model.reconstruct(shuffled), model.reconstruct(bundle)[perm],
                                           atol=1e-12)
                z, s = model.latents(bundle)
                z_perm, s_perm = model.latents(shuffled)
                np.testing.assert_allclose(z_perm, z[perm], atol=1e-12)
                if s is not None:
                    np.testing.assert_allclose(s_perm, s[perm], atol=1e-12)

    def test_input_shape_checked(self):
        config = tiny_model_config('ae')
        with self.assertRaises(ShapeError):
            forward(init_params(config, Rng(0)), config, Tensor(np.zeros((2, 3, 12))), mode='eval')

    def test_eval_is_deterministic(self):
        for kind in ('vqdiff', 'vae'):
            model = Model.create(tiny_model_config(kind), Rng(8))
            bundle = random_bundle(Rng(9), 3, TINY_POINTS)
            np.testing.assert_array_equal(model.reconstruct(bundle), model.reconstruct(bundle))

    def test_train_mode_needs_noise_source(self):
        config = tiny_model_config('vqdiff')
        with self.assertRaises(ConfigError):
            forward(init_params(config, Rng(0)), config, Tensor(np.zeros((1, 3, TINY_POINTS))), mode='train')


class VqDiffTests(SimpleTestCase):

    def test_weights_form_a_distribution(self):
        rng = Rng(10)
        z, codebook = Tensor(rng.normal((6, 4))), Tensor(rng.normal((8, 4)))
        s, weights = quantize_vqdiff(z, codebook, 2.0, rng=Rng(1))
        np.testing.assert_allclose(weights.data.sum(axis=1), np.ones(6))
        np.testing.assert_allclose(s.data, weights.data @ codebook.data)

    def test_low_temperature_matches_nearest_code(self):
        rng = Rng(12)
        compared, draws = 0, 0
        while compared < 100:
            draws += 1
            self.assertLess(draws, 1000)
            z, codebook = rng.normal((1, 4)), rng.normal((8, 4))
            dist = np.sort(pairwise_sq_dist(z, codebook)[0])
            if dist[1] - dist[0] < 0.05:
                # near-ties are not separated by a finite temperature
                continue
            s, _ = quantize_vqdiff(Tensor(z), Tensor(codebook), 1e-3, mode='eval')
            hard, _ = quantize_vqvae(Tensor(z), Tensor(codebook))
            np.testing.assert_allclose(s.data, hard.data, atol=1e-6)
            compared += 1

    def test_codebook_receives_gradient(self):
        rng = Rng(13)
        z = Tensor(rng.normal((5, 4)), requires_grad=True)
        codebook = Tensor(rng.normal((8, 4)), requires_grad=True)
        with Tape() as tape:
            s, _ = quantize_vqdiff(z, codebook, 1.0, rng=Rng(2))
            loss = sum_all(mul(s, s))
        gz, ge = backward(loss, tape, wrt=[z, codebook])
        self.assertGreater(float(np.linalg.norm(ge)), 0.0)
        self.assertGreater(float(np.linalg.norm(gz)), 0.0)

    def test_explicit_noise_is_reproducible(self):
        rng = Rng(14)
        z, codebook = Tensor(rng.normal((3, 4))), Tensor(rng.normal((8, 4)))
        noise = rng.normal((3, 8))
        a, _ = quantize_vqdiff(z, codebook, 1.5, mode='train', noise=noise)
        b, _ = quantize_vqdiff(z, codebook, 1.5, mode='train', noise=noise)
        np.testing.assert_array_equal(a.data, b.data)


class VqVaeTests(SimpleTestCase):

    def test_nearest_with_ties_to_lowest_index(self):
        codebook = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 3.0]])
        z = np.array([[0.0, 0.0], [-0.9, 0.1], [0.0, 2.0]])
        np.testing.assert_array_equal(nearest_codes(z, codebook), [0, 1, 2])

    def test_straight_through_gradient(self):
        codebook = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]), requires_grad=True)
        z = Tensor(np.array([[0.9, 0.2]]), requires_grad=True)
        with Tape() as tape:
            s, indices = quantize_vqvae(z, codebook)
            loss = sum_all(mul(s, Tensor(np.array([[3.0, 4.0]]))))
        np.testing.assert_array_equal(s.data, [[1.0, 0.0]])
        gz, ge = backward(loss, tape, wrt=[z, codebook])
        np.testing.assert_array_equal(gz, [[3.0, 4.0]])
        np.testing.assert_array_equal(ge, np.zeros((2, 2)))


class VqEmaTests(SimpleTestCase):

    def test_update_moves_toward_assigned_mean(self):
        codebook = np.array([[0.0, 0.0], [10.0, 10.0]])
        state = EmaState.from_codebook(codebook)
        z = np.array([[1.0, 1.0], [3.0, 3.0]])
        updated = quantize_vqema_update(z, np.array([0, 0]), codebook, state, decay=0.5, eps=1e-5)
        # N0 = 0.5 + 1 = 1.5, m0 = 0 + 0.5 * (4, 4) = (2, 2)
        np.testing.assert_allclose(state.counts, [1.5, 0.5])
        np.testing.assert_allclose(updated[0], [2.0 / 1.5, 2.0 / 1.5], rtol=1e-4)
        np.testing.assert_allclose(updated[1], [10.0, 10.0], rtol=1e-4)

    def test_unused_entry_stays_finite(self):
        codebook = np.array([[0.0], [5.0]])
        state = EmaState.from_codebook(codebook)
        for _ in range(200):
            codebook = quantize_vqema_update(np.array([[0.1]]), np.array([0]), codebook, state, 0.9, 1e-5)
        self.assertTrue(np.all(np.isfinite(codebook)))

    def test_decay_range(self):
        with self.assertRaises(ConfigError):
            quantize_vqema_update(np.zeros((1, 1)), np.array([0]), np.zeros((2, 1)),
                                  EmaState.from_codebook(np.zeros((2, 1))), 1.0, 1e-5)


class UsageTests(SimpleTestCase):

    def test_hard_assignments(self):
        usage, perplexity = codebook_usage(np.array([0, 0, 1, 1]), 4)
        np.testing.assert_allclose(usage, [0.5, 0.5, 0.0, 0.0])
        self.assertAlmostEqual(perplexity, 2.0)

    def test_soft_weights(self):
        usage, perplexity = codebook_usage(np.full((3, 4), 0.25), 4)
        np.testing.assert_allclose(usage, np.full(4, 0.25))
        self.assertAlmostEqual(perplexity, 4.0)


class ModelTests(SimpleTestCase):

    def test_ema_codebook_is_not_trainable(self):
        model = Model.create(tiny_model_config('vqema'), Rng(0))
        self.assertNotIn(id(model.params['codebook']), [id(p) for p in model.trainable()])
        self.assertIsNotNone(model.ema)
        vq = Model.create(tiny_model_config('vqvae'), Rng(0))
        self.assertIn(id(vq.params['codebook']), [id(p) for p in vq.trainable()])

    def test_state_round_trip(self):
        model = Model.create(tiny_model_config('vqema'), Rng(1))
        restored = Model.from_tensors(model.config, model.state_tensors())
        bundle = random_bundle(Rng(2), 3, TINY_POINTS)
        np.testing.assert_array_equal(model.reconstruct(bundle), restored.reconstruct(bundle))
        np.testing.assert_array_equal(restored.ema.sums, model.ema.sums)

    def test_missing_tensors(self):
        model = Model.create(tiny_model_config('ae'), Rng(1))
        tensors = model.state_tensors()
        del tensors['dec.out.w']
        with self.assertRaises(ConfigError):
            Model.from_tensors(model.config, tensors)

    def test_latents_and_decoding(self):
        for kind in KINDS:
            with self.subTest(kind=kind):
                model = Model.create(tiny_model_config(kind), Rng(3))
                bundle = random_bundle(Rng(4), 3, TINY_POINTS)
                z, s = model.latents(bundle)
                self.assertEqual(z.shape, (3, 4))
                self.assertEqual(s is not None, model.config.quantized)
                np.testing.assert_allclose(model.decode_latents(z), model.reconstruct(bundle), atol=1e-12)

    def test_code_weights(self):
        bundle = random_bundle(Rng(5), 3, TINY_POINTS)
        self.assertEqual(Model.create(tiny_model_config('vqdiff'), Rng(0)).code_weights(bundle).shape, (3, 8))
        self.assertEqual(Model.create(tiny_model_config('vqvae'), Rng(0)).code_weights(bundle).shape, (3,))
        self.assertIsNone(Model.create(tiny_model_config('ae'), Rng(0)).code_weights(bundle))


class EndToEndGradientTests(SimpleTestCase):
    """Finite differences through the full loss of each architecture on a 2-streamline toy bundle"""

    def test_every_architecture(self):
        for kind in KINDS:
            with self.subTest(kind=kind):
                report = end_to_end_check(kind, seed=0, step=1e-5, tol=1e-4)
                self.assertTrue(report.passed, f"{kind}: max rel err {report.max_rel_err:.2e}")
