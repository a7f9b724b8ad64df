import math

import numpy as np
import pytest

from fedgela.etfgeom import make_etf
from fedgela.metrics import nc1_variability
from fedgela.neuralnet import (
    BackboneParams,
    OptimizerState,
    PhiVector,
    backward,
    ce_loss,
    finite_diff_check,
    forward,
    init_backbone,
    init_classifier,
    load_checkpoint,
    logits,
    lpm_feature_fit,
    save_checkpoint,
    sgd_step,
)


def identity_net(d):
    return BackboneParams(weights=[np.eye(d)], biases=[np.zeros(d)],
                          layer_sizes=(d, d))


class TestForward:
    def test_identity_net_normalizes(self):
        params = identity_net(3)
        x = np.array([[3.0, 4.0, 0.0]])  # norm 5
        fb, _ = forward(params, x, e_h=1.0)
        assert abs(np.linalg.norm(fb.h[0]) - 1.0) < 1e-12
        np.testing.assert_allclose(fb.h[0], [0.6, 0.8, 0.0])

    def test_rows_on_sqrt_eh_sphere(self):
        params = init_backbone((5, 16, 4), seed=0)
        x = np.random.default_rng(1).standard_normal((12, 5))
        for e_h in (1.0, 4.0, 0.25):
            fb, _ = forward(params, x, e_h)
            norms = np.linalg.norm(fb.h, axis=1)
            assert np.max(np.abs(norms - math.sqrt(e_h))) < 1e-9

    def test_zero_input_degenerate(self):
        params = identity_net(3)
        with pytest.raises(FloatingPointError, match="degenerate feature"):
            forward(params, np.zeros((1, 3)), 1.0)

    def test_duplicate_rows_identical_features(self):
        params = init_backbone((4, 8, 3), seed=2)
        x = np.random.default_rng(3).standard_normal((1, 4))
        fb, _ = forward(params, np.vstack([x, x]), 1.0)
        np.testing.assert_array_equal(fb.h[0], fb.h[1])

    def test_width_mismatch(self):
        params = identity_net(3)
        with pytest.raises(ValueError, match="does not match"):
            forward(params, np.ones((2, 4)), 1.0)


class TestLogits:
    def test_feature_at_frame_vertex(self):
        etf = make_etf(5, 4, seed=0, e_w=1.0)
        h = etf.m[:, 0][None, :]  # e_h = 1
        z = logits(h, etf)
        assert abs(z[0, 0] - 1.0) < 1e-12
        for j in range(1, 4):
            assert abs(z[0, j] + 1.0 / 3.0) < 1e-12

    def test_phi_scales_linearly(self):
        etf = make_etf(5, 4, seed=0)
        h = etf.m[:, 0][None, :]
        z1 = logits(h, etf)
        z2 = logits(h, etf, PhiVector(np.full(4, 2.0)))
        np.testing.assert_allclose(z2, 2.0 * z1)

    def test_zero_phi_zeroes_logit(self):
        etf = make_etf(5, 4, seed=0)
        rng = np.random.default_rng(0)
        h = rng.standard_normal((6, 5))
        phi = PhiVector(np.array([1.0, 0.0, 2.0, 1.0]))
        z = logits(h, etf, phi)
        np.testing.assert_array_equal(z[:, 1], np.zeros(6))

    def test_dimension_mismatch(self):
        etf = make_etf(5, 4, seed=0)
        with pytest.raises(ValueError, match="does not match"):
            logits(np.ones((2, 3)), etf)


class TestCeLoss:
    def test_binary_closed_form(self):
        for t in (0.0, 0.5, 2.0, -1.5):
            z = np.array([[t, -t]])
            expected = math.log(1.0 + math.exp(-2.0 * t))
            assert abs(ce_loss(z, [0]) - expected) < 1e-12

    def test_uniform_logits_log_mask_size(self):
        z = np.zeros((3, 6))
        mask = [0, 2, 3, 5]
        assert abs(ce_loss(z, [0, 2, 5], mask) - math.log(4.0)) < 1e-12

    def test_singleton_mask_zero_loss(self):
        z = np.random.default_rng(0).standard_normal((4, 5))
        assert ce_loss(z, [2, 2, 2, 2], [2]) == 0.0

    def test_label_outside_mask(self):
        z = np.zeros((1, 4))
        with pytest.raises(ValueError, match="invalid label"):
            ce_loss(z, [3], [0, 1])

    def test_masked_equals_minus_inf_logits(self):
        # excluding a class from the mask == sending its logit to -inf:
        # this is why the mask, not phi alone, removes absent classes
        rng = np.random.default_rng(5)
        z = rng.standard_normal((8, 6))
        mask = np.array([True, False, True, True, False, True])
        labels = rng.choice(np.nonzero(mask)[0], size=8)
        z_inf = z.copy()
        z_inf[:, ~mask] = -np.inf
        assert abs(ce_loss(z, labels, mask) - ce_loss(z_inf, labels, None)) < 1e-12

    def test_zero_phi_is_not_exclusion(self):
        # zero phi gives logit 0, which still contributes exp(0)=1 under a
        # full mask; only the restricted mask drops the class
        etf = make_etf(4, 4, seed=1)
        h = np.random.default_rng(2).standard_normal((5, 4))
        phi = PhiVector(np.array([1.0, 1.0, 0.0, 1.0]))
        z = logits(h, etf, phi)
        full = ce_loss(z, [0] * 5, None)
        restricted = ce_loss(z, [0] * 5, [0, 1, 3])
        assert full > restricted


class TestBackward:
    def test_gradient_shapes(self):
        params = init_backbone((4, 8, 3), seed=0)
        etf = make_etf(3, 3, seed=0)
        x = np.random.default_rng(1).standard_normal((5, 4))
        _, cache = forward(params, x, 1.0)
        grads = backward(cache, [0, 1, 2, 0, 1], etf)
        for g, w in zip(grads.weights, params.weights):
            assert g.shape == w.shape
        for g, b in zip(grads.biases, params.biases):
            assert g.shape == b.shape
        assert grads.classifier is None

    def test_learnable_classifier_gets_gradient(self):
        params = init_backbone((4, 3), seed=0)
        clf = init_classifier(3, 5, seed=1)
        x = np.random.default_rng(1).standard_normal((5, 4))
        _, cache = forward(params, x, 1.0)
        grads = backward(cache, [0, 1, 2, 3, 4], clf)
        assert grads.classifier.shape == clf.shape
        assert np.any(grads.classifier != 0)

    def test_duplicated_batch_same_gradient(self):
        params = init_backbone((4, 8, 3), seed=3)
        etf = make_etf(3, 3, seed=0)
        x = np.random.default_rng(4).standard_normal((6, 4))
        y = np.array([0, 1, 2, 1, 0, 2])
        _, cache1 = forward(params, x, 1.0)
        g1 = backward(cache1, y, etf)
        _, cache2 = forward(params, np.vstack([x, x]), 1.0)
        g2 = backward(cache2, np.concatenate([y, y]), etf)
        for a, b in zip(g1.tensors(), g2.tensors()):
            np.testing.assert_allclose(a, b, atol=1e-14)

    def test_stale_cache_rejected(self):
        params = init_backbone((4, 3), seed=0)
        etf = make_etf(3, 3, seed=0)
        x = np.random.default_rng(1).standard_normal((4, 4))
        _, cache = forward(params, x, 1.0)
        grads = backward(cache, [0, 1, 2, 0], etf)
        state = OptimizerState.for_params(params, 0.1, 0.9, 0.0)
        sgd_step(params, grads, state)
        with pytest.raises(RuntimeError, match="cache mismatch"):
            backward(cache, [0, 1, 2, 0], etf)

    @pytest.mark.parametrize("layers", [(4, 5), (4, 8, 5), (4, 10, 8, 5)])
    def test_finite_difference_oracle(self, layers):
        # central differences at step 1e-5 as the independent gradient route
        params = init_backbone(layers, seed=10)
        etf = make_etf(5, 5, seed=0, e_w=4.0)
        x = np.random.default_rng(11).standard_normal((7, 4))
        y = np.array([0, 1, 2, 3, 4, 0, 1])
        err = finite_diff_check(params, x, y, etf, e_h=1.0, step=1e-5,
                                n_probes=40, seed=12)
        assert err < 1e-4

    def test_finite_difference_with_phi_mask_prox(self):
        params = init_backbone((6, 12, 5), seed=20)
        clf = init_classifier(5, 5, seed=21)
        x = np.random.default_rng(22).standard_normal((9, 6))
        phi = PhiVector(np.array([2.0, 0.0, 1.0, 1.5, 0.5]))
        mask = np.array([True, False, True, True, True])
        y = np.array([0, 2, 3, 4, 0, 2, 3, 4, 0])
        err = finite_diff_check(params, x, y, clf, phi=phi, class_mask=mask,
                                e_h=2.0, n_probes=48, seed=23, lambda_prox=0.05)
        assert err < 1e-4

    def test_broken_gradient_detected(self, monkeypatch):
        import fedgela.neuralnet as nn
        real = nn.backward

        def zeroed(*args, **kwargs):
            g = real(*args, **kwargs)
            for t in g.tensors():
                t[...] = 0.0
            return g

        monkeypatch.setattr(nn, "backward", zeroed)
        params = init_backbone((4, 8, 3), seed=1)
        etf = make_etf(3, 3, seed=0)
        x = np.random.default_rng(2).standard_normal((6, 4))
        err = nn.finite_diff_check(params, x, [0, 1, 2, 0, 1, 2], etf,
                                   n_probes=32, seed=3)
        assert err > 0.5


class TestSgdStep:
    def test_plain_sgd(self):
        params = identity_net(2)
        grads_w = [np.full((2, 2), 0.5)]
        grads_b = [np.full(2, 0.25)]
        state = OptimizerState.for_params(params, lr=0.1, momentum=0.0, weight_decay=0.0)
        from fedgela.neuralnet import Grads
        sgd_step(params, Grads(grads_w, grads_b), state)
        np.testing.assert_allclose(params.weights[0], np.eye(2) - 0.05)
        np.testing.assert_allclose(params.biases[0], -0.025 * np.ones(2))

    def test_zero_grad_fixed_point(self):
        params = identity_net(2)
        before = [t.copy() for t in params.tensors()]
        from fedgela.neuralnet import Grads
        state = OptimizerState.for_params(params, lr=0.1, momentum=0.9, weight_decay=0.0)
        sgd_step(params, Grads([np.zeros((2, 2))], [np.zeros(2)]), state)
        for t, b in zip(params.tensors(), before):
            np.testing.assert_array_equal(t, b)

    def test_two_step_momentum_unroll(self):
        # buf1 = g, buf2 = 0.9 g + g -> total displacement lr * g * (1 + 1.9)
        from fedgela.neuralnet import Grads
        params = identity_net(2)
        start = params.weights[0].copy()
        g = np.full((2, 2), 0.3)
        state = OptimizerState.for_params(params, lr=0.1, momentum=0.9, weight_decay=0.0)
        for _ in range(2):
            sgd_step(params, Grads([g.copy()], [np.zeros(2)]), state)
        np.testing.assert_allclose(start - params.weights[0], 0.1 * g * 2.9,
                                   atol=1e-15)

    def test_weight_decay_enters_buffer(self):
        from fedgela.neuralnet import Grads
        params = identity_net(2)
        start = params.weights[0].copy()
        state = OptimizerState.for_params(params, lr=0.1, momentum=0.0, weight_decay=0.5)
        sgd_step(params, Grads([np.zeros((2, 2))], [np.zeros(2)]), state)
        np.testing.assert_allclose(params.weights[0], start - 0.1 * 0.5 * start)

    def test_shape_mismatch(self):
        from fedgela.neuralnet import Grads
        params = identity_net(2)
        state = OptimizerState.for_params(params, lr=0.1, momentum=0.0, weight_decay=0.0)
        with pytest.raises(ValueError, match="shape"):
            sgd_step(params, Grads([np.zeros((3, 3))], [np.zeros(2)]), state)


class TestTrainingBehaviour:
    def test_loss_decreases_on_separable_toy(self):
        from fedgela.datagen import synth_gaussian_mixture
        from fedgela.neuralnet import Grads  # noqa: F401

        ds = synth_gaussian_mixture(3, 4, 30, class_sep=6.0, noise_sigma=0.3, seed=0)
        params = init_backbone((4, 16, 3), seed=1)
        etf = make_etf(3, 3, seed=2, e_w=9.0)
        state = OptimizerState.for_params(params, lr=0.02, momentum=0.9,
                                          weight_decay=1e-4)
        losses = []
        for _ in range(100):
            fb, cache = forward(params, ds.features, 1.0)
            z = logits(fb, etf)
            losses.append(ce_loss(z, ds.labels))
            grads = backward(cache, ds.labels, etf)
            sgd_step(params, grads, state)
        tail = losses[5:]
        assert all(b <= a + 1e-12 for a, b in zip(tail, tail[1:]))
        assert losses[-1] < losses[0]

    def test_classifier_bits_never_change(self):
        etf = make_etf(4, 4, seed=0, e_w=2.0)
        frozen = etf.m.tobytes()
        params = init_backbone((5, 8, 4), seed=1)
        x = np.random.default_rng(2).standard_normal((10, 5))
        y = np.array([0, 1, 2, 3] * 2 + [0, 1])
        state = OptimizerState.for_params(params, 0.1, 0.9, 1e-4)
        for _ in range(25):
            fb, cache = forward(params, x, 1.0)
            grads = backward(cache, y, etf)
            sgd_step(params, grads, state)
        assert etf.m.tobytes() == frozen


class TestPhiVector:
    def test_mean_one_under_default_gamma(self):
        from fedgela.fedsim import compute_phi
        counts = np.array([7, 0, 3, 10, 0])
        phi = compute_phi(counts, 20, gamma=1.0 / 5)
        assert abs(phi.mean - 1.0) < 1e-12
        np.testing.assert_array_equal(phi.phi == 0.0, counts == 0)

    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            PhiVector(np.array([1.0, -0.5]))


class TestLpmFeatureFit:
    def test_balanced_converges_to_frame(self):
        etf = make_etf(8, 4, seed=0, e_w=1.0)
        labels = np.repeat(np.arange(4), 10)
        feats = lpm_feature_fit(4, 8, 1.0, etf, labels, iterations=2000,
                                lr=0.5, seed=1)
        cos = np.sum(feats * etf.m.T[labels], axis=1) / np.linalg.norm(feats, axis=1)
        assert cos.min() > 0.99
        assert nc1_variability(feats, labels) < 1e-3

    def test_single_sample_two_classes(self):
        etf = make_etf(2, 2, seed=3)
        feats = lpm_feature_fit(2, 2, 1.0, etf, [1], iterations=1500, lr=0.5, seed=4)
        cos = feats[0] @ etf.m[:, 1] / np.linalg.norm(feats[0])
        assert cos > 0.99

    def test_imbalanced_converges_too(self):
        etf = make_etf(6, 2, seed=5)
        labels = np.array([0] * 90 + [1] * 10)
        feats = lpm_feature_fit(2, 6, 1.0, etf, labels, iterations=2000,
                                lr=0.5, seed=6)
        cos = np.sum(feats * etf.m.T[labels], axis=1) / np.linalg.norm(feats, axis=1)
        assert cos.min() > 0.99


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params = init_backbone((6, 12, 4), seed=0)
        clf = init_classifier(4, 7, seed=1)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, params, classifier=clf)
        loaded, loaded_clf = load_checkpoint(path)
        assert loaded.layer_sizes == params.layer_sizes
        for a, b in zip(loaded.tensors(), params.tensors()):
            assert a.tobytes() == b.tobytes()
        assert loaded_clf.tobytes() == clf.tobytes()

    def test_without_classifier(self, tmp_path):
        params = init_backbone((3, 5), seed=0)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, params)
        loaded, clf = load_checkpoint(path)
        assert clf is None
        assert loaded.layer_sizes == (3, 5)
