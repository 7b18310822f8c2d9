import math

import numpy as np
import pytest

from mdatlab.autodiff import Rng, Tensor, finite_diff_check, log_softmax_nll
from mdatlab.losses import recon_mse
from mdatlab.nn import (
    BundleSpecs,
    MissingGradError,
    MlpSpec,
    SgdMomentum,
    SpecError,
    discriminate,
    feature_extract,
    init_bundle,
    load_checkpoint,
    predict,
    reconstruct,
    save_checkpoint,
    sgd_step,
    toy_specs,
)


def bundle_bytes(bundle):
    return b"".join(p.data.tobytes() for p in bundle.parameters().values())


def test_default_architecture():
    specs = toy_specs(2, 2)
    assert specs.extractor.widths == (2, 64, 64, 16)
    assert specs.predictor.widths == (16, 2)
    assert specs.decoder.widths == (16, 64, 64, 2)
    assert specs.discriminator.widths == (16, 32, 1)


class TestSpecs:
    def test_needs_a_layer(self):
        with pytest.raises(SpecError):
            MlpSpec((3,))

    def test_widths_positive(self):
        with pytest.raises(SpecError):
            MlpSpec((3, 0, 2))

    def test_activation_count(self):
        with pytest.raises(SpecError):
            MlpSpec((3, 4, 2), activations=("relu", "relu"))

    def test_mirror_accepted(self):
        init_bundle(BundleSpecs(MlpSpec((5, 16)), MlpSpec((16, 3)), MlpSpec((16, 5))), Rng(0))

    @pytest.mark.parametrize("decoder", [(16, 4), (8, 5)])
    def test_mirror_violation(self, decoder):
        with pytest.raises(SpecError):
            init_bundle(BundleSpecs(MlpSpec((5, 16)), MlpSpec((16, 3)), MlpSpec(decoder)), Rng(0))


class TestInit:
    def test_same_seed_identical_bytes(self):
        assert bundle_bytes(init_bundle(toy_specs(2, 2), Rng(3))) == \
            bundle_bytes(init_bundle(toy_specs(2, 2), Rng(3)))

    def test_different_seed_differs(self):
        assert bundle_bytes(init_bundle(toy_specs(2, 2), Rng(3))) != \
            bundle_bytes(init_bundle(toy_specs(2, 2), Rng(4)))

    def test_glorot_bounds_and_zero_bias(self):
        bundle = init_bundle(toy_specs(2, 2), Rng(0))
        for name, p in bundle.parameters().items():
            if name.endswith("bias"):
                assert not p.data.any()
            else:
                fan_in, fan_out = p.shape
                assert np.abs(p.data).max() <= math.sqrt(6 / (fan_in + fan_out))

    def test_discriminator_does_not_shift_other_groups(self):
        with_d = init_bundle(toy_specs(2, 2), Rng(5))
        specs = toy_specs(2, 2)
        without = init_bundle(BundleSpecs(specs.extractor, specs.predictor, specs.decoder), Rng(5))
        for g in "eyr":
            for (n, a), b in zip(with_d.group(g).items(), without.group(g).values()):
                assert np.array_equal(a.data, b.data), n


class TestForward:
    def test_zero_weights_give_zero_embedding(self):
        bundle = init_bundle(toy_specs(3, 2), None)
        z = feature_extract(bundle, Tensor(np.random.default_rng(0).normal(size=(4, 3))))
        assert z.shape == (4, 16) and not z.data.any()

    def test_batch_independence(self):
        bundle = init_bundle(toy_specs(2, 2), Rng(1))
        x = np.array([[0.3, -1.2], [2.0, 0.5]])
        single = feature_extract(bundle, Tensor(x[1:])).data
        pair = feature_extract(bundle, Tensor(x)).data
        # BLAS may block a 1-row and a 2-row product differently
        np.testing.assert_allclose(single[0], pair[1], rtol=1e-12, atol=1e-15)

    def test_zero_predictor_gives_ln2(self):
        bundle = init_bundle(toy_specs(2, 2), None)
        logits = predict(bundle, Tensor(np.ones((3, 16))))
        np.testing.assert_array_equal(logits.data, np.zeros((3, 2)))
        assert log_softmax_nll(logits, [0, 1, 0]).item() == pytest.approx(math.log(2))

    def test_zero_decoder_recon_is_mean_square(self):
        bundle = init_bundle(toy_specs(2, 2), None)
        x = np.array([[1.0, 2.0], [3.0, -1.0]])
        x_hat = reconstruct(bundle, feature_extract(bundle, Tensor(x)))
        np.testing.assert_array_equal(x_hat.data, 0.0)
        np.testing.assert_allclose(recon_mse(x, x_hat).data, (x ** 2).mean(axis=1))

    def test_discriminator_shape(self):
        bundle = init_bundle(toy_specs(2, 2), Rng(0))
        assert discriminate(bundle, Tensor(np.ones((7, 16)))).shape == (7, 1)

    def test_missing_discriminator(self):
        specs = toy_specs(2, 2)
        bundle = init_bundle(BundleSpecs(specs.extractor, specs.predictor, specs.decoder), Rng(0))
        with pytest.raises(SpecError):
            discriminate(bundle, Tensor(np.ones((1, 16))))

    def test_wrong_input_dim(self):
        bundle = init_bundle(toy_specs(2, 2), Rng(0))
        with pytest.raises(ValueError):
            feature_extract(bundle, Tensor(np.ones((1, 3))))

    @pytest.mark.parametrize("d_in", [2, 5, 64])
    def test_mirror_shape(self, d_in):
        bundle = init_bundle(toy_specs(d_in, 3), Rng(0))
        x = Tensor(np.ones((4, d_in)))
        assert reconstruct(bundle, feature_extract(bundle, x)).shape == x.shape

    def test_extractor_gradients_match_finite_differences(self):
        bundle = init_bundle(toy_specs(3, 2, d_z=4, hidden=(5,)), Rng(2))
        x = Tensor(np.random.default_rng(2).normal(size=(4, 3)))
        report = finite_diff_check(lambda: feature_extract(bundle, x).sum(), bundle.group("e"))
        assert report.checked > 0 and report.max_rel_error <= 1e-4


class TestSgd:
    def test_first_step(self):
        w = Tensor([1.0], requires_grad=True, name="w")
        w.grad = np.array([1.0])
        opt = SgdMomentum(lr=0.1, momentum=0.9)
        sgd_step(opt, {"w": w})
        assert opt.velocity["w"][0] == pytest.approx(-0.1)
        assert w.data[0] == pytest.approx(0.9)

    def test_velocity_decays_with_zero_gradient(self):
        w = Tensor([0.0], requires_grad=True)
        opt = SgdMomentum(lr=0.1, momentum=0.9)
        w.grad = np.array([1.0])
        opt.step({"w": w})
        w.grad = np.array([0.0])
        for k in range(1, 5):
            opt.step({"w": w})
            assert opt.velocity["w"][0] == pytest.approx(-0.1 * 0.9 ** k)

    def test_quadratic_bowl_converges(self):
        # scalar oracle: the same recursion written out by hand
        w_ref, v_ref = 1.0, 0.0
        for _ in range(200):
            v_ref = 0.9 * v_ref - 0.05 * 2 * w_ref
            w_ref += v_ref
        w = Tensor([1.0], requires_grad=True)
        opt = SgdMomentum(lr=0.05, momentum=0.9)
        for _ in range(200):
            w.grad = None
            (w * w).sum().backward()
            opt.step({"w": w})
        assert abs(w.data[0]) <= 1e-3
        assert w.data[0] == pytest.approx(w_ref, abs=1e-15)

    def test_zero_lr_is_identity(self):
        bundle = init_bundle(toy_specs(2, 2), Rng(0))
        params = bundle.parameters()
        before = bundle_bytes(bundle)
        for p in params.values():
            p.grad = np.ones_like(p.data)
        SgdMomentum(lr=0.0).step(params)
        assert bundle_bytes(bundle) == before

    def test_missing_grad(self):
        w = Tensor([1.0], requires_grad=True)
        with pytest.raises(MissingGradError):
            SgdMomentum(lr=0.1).step({"w": w})

    def test_momentum_range(self):
        with pytest.raises(ValueError):
            SgdMomentum(lr=0.1, momentum=1.0)

    def test_step_touches_only_given_group(self):
        bundle = init_bundle(toy_specs(2, 2), Rng(0))
        e_before = b"".join(p.data.tobytes() for p in bundle.group("e").values())
        dec = bundle.group("r")
        for p in dec.values():
            p.grad = np.ones_like(p.data)
        SgdMomentum(lr=0.1).step(dec)
        assert b"".join(p.data.tobytes() for p in bundle.group("e").values()) == e_before


def test_checkpoint_round_trip(tmp_path):
    bundle = init_bundle(toy_specs(3, 4), Rng(9))
    path = save_checkpoint(bundle, tmp_path / "ckpt.txt")
    loaded = load_checkpoint(path)
    assert loaded.specs == bundle.specs
    assert bundle_bytes(loaded) == bundle_bytes(bundle)
    assert list(loaded.parameters()) == list(bundle.parameters())


def test_checkpoint_rejects_other_files(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("hello\n")
    with pytest.raises(ValueError):
        load_checkpoint(path)
