import math

import numpy as np
import pytest

from mdatlab.autodiff import Rng
from mdatlab.datasets import (
    DomainDataset,
    GlyphConfig,
    LabelLeakageError,
    MoonsConfig,
    Standardizer,
    apply_shift,
    dump_csv,
    gen_glyphs,
    gen_moons,
    load_csv,
    moons_points,
    paired_batches,
    rotate,
    steps_per_epoch,
)


def task_bytes(data):
    parts = []
    for split in (data.source, data.target, data.source_test, data.target_test):
        parts.append(split.inputs.tobytes())
        parts.append(split.truth().tobytes())
    return b"".join(parts)


class TestMoons:
    def test_noise_free_points_lie_on_arcs(self):
        t = np.linspace(0, math.pi, 7)
        upper = moons_points(t, np.zeros(7, dtype=int))
        lower = moons_points(t, np.ones(7, dtype=int))
        np.testing.assert_allclose(np.hypot(*upper.T), 1.0)
        np.testing.assert_allclose(np.hypot(lower[:, 0] - 1.0, lower[:, 1] - 0.5), 1.0)

    def test_shapes_and_balance(self):
        data = gen_moons(MoonsConfig(n_per_domain=300, seed=1))
        assert data.source.inputs.shape == (300, 2)
        assert data.target.inputs.shape == (300, 2)
        assert np.bincount(data.source.labels).tolist() == [150, 150]
        assert data.target.labels is None and data.target.has_eval_labels

    def test_same_seed_identical(self):
        assert task_bytes(gen_moons(MoonsConfig(seed=4))) == task_bytes(gen_moons(MoonsConfig(seed=4)))

    def test_seeds_differ(self):
        assert task_bytes(gen_moons(MoonsConfig(seed=4))) != task_bytes(gen_moons(MoonsConfig(seed=5)))

    def test_zero_rotation_gives_same_distribution(self):
        data = gen_moons(MoonsConfig(n_per_domain=2000, rotation_degrees=0.0, seed=2))
        np.testing.assert_allclose(data.source.inputs.mean(0), data.target.inputs.mean(0), atol=0.05)

    def test_rotation_preserves_distances_to_centre(self):
        pts = np.random.default_rng(0).normal(size=(10, 2))
        centre = np.array([0.5, 0.25])
        out = rotate(pts, 30.0, centre)
        np.testing.assert_allclose(np.linalg.norm(out - centre, axis=1),
                                   np.linalg.norm(pts - centre, axis=1))

    def test_rotation_by_ninety(self):
        np.testing.assert_allclose(rotate(np.array([[1.0, 0.0]]), 90.0), [[0.0, 1.0]], atol=1e-15)

    @pytest.mark.parametrize("kw", [{"n_per_domain": 3}, {"noise": -0.1}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            MoonsConfig(**kw)


class TestGlyphs:
    def test_shapes_and_range(self):
        data = gen_glyphs(GlyphConfig(seed=0))
        assert data.source.inputs.shape == (400, 64)
        assert data.image_shape == (8, 8)
        for split in (data.source, data.target):
            assert split.inputs.min() >= 0.0 and split.inputs.max() <= 1.0

    def test_inversion_flips_intensity(self):
        src = gen_glyphs(GlyphConfig(seed=1, shift="inversion")).source.inputs
        tgt = gen_glyphs(GlyphConfig(seed=1, shift="inversion")).target.inputs
        assert src.mean() < 0.5 < tgt.mean()

    def test_zero_strength_is_identity(self):
        x = np.random.default_rng(0).uniform(size=(3, 4))
        for kind in ("inversion", "brightness", "noise"):
            np.testing.assert_array_equal(apply_shift(x, kind, 0.0, Rng(0)), x)

    def test_full_inversion(self):
        x = np.array([[0.0, 0.25, 1.0]])
        np.testing.assert_allclose(apply_shift(x, "inversion", 1.0), [[1.0, 0.75, 0.0]])

    def test_unknown_shift(self):
        with pytest.raises(ValueError):
            GlyphConfig(shift="blur")

    def test_class_means_separated_by_three_jitter_sigmas(self):
        cfg = GlyphConfig(seed=0)
        src = gen_glyphs(cfg).source
        means = [src.inputs[src.labels == k].mean(0) for k in range(cfg.n_classes)]
        for i in range(cfg.n_classes):
            for j in range(i + 1, cfg.n_classes):
                assert np.linalg.norm(means[i] - means[j]) >= 3 * cfg.jitter

    def test_images_share_one_scale(self):
        std = gen_glyphs(GlyphConfig(seed=0)).standardized().standardizer
        assert np.all(std.mean == std.mean[0]) and np.all(std.std == std.std[0])

    def test_deterministic(self):
        assert task_bytes(gen_glyphs(GlyphConfig(seed=3))) == task_bytes(gen_glyphs(GlyphConfig(seed=3)))


class TestLabelSealing:
    def test_training_view_hides_target_labels(self):
        target = gen_moons(MoonsConfig(seed=0)).target.for_training()
        with pytest.raises(LabelLeakageError):
            target.eval_labels

    def test_target_rejects_training_labels(self):
        with pytest.raises(ValueError):
            DomainDataset(np.zeros((2, 2)), [0, 1], "target")

    def test_evaluation_view_exposes_labels(self):
        target = gen_moons(MoonsConfig(seed=0)).target
        assert target.truth().shape == (300,)


class TestStandardizer:
    def test_round_trip(self):
        x = np.random.default_rng(0).normal(3.0, 2.0, size=(50, 3))
        st = Standardizer.fit(x)
        np.testing.assert_allclose(st.inverse(st.transform(x)), x)
        np.testing.assert_allclose(st.transform(x).mean(0), 0.0, atol=1e-12)

    def test_uses_source_statistics_only(self):
        data = gen_moons(MoonsConfig(seed=1))
        std = data.standardized()
        np.testing.assert_allclose(std.source.inputs.mean(0), 0.0, atol=1e-12)
        assert np.abs(std.target.inputs.mean(0)).max() > 1e-3

    def test_constant_feature(self):
        st = Standardizer.fit(np.ones((4, 2)))
        assert np.all(np.isfinite(st.transform(np.ones((1, 2)))))


class TestBatching:
    def test_epoch_covers_each_sample_at_most_once(self):
        data = gen_moons(MoonsConfig(n_per_domain=100, seed=0))
        batches = list(paired_batches(data.source, data.target, 30, Rng(0)))
        assert len(batches) == steps_per_epoch(100, 100, 30) == 3
        seen = np.concatenate([b.x_src for b in batches])
        assert len(np.unique(seen, axis=0)) == 90

    def test_equal_domain_batch_sizes(self):
        data = gen_moons(MoonsConfig(n_per_domain=100, seed=0))
        for b in paired_batches(data.source, data.target, 25, Rng(1)):
            assert b.x_src.shape == b.x_tgt.shape == (25, 2) and b.y_src.shape == (25,)

    def test_deterministic_given_rng(self):
        data = gen_moons(MoonsConfig(n_per_domain=50, seed=0))
        a = [b.x_tgt.tobytes() for b in paired_batches(data.source, data.target, 10, Rng(2))]
        b = [b.x_tgt.tobytes() for b in paired_batches(data.source, data.target, 10, Rng(2))]
        assert a == b

    def test_batch_too_large(self):
        data = gen_moons(MoonsConfig(n_per_domain=10, seed=0))
        with pytest.raises(ValueError):
            list(paired_batches(data.source, data.target, 11, Rng(0)))


class TestCsv:
    def test_source_round_trip(self, tmp_path):
        src = gen_moons(MoonsConfig(n_per_domain=20, seed=0)).source
        back = load_csv(dump_csv(src, tmp_path / "s.csv"))
        np.testing.assert_array_equal(back.inputs, src.inputs)
        np.testing.assert_array_equal(back.labels, src.labels)

    def test_target_labels_hidden_by_default(self, tmp_path):
        tgt = gen_moons(MoonsConfig(n_per_domain=20, seed=0)).target
        path = dump_csv(tgt, tmp_path / "t.csv")
        assert ",-1,target" in path.read_text()
        assert not load_csv(path).has_eval_labels

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            load_csv(path)
