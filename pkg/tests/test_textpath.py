"""Toy encoder determinism/geometry and the trainable text pipeline."""

import numpy as np
import pytest

from fuselab import autodiff as ad
from fuselab import rng as frng
from fuselab.autodiff import Tensor, check_gradients
from fuselab.textpath import TextPipeline, ToyEncoder, project_text, toy_encode


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


class TestToyEncoder:
    def test_deterministic_across_instances(self):
        a = ToyEncoder(dim=32, hash_seed=9)
        b = ToyEncoder(dim=32, hash_seed=9)
        for text_type in ("matching", "contradicting", "irrelevant"):
            assert np.array_equal(
                a.encode(text_type, 1, step=17), b.encode(text_type, 1, step=17)
            )

    def test_fnv1a_reference_values(self):
        # published FNV-1a 64-bit test vectors
        assert frng.fnv1a64("") == 0xCBF29CE484222325
        assert frng.fnv1a64("a") == 0xAF63DC4C8601EC8C

    def test_entries_bounded(self):
        enc = ToyEncoder(dim=16, hash_seed=3)
        for step in range(50):
            for text_type in ("matching", "contradicting", "irrelevant"):
                v = enc.encode(text_type, -1, step=step)
                assert np.all(v >= -1.0) and np.all(v <= 1.0)

    def test_opposite_types_same_trend_strongly_opposed(self):
        enc = ToyEncoder(dim=32, hash_seed=0)
        cos = _cos(enc.core("matching", 1), enc.core("contradicting", 1))
        assert cos < -0.8

    def test_types_separated_by_marker_and_direction_strength(self):
        # matching on an up-trend and contradicting on a down-trend both
        # describe "up", but the phrasing marker separates them and the
        # contradicting statement carries weaker direction content
        enc = ToyEncoder(dim=32, hash_seed=0)
        m_up = enc.core("matching", 1)
        c_down = enc.core("contradicting", -1)
        u, m = enc.direction_axis, enc.marker_axis
        assert m_up @ u > c_down @ u > 0
        assert m_up @ m > 0 > c_down @ m

    def test_within_type_direction_flips_marker_stays(self):
        enc = ToyEncoder(dim=32, hash_seed=0)
        u, m = enc.direction_axis, enc.marker_axis
        for text_type in ("matching", "contradicting"):
            up, down = enc.core(text_type, 1), enc.core(text_type, -1)
            assert abs(up @ u + down @ u) < 1e-12
            assert abs(up @ m - down @ m) < 1e-12

    def test_irrelevant_uncorrelated_with_trend_axis(self):
        enc = ToyEncoder(dim=32, hash_seed=1)
        cosines = [
            abs(_cos(enc.encode("irrelevant", 1, step=s), enc.direction_axis))
            for s in range(1000)
        ]
        assert float(np.mean(cosines)) < 0.1

    def test_minimum_dimension(self):
        with pytest.raises(ValueError):
            ToyEncoder(dim=2)

    def test_convenience_wrapper(self):
        assert np.array_equal(
            toy_encode("matching", 1, 3), ToyEncoder().encode("matching", 1, 3)
        )


class TestTextPipeline:
    def test_identity_configuration_reduces_to_relu(self):
        d = 6
        p = TextPipeline(d, d, frng.stream(0, "t"))
        p.mlp.W.set_data(np.eye(d))
        p.mlp.b.set_data(np.zeros(d))
        p.projection.W.set_data(np.eye(d))
        p.projection.b.set_data(np.zeros(d))
        raw = np.random.default_rng(0).normal(size=(2, 3, d))
        out = project_text(Tensor(raw), p)
        np.testing.assert_allclose(out.data, np.maximum(raw, 0.0), rtol=0, atol=0)

    def test_zero_embedding_passes_only_bias_path(self):
        p = TextPipeline(5, 4, frng.stream(1, "t"))
        out = project_text(Tensor(np.zeros((1, 2, 5))), p)
        expected = p.projection.W.data @ np.maximum(p.mlp.b.data, 0.0) + p.projection.b.data
        np.testing.assert_allclose(out.data[0, 0], expected, rtol=1e-15)

    def test_output_dim_matches_target(self):
        p = TextPipeline(7, 3, frng.stream(2, "t"))
        out = project_text(Tensor(np.ones((2, 4, 7))), p)
        assert out.shape == (2, 4, 3)

    def test_dim_mismatch_raises(self):
        p = TextPipeline(7, 3, frng.stream(2, "t"))
        with pytest.raises(ValueError):
            project_text(Tensor(np.ones((2, 4, 6))), p)

    def test_gradients_through_both_stages(self):
        rng = np.random.default_rng(4)
        p = TextPipeline(5, 3, frng.stream(3, "t"))
        raw = Tensor(rng.normal(size=(2, 3, 5)) + 0.05)
        target = Tensor(rng.normal(size=(2, 3, 3)))
        loss = ad.mse_loss(project_text(raw, p), target)
        for leaf in (p.mlp.W, p.mlp.b, p.projection.W, p.projection.b):
            assert check_gradients(loss, leaf, step=1e-5) < 1e-4
