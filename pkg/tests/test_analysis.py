"""Metric oracles and diagnostic formulas, checked against brute force."""

import math

import numpy as np
import pytest

from fuselab import rng as frng
from fuselab.analysis import (
    cohens_d,
    collect_contribution_ratios,
    contribution_summary,
    effective_rank,
    efficiency_report,
    mae,
    metric_report,
    mse,
    normalized_mse,
    representation_similarity,
    temporal_attribution,
    text_contribution_ratio,
    welch_t,
    win_rate,
)
from fuselab.backbone import DLinearBackbone, ForecastModel, MlpBackbone
from fuselab.fusion import FusionSpec
from oracles import brute_mae as _brute_mae, brute_mse as _brute_mse, jacobi_singular_values as _jacobi_singular_values


class TestErrorMetrics:
    def test_exact_match_is_zero(self):
        y = np.ones((2, 3))
        assert mse(y, y) == 0.0 and mae(y, y) == 0.0

    def test_unit_offset(self):
        y = np.zeros((2, 3))
        assert mse(y + 1, y) == 1.0 and mae(y + 1, y) == 1.0

    def test_hand_case(self):
        assert mse(np.array([0.0, 2.0]), np.array([1.0, 0.0])) == 2.5
        assert mae(np.array([0.0, 2.0]), np.array([1.0, 0.0])) == 1.5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse(np.zeros(3), np.zeros(4))

    def test_against_double_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            shape = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
            a, b = rng.normal(size=shape), rng.normal(size=shape)
            assert abs(mse(a, b) - _brute_mse(a, b)) < 1e-12
            assert abs(mae(a, b) - _brute_mae(a, b)) < 1e-12

    def test_per_step_breakdown(self):
        yhat = np.zeros((2, 3, 1))
        y = np.stack([np.array([[1.0], [2.0], [3.0]])] * 2)
        report = metric_report(yhat, y)
        assert report.per_step_mse == [1.0, 4.0, 9.0]
        assert report.per_step_mae == [1.0, 2.0, 3.0]


class TestWinRate:
    def test_eight_of_nine(self):
        unimodal = [1.0] * 9
        method = [0.9] * 8 + [1.1]
        assert win_rate(method, unimodal) == 88.9

    def test_ties_do_not_count(self):
        assert win_rate([1.0, 1.0], [1.0, 1.0]) == 0.0

    def test_all_improvements(self):
        assert win_rate([0.5, 0.5], [1.0, 1.0]) == 100.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            win_rate([1.0], [1.0, 2.0])

    def test_strictness_property(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=12).tolist()
        assert win_rate(x, x) == 0.0


class TestNormalizedMse:
    def test_two_methods(self):
        out = normalized_mse(np.array([[1.0], [3.0]]))
        np.testing.assert_allclose(out, [0.0, 1.0])

    def test_always_best_method_scores_zero(self):
        table = np.array([[1.0, 2.0, 0.5], [2.0, 4.0, 1.0], [3.0, 5.0, 2.0]])
        np.testing.assert_allclose(normalized_mse(table)[0], 0.0)

    def test_three_methods_linear(self):
        np.testing.assert_allclose(
            normalized_mse(np.array([[2.0], [3.0], [4.0]])), [0.0, 0.5, 1.0]
        )

    def test_constant_column_excluded_with_warning(self):
        warnings = []
        out = normalized_mse(np.array([[1.0, 5.0], [1.0, 6.0]]), warnings)
        np.testing.assert_allclose(out, [0.0, 1.0])
        assert warnings and "constant" in warnings[0]

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            table = rng.normal(size=(int(rng.integers(2, 5)), int(rng.integers(1, 6))))
            expected = []
            for i in range(table.shape[0]):
                vals = []
                for j in range(table.shape[1]):
                    col = table[:, j]
                    if col.max() > col.min():
                        vals.append((table[i, j] - col.min()) / (col.max() - col.min()))
                expected.append(sum(vals) / len(vals))
            np.testing.assert_allclose(normalized_mse(table), expected, atol=1e-12)


class TestSimilarity:
    def test_identical_states(self):
        h = [np.random.default_rng(0).normal(size=(2, 3, 4))]
        assert representation_similarity(h, h).similarity == 1.0

    def test_negated_states(self):
        h = [np.random.default_rng(1).normal(size=(2, 3))]
        assert abs(representation_similarity(h, [-h[0]]).similarity + 1.0) < 1e-12

    def test_cosine_arithmetic(self):
        report = representation_similarity(
            [np.array([1.0, 0.0])], [np.array([1.0, 1.0])]
        )
        assert abs(report.similarity - 1 / math.sqrt(2)) < 1e-12

    def test_scale_invariance_per_layer(self):
        h = np.random.default_rng(3).normal(size=(4, 5))
        report = representation_similarity([h * 7.3], [h])
        assert abs(report.similarity - 1.0) < 1e-12

    def test_zero_layer_flagged(self):
        report = representation_similarity(
            [np.zeros((2, 2)), np.ones((2, 2))], [np.ones((2, 2)), np.ones((2, 2))]
        )
        assert report.degenerate_layers == [0]
        assert report.per_layer[0] == 0.0


class TestEffectiveRank:
    def test_rank_one(self):
        h = np.outer(np.arange(1.0, 4.0), np.arange(1.0, 5.0))
        assert abs(effective_rank(h) - 1.0) < 1e-10

    def test_orthogonal_matrix(self):
        q, _ = np.linalg.qr(np.random.default_rng(4).normal(size=(3, 3)))
        assert abs(effective_rank(q) - 3.0) < 1e-10

    def test_entropy_arithmetic(self):
        # singular values (3, 1): p = (0.75, 0.25), erank = exp(H(p))
        h = np.diag([3.0, 1.0])
        expected = math.exp(-(0.75 * math.log(0.75) + 0.25 * math.log(0.25)))
        assert abs(effective_rank(h) - expected) < 1e-12
        assert abs(expected - 1.7548) < 1e-4

    def test_invariant_under_orthogonal_transforms(self):
        rng = np.random.default_rng(5)
        h = rng.normal(size=(5, 4))
        q1, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        q2, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        assert abs(effective_rank(q1 @ h @ q2) - effective_rank(h)) < 1e-8

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            effective_rank(np.zeros((3, 3)))

    def test_against_jacobi_svd_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            h = rng.normal(size=(int(rng.integers(2, 7)), int(rng.integers(2, 7))))
            sigma = np.sort(_jacobi_singular_values(h))[::-1]
            sigma = sigma[sigma > 1e-12 * sigma[0]]
            p = sigma / sigma.sum()
            expected = math.exp(-float(np.sum(p * np.log(p))))
            assert abs(effective_rank(h) - expected) < 1e-12


class TestAttribution:
    def _model(self):
        return ForecastModel(
            MlpBackbone(4, 2, 1, hidden_dim=6, encoder_layers=1, rng=frng.stream(0, "att"))
        )

    def test_zero_input_window_zero_attribution(self):
        model = self._model()
        importance, normalized = temporal_attribution(
            model, np.zeros((4, 1)), np.zeros((2, 1))
        )
        np.testing.assert_array_equal(importance, np.zeros(4))
        np.testing.assert_array_equal(normalized, np.zeros(4))

    def test_last_step_only_linear_model(self):
        # yhat = w * x_L: only the last step receives attribution
        model = ForecastModel(
            MlpBackbone(3, 1, 1, hidden_dim=2, encoder_layers=0,
                        window_centering=False, rng=frng.stream(1, "att"))
        )
        # pick weights: input proj selects x_t, decoder reads only step L
        model.backbone.input_proj.W.set_data(np.array([[1.0], [0.0]]))
        model.backbone.input_proj.b.set_data(np.zeros(2))
        dec = np.zeros((1, 6))
        dec[0, 4] = 2.0  # w = 2 on (step 3, unit 0)
        model.backbone.decoder.W.set_data(dec)
        x = np.array([[0.5], [1.5], [3.0]])
        y = np.array([[1.0]])
        importance, _ = temporal_attribution(model, x, y)
        assert importance[0] == 0.0 and importance[1] == 0.0
        # loss = (2*3 - 1)^2, dL/dx_L = 2*(6-1)*2 = 20, I_L = |20 * 3|
        assert abs(importance[2] - 60.0) < 1e-9

    def test_normalized_scores_sum_below_one(self):
        model = self._model()
        rng = np.random.default_rng(7)
        _, normalized = temporal_attribution(
            model, rng.normal(size=(4, 1)), rng.normal(size=(2, 1))
        )
        assert 0.0 <= normalized.sum() <= 1.0
        assert normalized.sum() > 0.999

    def test_channel_permutation_invariance(self):
        model = ForecastModel(
            MlpBackbone(3, 2, 4, hidden_dim=5, encoder_layers=1, rng=frng.stream(2, "att"))
        )
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 4))
        y = rng.normal(size=(2, 4))
        importance, _ = temporal_attribution(model, x, y)
        assert importance.shape == (3,)
        assert np.all(importance >= 0.0)


class TestContribution:
    def test_zero_adapter_output(self):
        assert text_contribution_ratio(np.zeros(4), np.ones(8)) == 0.0

    def test_equal_vectors_give_one(self):
        e = np.random.default_rng(9).normal(size=5)
        assert abs(text_contribution_ratio(e, e) - 1.0) < 1e-12

    def test_zero_embedding_rejected(self):
        with pytest.raises(ValueError):
            text_contribution_ratio(np.ones(3), np.zeros(3))

    def test_welch_and_cohen_formulas(self):
        a = [2.0, 4.0, 6.0]
        b = [1.0, 2.0, 3.0]
        va, vb = np.var(a, ddof=1), np.var(b, ddof=1)
        expected_t = (4.0 - 2.0) / math.sqrt(va / 3 + vb / 3)
        assert abs(welch_t(a, b) - expected_t) < 1e-12
        pooled = math.sqrt((2 * va + 2 * vb) / 4)
        assert abs(cohens_d(a, b) - (4.0 - 2.0) / pooled) < 1e-12

    def test_summary_groups(self):
        summary = contribution_summary(
            {"matching": [1.0, 2.0, 3.0], "contradicting": [0.5, 1.5], "irrelevant": [1.0]}
        )
        assert summary.group_means["matching"] == 2.0
        assert summary.group_counts == {"matching": 3, "contradicting": 2, "irrelevant": 1}
        assert summary.welch_t is not None and summary.cohens_d is not None

    def test_collection_requires_cfa(self):
        model = ForecastModel(
            MlpBackbone(4, 2, 1, hidden_dim=4, encoder_layers=1, rng=frng.stream(3, "c"))
        )
        with pytest.raises(ValueError):
            collect_contribution_ratios(model, None)


class TestEfficiency:
    def _models(self):
        l, h, c, d = 6, 4, 2, 16
        bb = MlpBackbone(l, h, c, hidden_dim=d, encoder_layers=2, rng=frng.stream(0, "e"))
        out = {"unimodal": ForecastModel(bb)}
        for strategy, positions in (
            ("additive", ("middle",)),
            ("concat", ("middle",)),
            ("gating", ("middle",)),
            ("cfa", ("middle",)),
        ):
            spec = FusionSpec(strategy, positions=positions, reduction=8)
            out[strategy] = ForecastModel.build(bb, spec, text_dim=8, rng=frng.stream(1, "e"))
        return out

    def test_unimodal_baseline_zero_overhead(self):
        rows = efficiency_report(self._models())
        base = next(r for r in rows if r.name == "unimodal")
        assert base.param_overhead_pct == 0.0 and base.flops_overhead_pct == 0.0

    def test_concat_params_exceed_additive(self):
        rows = {r.name: r for r in efficiency_report(self._models())}
        assert rows["concat"].parameter_count > rows["additive"].parameter_count

    def test_cfa_overhead_below_gating(self):
        rows = {r.name: r for r in efficiency_report(self._models())}
        assert rows["cfa"].param_overhead_pct < rows["gating"].param_overhead_pct
        assert rows["cfa"].flops_overhead_pct < rows["gating"].flops_overhead_pct

    def test_additive_adds_nothing_beyond_text_pipeline(self):
        rows = {r.name: r for r in efficiency_report(self._models())}
        assert rows["additive"].fusion_parameter_count == 0

    def test_missing_baseline_rejected(self):
        with pytest.raises(ValueError):
            efficiency_report({}, unimodal_key="unimodal")
