"""Metric-suite tests: masked-confidence scores, overlap, rank
aggregation against the published reference table, and the per-method
evaluation loop."""
import numpy as np
import pytest

from cape.metrics import (
    HIGHER_BETTER,
    METRIC_COLUMNS,
    MaskMode,
    Method,
    MethodEvaluation,
    adcc,
    adcc_from_terms,
    add_metric,
    attention_mass_fraction,
    avg_drop,
    avg_increase,
    borda_count,
    build_report,
    evaluate_method,
    iou_top2,
    load_published_rankings,
    masked_predict,
    mean_confidence,
    prediction_agreement,
    report_to_csv,
    report_to_json,
)
from cape.tensor import softmax_axis


def channel_mean_predictor(image: np.ndarray) -> np.ndarray:
    """Two-class distribution from the red/blue channel means."""
    logits = np.array([image[:, :, 0].mean(), image[:, :, 2].mean()]) * 8.0
    return softmax_axis(logits, 0)


def corner_explainer(image: np.ndarray, class_index: int) -> np.ndarray:
    emap = np.zeros(image.shape[:2])
    emap[:2, :2] = 1.0
    return emap


def image_stack(n=4, size=8, seed=0):
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(n, size, size, 3))


class TestMaskedPredict:
    def test_all_ones_keep_preserves_confidence(self):
        image = image_stack(1)[0]
        y = channel_mean_predictor(image)[0]
        out = masked_predict(
            channel_mean_predictor, image, np.ones(image.shape[:2]), 0, MaskMode.KEEP
        )
        assert out == y

    def test_all_ones_delete_scores_blank_image(self):
        image = image_stack(1)[0]
        expected = channel_mean_predictor(np.zeros_like(image))[1]
        out = masked_predict(
            channel_mean_predictor, image, np.ones(image.shape[:2]), 1, MaskMode.DELETE
        )
        assert out == expected

    def test_keep_equals_delete_of_complement(self):
        image = image_stack(1, seed=1)[0]
        emap = np.random.default_rng(2).uniform(0.0, 1.0, size=image.shape[:2])
        keep = masked_predict(channel_mean_predictor, image, emap, 0, MaskMode.KEEP)
        delete = masked_predict(
            channel_mean_predictor, image, 1.0 - emap, 0, MaskMode.DELETE
        )
        assert keep == pytest.approx(delete, abs=1e-15)

    def test_resolution_mismatch_rejected(self):
        image = image_stack(1)[0]
        with pytest.raises(ValueError, match="resolution"):
            masked_predict(
                channel_mean_predictor, image, np.ones((3, 3)), 0, MaskMode.KEEP
            )


class TestScalarMetrics:
    def test_avg_drop_cases(self):
        assert avg_drop(0.7, 0.7) == 0.0
        assert avg_drop(0.8, 0.4) == pytest.approx(0.5, abs=1e-15)
        assert avg_drop(0.3, 0.9) == 0.0
        with pytest.raises(ValueError, match="positive"):
            avg_drop(0.0, 0.5)

    def test_avg_increase_cases(self):
        assert avg_increase(0.3, 0.5) == 1.0
        assert avg_increase(0.5, 0.5) == 0.0
        assert avg_increase(0.9, 0.1) == 0.0

    def test_add_metric_cases(self):
        assert add_metric(0.6, 0.0) == pytest.approx(1.0, abs=1e-15)
        assert add_metric(0.6, 0.6) == 0.0
        assert add_metric(0.8, 0.2) == pytest.approx(0.75, abs=1e-15)
        with pytest.raises(ValueError, match="positive"):
            add_metric(0.0, 0.1)

    def test_adcc_terms_cases(self):
        assert adcc_from_terms(0.0, 1.0, 0.0) == pytest.approx(1.0, abs=1e-15)
        assert adcc_from_terms(0.0, 1.0, 1.0) == 0.0
        assert adcc_from_terms(0.5, 1.0, 0.0) == pytest.approx(0.75, abs=1e-15)
        assert adcc_from_terms(1.0, 1.0, 0.0) == 0.0
        assert adcc_from_terms(0.2, 0.0, 0.3) == 0.0

    def test_full_adcc_with_all_ones_map_is_zero(self):
        image = image_stack(1, seed=3)[0]
        emap = np.ones(image.shape[:2])
        out = adcc(image, emap, 0, channel_mean_predictor, lambda img, c: emap)
        assert out == 0.0


class TestIouTop2:
    def test_identical_maps_give_one(self):
        emap = np.random.default_rng(4).uniform(0.0, 1.0, size=(6, 6))
        assert iou_top2(emap, emap) == 1.0

    def test_disjoint_supports_give_zero(self):
        a = np.zeros((4, 4))
        b = np.zeros((4, 4))
        a[0, 0] = 1.0
        b[3, 3] = 1.0
        assert iou_top2(a, b) == 0.0

    def test_half_subset_gives_half(self):
        a = np.zeros((4, 4))
        b = np.zeros((4, 4))
        a[0, :2] = 1.0
        b[0, :4] = 1.0
        assert iou_top2(a, b) == pytest.approx(0.5, abs=1e-15)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(0.0, 1.0, size=(5, 5))
        b = rng.uniform(0.0, 1.0, size=(5, 5))
        assert iou_top2(a, b) == iou_top2(b, a)

    def test_empty_union_gives_zero(self):
        assert iou_top2(np.zeros((3, 3)), np.zeros((3, 3))) == 0.0

    def test_support_threshold_is_strict(self):
        a = np.zeros((2, 2))
        a[0, 0] = 1.0
        a[0, 1] = 0.2  # exactly at 0.2 * max: outside the support
        b = np.zeros((2, 2))
        b[0, 1] = 1.0
        assert iou_top2(a, b) == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shapes"):
            iou_top2(np.zeros((2, 2)), np.zeros((3, 3)))


class TestBordaCount:
    def test_single_metric_awards_follow_rank(self):
        points = borda_count(np.array([[1.0], [2.0], [3.0]]), [True])
        np.testing.assert_array_equal(points, [1, 2, 3])

    def test_lower_better_orientation_flips(self):
        points = borda_count(np.array([[1.0], [2.0], [3.0]]), [False])
        np.testing.assert_array_equal(points, [3, 2, 1])

    def test_fourth_place_scores_nothing(self):
        points = borda_count(np.array([[4.0], [3.0], [2.0], [1.0]]), [True])
        np.testing.assert_array_equal(points, [3, 2, 1, 0])

    def test_ties_share_the_better_rank(self):
        points = borda_count(np.array([[3.0], [3.0], [1.0]]), [True])
        np.testing.assert_array_equal(points, [3, 3, 1])

    def test_invariant_under_monotone_column_transforms(self):
        rng = np.random.default_rng(6)
        scores = rng.uniform(1.0, 5.0, size=(6, 3))
        flags = [True, False, True]
        base = borda_count(scores, flags)
        warped = scores.copy()
        warped[:, 0] = np.exp(warped[:, 0])
        warped[:, 1] = warped[:, 1] ** 3
        warped[:, 2] = 10.0 * warped[:, 2] + 2.0
        np.testing.assert_array_equal(borda_count(warped, flags), base)

    @pytest.mark.parametrize("dataset", ["CUB", "ImageNet"])
    def test_published_reference_tables_reproduce_exactly(self, dataset):
        table = load_published_rankings()
        assert table["columns"] == list(METRIC_COLUMNS)
        assert table["higher_better"] == [HIGHER_BETTER[m] for m in METRIC_COLUMNS]
        block = table["datasets"][dataset]
        points = borda_count(np.array(block["scores"]), table["higher_better"])
        np.testing.assert_array_equal(points, block["expected_bc"])

    def test_validation(self):
        with pytest.raises(ValueError, match="nonempty"):
            borda_count(np.zeros((0, 2)), [True, False])
        with pytest.raises(ValueError, match="orientation"):
            borda_count(np.zeros((2, 2)), [True])


class TestAgreementAndConfidence:
    def test_agreement_with_self_is_full(self):
        images = image_stack(5, seed=7)
        assert prediction_agreement(
            channel_mean_predictor, channel_mean_predictor, images
        ) == 100.0

    def test_complementary_predictors_never_agree(self):
        images = image_stack(5, seed=8)
        flipped = lambda image: channel_mean_predictor(image)[::-1]
        assert prediction_agreement(channel_mean_predictor, flipped, images) == 0.0

    def test_agreement_matches_brute_force_recount(self):
        images = image_stack(9, seed=9)
        other = lambda image: softmax_axis(
            np.array([image[:, :, 1].mean(), image[:, :, 0].mean()]) * 8.0, 0
        )
        expected = np.mean(
            [
                float(
                    np.argmax(channel_mean_predictor(img)) == np.argmax(other(img))
                )
                for img in images
            ]
        )
        got = prediction_agreement(channel_mean_predictor, other, images)
        assert got == pytest.approx(100.0 * expected, abs=1e-12)
        assert got == prediction_agreement(other, channel_mean_predictor, images)

    def test_mean_confidence_of_uniform_predictor(self):
        images = image_stack(3, seed=10)
        assert mean_confidence(lambda img: np.array([0.5, 0.5]), images) == 50.0

    def test_mean_confidence_of_certain_predictor(self):
        images = image_stack(3, seed=11)
        assert mean_confidence(lambda img: np.array([0.0, 1.0]), images) == 100.0

    def test_mean_confidence_flattens_with_temperature(self):
        images = image_stack(3, seed=12)
        predict = lambda img: softmax_axis(
            np.array([img.sum(), 1.0, -1.0]), 0, temperature=1e9
        )
        assert mean_confidence(predict, images) == pytest.approx(100.0 / 3.0, abs=1e-3)

    def test_empty_stacks_rejected(self):
        empty = np.zeros((0, 4, 4, 3))
        with pytest.raises(ValueError, match="empty"):
            prediction_agreement(channel_mean_predictor, channel_mean_predictor, empty)
        with pytest.raises(ValueError, match="empty"):
            mean_confidence(channel_mean_predictor, empty)


class TestAttentionMassFraction:
    def test_all_mass_inside_region(self):
        emap = np.zeros((4, 4))
        emap[1, 1] = 0.7
        region = np.zeros((4, 4), dtype=bool)
        region[1, 1] = True
        assert attention_mass_fraction(emap, region) == 1.0

    def test_even_split(self):
        emap = np.ones((2, 2))
        region = np.array([[True, True], [False, False]])
        assert attention_mass_fraction(emap, region) == pytest.approx(0.5, abs=1e-15)

    def test_zero_map_gives_zero(self):
        assert attention_mass_fraction(np.zeros((3, 3)), np.ones((3, 3), dtype=bool)) == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="differ"):
            attention_mass_fraction(np.zeros((2, 2)), np.ones((3, 3), dtype=bool))


class TestEvaluateMethod:
    def test_all_ones_explainer_scores_zero_drop_and_zero_composite(self):
        images = image_stack(6, seed=13)
        method = Method(
            "flat",
            channel_mean_predictor,
            lambda image, c: np.ones(image.shape[:2]),
        )
        result = evaluate_method(method, images)
        assert result.mean_ad == 0.0
        assert result.ic == 0.0
        assert result.mean_adcc == 0.0
        assert result.excluded_count == 0
        for record in result.records:
            assert record.o == record.y
            assert record.ad == 0.0
            assert record.ic == 0.0
            assert record.com == 1.0

    def test_records_carry_consistent_terms(self):
        images = image_stack(5, seed=14)
        method = Method("corner", channel_mean_predictor, corner_explainer)
        result = evaluate_method(method, images)
        assert result.image_count == 5
        for record in result.records:
            assert 0.0 <= record.y <= 1.0
            assert record.ad == avg_drop(record.y, record.o)
            assert record.ic == avg_increase(record.y, record.o)
            assert record.add == add_metric(record.y, record.d)
            assert record.adcc == adcc_from_terms(record.ad, record.coh, record.com)
            assert record.iou == 1.0  # class-independent explainer overlaps itself

    def test_vanishing_confidence_excluded_from_ratio_means(self):
        images = image_stack(3, seed=15)
        method = Method(
            "tiny",
            lambda image: np.array([1e-9, 1e-10]),
            corner_explainer,
        )
        result = evaluate_method(method, images)
        assert result.excluded_count == 3
        assert np.isnan(result.mean_ad)
        assert np.isnan(result.mean_add)
        assert result.ic == 0.0
        for record in result.records:
            assert record.excluded
            assert np.isnan(record.ad)

    def test_single_positive_class_skips_overlap(self):
        images = image_stack(3, seed=16)
        method = Method(
            "point-mass",
            lambda image: np.array([1.0, 0.0]),
            corner_explainer,
        )
        result = evaluate_method(method, images)
        assert np.isnan(result.miou)
        for record in result.records:
            assert np.isnan(record.iou)

    def test_empty_stack_rejected(self):
        method = Method("corner", channel_mean_predictor, corner_explainer)
        with pytest.raises(ValueError, match="empty"):
            evaluate_method(method, np.zeros((0, 4, 4, 3)))


class TestReport:
    @staticmethod
    def evaluations():
        images = image_stack(4, seed=17)
        methods = [
            Method("corner", channel_mean_predictor, corner_explainer),
            Method("flat", channel_mean_predictor, lambda img, c: np.ones(img.shape[:2])),
        ]
        return [evaluate_method(m, images) for m in methods]

    def test_build_report_attaches_rank_points(self):
        evaluations = self.evaluations()
        report = build_report("unit", evaluations)
        assert report.dataset_id == "unit"
        assert report.image_count == 4
        scores = np.array([e.metric_row() for e in evaluations])
        expected = borda_count(scores, [HIGHER_BETTER[m] for m in METRIC_COLUMNS])
        np.testing.assert_array_equal([row.borda for row in report.rows], expected)

    def test_empty_report_rejected(self):
        with pytest.raises(ValueError, match="no method"):
            build_report("unit", [])

    def test_csv_layout(self, tmp_path):
        report = build_report("unit", self.evaluations())
        path = tmp_path / "report.csv"
        report_to_csv(report, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "Method," + ",".join(METRIC_COLUMNS) + ",BC"
        assert len(lines) == 3
        assert lines[1].startswith("corner,")

    def test_json_round_trip(self, tmp_path):
        import json

        report = build_report("unit", self.evaluations())
        path = tmp_path / "report.json"
        report_to_json(report, path)
        payload = json.loads(path.read_text())
        assert payload["dataset_id"] == "unit"
        assert [m["method"] for m in payload["methods"]] == ["corner", "flat"]
        for row, entry in zip(report.rows, payload["methods"]):
            assert entry["BC"] == row.borda
            assert entry["AD"] == pytest.approx(row.mean_ad)
