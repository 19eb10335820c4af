import math

import numpy as np
import pytest

import oracles
from albumdate.evaluation import (
    AblationTable,
    EvaluationReport,
    PhotoScores,
    ReportAuditError,
    aggregate_photo_vote,
    build_report,
    confusion_matrix,
    kofn_ablation,
    mean_abs_error,
    per_decade_accuracy,
    select_fixed_n,
    time_distance_accuracy,
    topk_accuracy,
)
from albumdate.models import ensemble_predict


class TestTimeDistance:
    def test_five_year_tolerance(self):
        assert time_distance_accuracy([1927], [1932], 5) == 1.0

    def test_exact(self):
        assert time_distance_accuracy([1927], [1932], 0) == 0.0

    @pytest.mark.parametrize("d", [0, 5, 10])
    def test_perfect(self, d):
        assert time_distance_accuracy([1930, 1961, 1999], [1930, 1961, 1999], d) == 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            time_distance_accuracy([1930], [1930, 1931], 0)
        with pytest.raises(ValueError):
            time_distance_accuracy([], [], 0)
        with pytest.raises(ValueError):
            time_distance_accuracy([1930], [1930], -1)

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        p, t = rng.integers(1930, 2000, 300), rng.integers(1930, 2000, 300)
        for d in (0, 1, 5, 10, 69):
            assert time_distance_accuracy(p, t, d) == pytest.approx(oracles.time_distance_accuracy(p, t, d), abs=1e-12)


class TestMeanError:
    def test_zero(self):
        assert mean_abs_error([1950, 1960], [1950, 1960]) == (0.0, 0.0)

    def test_population_std(self):
        assert mean_abs_error([1950, 1960], [1950, 1950]) == pytest.approx((5.0, 5.0))

    def test_single_pair(self):
        assert mean_abs_error([1950], [1953]) == pytest.approx((3.0, 0.0))


class TestTopK:
    def test_hand_ranking(self):
        assert topk_accuracy([[0.5, 0.3, 0.2]], [1], 1) == 0.0
        assert topk_accuracy([[0.5, 0.3, 0.2]], [1], 2) == 1.0

    def test_tie_goes_to_lower_index(self):
        assert topk_accuracy([[0.4, 0.4, 0.2]], [1], 1) == 0.0
        assert topk_accuracy([[0.4, 0.4, 0.2]], [0], 1) == 1.0

    def test_k_equals_classes(self):
        rng = np.random.default_rng(1)
        assert topk_accuracy(rng.dirichlet(np.ones(5), 20), rng.integers(0, 5, 20), 5) == 1.0

    @pytest.mark.parametrize("k", [0, 4])
    def test_out_of_range(self, k):
        with pytest.raises(ValueError):
            topk_accuracy([[0.5, 0.3, 0.2]], [0], k)

    def test_matches_oracle_with_ties(self):
        rng = np.random.default_rng(2)
        probs = rng.integers(0, 4, (200, 6)).astype(float)  # coarse values force ties
        labels = rng.integers(0, 6, 200)
        for k in range(1, 7):
            assert topk_accuracy(probs, labels, k) == pytest.approx(oracles.topk_accuracy(probs, labels, k), abs=1e-12)


class TestPhotoVote:
    def test_hand_example(self):
        assert aggregate_photo_vote([[0.6, 0.4], [0.2, 0.8]]) == 1

    def test_single(self):
        assert aggregate_photo_vote([[0.1, 0.7, 0.2]]) == 1

    def test_permutation(self):
        v = [[0.6, 0.4], [0.2, 0.8], [0.5, 0.5]]
        assert aggregate_photo_vote(v) == aggregate_photo_vote(v[::-1])

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate_photo_vote([])

    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            v = rng.dirichlet(np.ones(7), rng.integers(1, 6))
            assert aggregate_photo_vote(v) == oracles.photo_vote(v.tolist())


class TestConfusion:
    def test_hand_built(self):
        m = confusion_matrix([0, 2, 2], [0, 1, 2], 3)
        np.testing.assert_array_equal(m, [[1, 0, 0], [0, 0, 1], [0, 0, 1]])

    def test_perfect_is_diagonal(self):
        m = confusion_matrix([0, 1, 1, 2], [0, 1, 1, 2], 3)
        np.testing.assert_array_equal(m, np.diag([1, 2, 1]))

    def test_row_sums_and_oracle(self):
        rng = np.random.default_rng(4)
        p, t = rng.integers(0, 9, 100), rng.integers(0, 9, 100)
        m = confusion_matrix(p, t, 9)
        np.testing.assert_array_equal(m, oracles.confusion_matrix(p, t, 9))
        np.testing.assert_array_equal(m.sum(1), np.bincount(t, minlength=9))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            confusion_matrix([3], [0], 3)


class TestPerDecade:
    def test_single_decade(self):
        assert per_decade_accuracy([1951, 1955], [1951, 1955]) == {1950: (1.0, 2)}

    def test_six_samples(self):
        preds = [1931, 1935, 1950, 1958, 1990, 1999]
        truths = [1931, 1936, 1950, 1957, 1991, 1999]
        got = per_decade_accuracy(preds, truths)
        assert got == {1930: (0.5, 2), 1950: (0.5, 2), 1990: (0.5, 2)}
        assert sum(c for _, c in got.values()) == 6

    def test_outside_range(self):
        with pytest.raises(ValueError):
            per_decade_accuracy([1950], [1925])


class TestSelectFixedN:
    def test_conjunctive(self):
        faces, people = {"a": 8, "b": 8, "c": 7}, {"a": 8, "b": 7, "c": 8}
        assert select_fixed_n(["a", "b", "c"], faces, people, 8) == ["a"]

    def test_disjunctive_flag(self):
        faces, people = {"a": 8, "b": 8, "c": 7}, {"a": 8, "b": 7, "c": 8}
        assert select_fixed_n(["a", "b", "c"], faces, people, 8, mode="any") == ["a", "b", "c"]

    def test_singletons(self):
        ids = ["a", "b"]
        assert select_fixed_n(ids, {"a": 1, "b": 1}, {"a": 1, "b": 1}, 1) == ids

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            select_fixed_n([], {}, {}, 1, mode="some")


def _random_photos(rng, count, n, classes):
    photos = []
    for i in range(count):
        photos.append(PhotoScores(f"p{i}", int(rng.integers(classes)), rng.dirichlet(np.ones(classes)),
                                  rng.dirichlet(np.ones(classes), n), rng.dirichlet(np.ones(classes), n)))
    return photos


class TestAblation:
    def test_subset_counts_for_eight(self):
        rng = np.random.default_rng(5)
        table = kofn_ablation(_random_photos(rng, 2, 8, 4), 8)
        assert table.subset_counts == [8, 28, 56, 70, 56, 28, 8, 1]

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
    def test_matches_literal_enumeration(self, n):
        rng = np.random.default_rng(n)
        photos = _random_photos(rng, 6, n, 3)
        got = kofn_ablation(photos, n)
        want = oracles.kofn_ablation([(p.label, p.image.tolist(), p.faces.tolist(), p.people.tolist())
                                      for p in photos], n)
        for k in range(1, n + 1):
            for name, value in want[k].items():
                assert got.rows[k][name] == pytest.approx(value, abs=1e-12), (k, name)

    def test_full_k_equals_ensemble(self):
        rng = np.random.default_rng(6)
        photos = _random_photos(rng, 20, 3, 4)
        table = kofn_ablation(photos, 3)
        hits = [int(np.argmax(ensemble_predict(p.image, p.faces, p.people)) == p.label) for p in photos]
        assert table.rows[3]["both w/ image"] == pytest.approx(np.mean(hits), abs=1e-12)

    def test_variant_skips_photos_with_wrong_count(self):
        rng = np.random.default_rng(7)
        photos = _random_photos(rng, 3, 2, 3)
        photos[0].people = photos[0].people[:1]
        table = kofn_ablation(photos, 2)
        assert table.photo_counts["faces w/o image"] == 3
        assert table.photo_counts["people w/o image"] == 2
        assert table.photo_counts["both w/ image"] == 2

    def test_empty_subset(self):
        with pytest.raises(ValueError, match="empty"):
            kofn_ablation([], 8)

    def test_json_round_trip(self):
        rng = np.random.default_rng(8)
        table = kofn_ablation(_random_photos(rng, 3, 2, 3), 2)
        again = AblationTable.from_json(table.to_json())
        assert again.rows == table.rows and again.subset_counts == table.subset_counts


class TestReport:
    def _dating(self, seed=0, n=50):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 70, n)
        probs = rng.dirichlet(np.ones(70) * 0.3, n)
        probs[np.arange(n // 2), labels[: n // 2]] += 1.0  # half the photos right
        return build_report("dating", "m", probs / probs.sum(1, keepdims=True), labels), probs, labels

    def test_dating_metrics_match_oracles(self):
        report, probs, labels = self._dating()
        preds = probs.argmax(1)
        py, ty = preds + 1930, labels + 1930
        for d in (0, 5, 10):
            assert report.accuracy_at[d] == pytest.approx(oracles.time_distance_accuracy(py, ty, d), abs=1e-12)
        assert report.accuracy_at[0] == pytest.approx(np.mean(preds == labels), abs=1e-12)
        np.testing.assert_allclose(report.mean_error, oracles.mean_abs_error(py, ty), atol=1e-12)
        assert report.exact_accuracy == pytest.approx(np.trace(report.confusion) / report.n_samples)

    def test_context_has_no_year_metrics(self):
        rng = np.random.default_rng(1)
        report = build_report("context", "c", rng.dirichlet(np.ones(9), 30), rng.integers(0, 9, 30))
        assert report.accuracy_at == {} and report.mean_error is None
        assert set(report.topk) == {1, 2, 3, 4, 5}

    def test_wrong_width(self):
        with pytest.raises(ValueError):
            build_report("context", "c", np.full((2, 70), 1 / 70), [0, 1])

    def test_json_round_trip(self, tmp_path):
        report, _, _ = self._dating()
        report.save(tmp_path / "r" / "m.json")
        again = EvaluationReport.load(tmp_path / "r" / "m.json")
        again.audit()
        assert again.to_json() == report.to_json()

    def test_audit_catches_non_monotone(self):
        report, _, _ = self._dating()
        report.accuracy_at[10] = report.accuracy_at[5] - 0.1
        with pytest.raises(ReportAuditError):
            report.audit()

    def test_audit_catches_topk(self):
        report, _, _ = self._dating()
        report.topk[3] = report.topk[2] - 0.01
        with pytest.raises(ReportAuditError):
            report.audit()

    def test_audit_catches_confusion_total(self):
        report, _, _ = self._dating()
        report.n_samples += 1
        with pytest.raises(ReportAuditError):
            report.audit()

    def test_nan_free(self):
        report, _, _ = self._dating()
        assert all(math.isfinite(v) for v in report.topk.values())
