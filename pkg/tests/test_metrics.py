from fractions import Fraction

import numpy as np
import pytest

from bruteforce import bf_auc, bf_average_recall, bf_map_at, exact_tiou
from semitap.errors import ValidationError
from semitap.metrics import (
    AR_TIOU_THRESHOLDS,
    EvalReport,
    ar_curve,
    auc,
    average_recall,
    map_at,
    tiou,
)


def random_instance(rng, max_props=10, max_gts=3, num_classes=3):
    """One randomized corpus: <= 2 videos, small proposal/gt sets."""
    videos = [f"v{i}" for i in range(int(rng.integers(1, 3)))]
    props, dets, gts, gts_cls = {}, {}, {}, {}
    for vid in videos:
        n_p = int(rng.integers(0, max_props + 1))
        starts = rng.uniform(0, 20, size=n_p)
        lens = rng.uniform(0.5, 10, size=n_p)
        scores = rng.uniform(0, 1, size=n_p)
        classes = rng.integers(0, num_classes, size=n_p)
        props[vid] = [(float(s), float(s + l), float(sc))
                      for s, l, sc in zip(starts, lens, scores)]
        dets[vid] = [(float(s), float(s + l), int(c), float(sc))
                     for s, l, c, sc in zip(starts, lens, classes, scores)]
        n_g = int(rng.integers(1, max_gts + 1))
        g_starts = rng.uniform(0, 20, size=n_g)
        g_lens = rng.uniform(0.5, 10, size=n_g)
        g_classes = rng.integers(0, num_classes, size=n_g)
        gts[vid] = [(float(s), float(s + l)) for s, l in zip(g_starts, g_lens)]
        gts_cls[vid] = [(float(s), float(s + l), int(c))
                        for s, l, c in zip(g_starts, g_lens, g_classes)]
    return props, dets, gts, gts_cls


class TestTiou:
    def test_identical(self):
        assert tiou((0.0, 10.0), (0.0, 10.0)) == 1.0

    def test_hand_value(self):
        assert tiou((0.0, 4.0), (2.0, 6.0)) == pytest.approx(2.0 / 6.0)

    def test_disjoint(self):
        assert tiou((0.0, 1.0), (5.0, 6.0)) == 0.0

    def test_symmetry_and_bounds(self, rng):
        for _ in range(1000):
            a = tuple(sorted(rng.uniform(0, 10, 2) + [0.0, 0.5]))
            b = tuple(sorted(rng.uniform(0, 10, 2) + [0.0, 0.5]))
            v = tiou(a, b)
            assert v == tiou(b, a)
            assert 0.0 <= v <= 1.0

    def test_exact_rational_oracle(self, rng):
        """Float tiou vs exact Fraction arithmetic on eighth-unit endpoints."""
        for _ in range(1000):
            a0, b0 = sorted(int(x) for x in rng.integers(0, 64, 2) + np.array([0, 1]))
            c0, d0 = sorted(int(x) for x in rng.integers(0, 64, 2) + np.array([0, 1]))
            a = (a0 / 8.0, (b0 + 1) / 8.0)
            b = (c0 / 8.0, (d0 + 1) / 8.0)
            exact = exact_tiou((Fraction(a0, 8), Fraction(b0 + 1, 8)),
                               (Fraction(c0, 8), Fraction(d0 + 1, 8)))
            assert abs(tiou(a, b) - float(exact)) < 1e-9

    def test_degenerate_rejected(self):
        with pytest.raises(ValidationError):
            tiou((3.0, 3.0), (0.0, 1.0))


class TestAverageRecall:
    def test_perfect_single(self):
        assert average_recall({"v": [(0.0, 10.0, 0.9)]}, {"v": [(0.0, 10.0)]}, an=1) == 1.0

    def test_exactly_half_overlap(self):
        """tIoU exactly 0.5 recalls only the theta=0.5 threshold -> AR = 0.1."""
        ar = average_recall({"v": [(0.0, 5.0, 0.9)]}, {"v": [(0.0, 10.0)]}, an=1)
        assert ar == pytest.approx(0.1)

    def test_no_proposals(self):
        assert average_recall({"v": []}, {"v": [(0.0, 10.0)]}, an=5) == 0.0

    def test_an_validation(self):
        with pytest.raises(ValidationError):
            average_recall({"v": []}, {"v": [(0.0, 1.0)]}, an=0)

    def test_top_an_truncation(self):
        # good proposal ranked below the AN cut must not count
        props = {"v": [(50.0, 60.0, 0.9), (0.0, 10.0, 0.1)]}
        gts = {"v": [(0.0, 10.0)]}
        assert average_recall(props, gts, an=1) == 0.0
        assert average_recall(props, gts, an=2) == 1.0

    def test_matches_bruteforce(self, rng):
        for _ in range(400):
            props, _, gts, _ = random_instance(rng)
            an = int(rng.integers(1, 12))
            got = average_recall(props, gts, an)
            expect = bf_average_recall(props, gts, an, AR_TIOU_THRESHOLDS)
            assert got == pytest.approx(expect, abs=1e-9)

    def test_monotone_in_an(self, rng):
        for _ in range(100):
            props, _, gts, _ = random_instance(rng)
            values = [average_recall(props, gts, an) for an in range(1, 12)]
            assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))


class TestAuc:
    def test_perfect_recall_curve(self):
        assert auc({"v": [(0.0, 10.0, 1.0)]}, {"v": [(0.0, 10.0)]}, an_max=10) == 1.0

    def test_two_point_average(self):
        """AR@1 = 0, AR@2 = 1 with an_max=2 -> AUC = 0.5."""
        props = {"v": [(50.0, 60.0, 0.9), (0.0, 10.0, 0.1)]}
        gts = {"v": [(0.0, 10.0)]}
        assert auc(props, gts, an_max=2) == pytest.approx(0.5)

    def test_matches_bruteforce(self, rng):
        for _ in range(60):
            props, _, gts, _ = random_instance(rng)
            got = auc(props, gts, an_max=8)
            expect = bf_auc(props, gts, 8, AR_TIOU_THRESHOLDS)
            assert got == pytest.approx(expect, abs=1e-9)

    def test_curve_equals_pointwise_ar(self, rng):
        props, _, gts, _ = random_instance(rng)
        curve = ar_curve(props, gts, an_max=6)
        for an in range(1, 7):
            assert curve[an - 1] == pytest.approx(average_recall(props, gts, an), abs=1e-12)


class TestMapAt:
    def test_single_correct_detection(self):
        dets = {"v": [(0.0, 10.0, 1, 0.9)]}
        gts = {"v": [(0.0, 10.0, 1)]}
        assert map_at(dets, gts, 0.5) == 1.0

    def test_wrong_then_right(self):
        """Higher-scored miss then a hit: precision 1/2 at recall 1 -> AP 0.5."""
        dets = {"v": [(50.0, 55.0, 0, 0.9), (0.0, 10.0, 0, 0.5)]}
        gts = {"v": [(0.0, 10.0, 0)]}
        assert map_at(dets, gts, 0.5) == pytest.approx(0.5)

    def test_empty_detections(self):
        assert map_at({"v": []}, {"v": [(0.0, 10.0, 0)]}, 0.5) == 0.0

    def test_class_confusion_not_matched(self):
        dets = {"v": [(0.0, 10.0, 1, 0.9)]}
        gts = {"v": [(0.0, 10.0, 0)]}
        assert map_at(dets, gts, 0.5) == 0.0

    def test_matches_bruteforce(self, rng):
        for _ in range(400):
            _, dets, _, gts_cls = random_instance(rng)
            th = float(rng.choice([0.3, 0.5, 0.7]))
            got = map_at(dets, gts_cls, th)
            expect = bf_map_at(dets, gts_cls, th)
            assert got == pytest.approx(expect, abs=1e-9)


class TestScoreScaleInvariance:
    def test_all_metrics_rank_only(self, rng):
        """Positive rescaling of every score leaves AR, AUC, and mAP unchanged."""
        for _ in range(50):
            props, dets, gts, gts_cls = random_instance(rng)
            scale = float(rng.uniform(0.1, 90.0))
            props2 = {v: [(s, e, sc * scale) for s, e, sc in ps] for v, ps in props.items()}
            dets2 = {v: [(s, e, c, sc * scale) for s, e, c, sc in ds] for v, ds in dets.items()}
            assert average_recall(props2, gts, 5) == pytest.approx(
                average_recall(props, gts, 5), abs=1e-12)
            assert auc(props2, gts, 6) == pytest.approx(auc(props, gts, 6), abs=1e-12)
            assert map_at(dets2, gts_cls, 0.5) == pytest.approx(
                map_at(dets, gts_cls, 0.5), abs=1e-12)


class TestEvalReport:
    def test_validation_catches_bad_values(self):
        r = EvalReport(ar_at_an={1: 0.2, 5: 0.1}, auc=0.5, map_at_tiou={})
        with pytest.raises(ValidationError):
            r.validate()
        r2 = EvalReport(ar_at_an={1: 0.2}, auc=1.5, map_at_tiou={})
        with pytest.raises(ValidationError):
            r2.validate()

    def test_json_round_trip_keys(self):
        r = EvalReport(ar_at_an={1: 0.1, 100: 0.4}, auc=0.3,
                       map_at_tiou={0.5: 0.2}, per_video_recall={"v0": 1.0})
        d = r.to_dict()
        assert d["ar_at_an"]["100"] == 0.4
        assert d["map_at_tiou"]["0.50"] == 0.2
