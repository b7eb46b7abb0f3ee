"""Metric engines vs independent oracles, plus dataset adapter round-trips."""

import json

import numpy as np
import pytest

from epimatch.errors import (
    DegenerateInput,
    MalformedMatrix,
    MalformedRecord,
    MissingFile,
)
from epimatch.evaluation import (
    HomographyGT,
    MetricReport,
    PairRecord,
    PoseGT,
    homography_accuracy,
    load_hpatches_sequence,
    load_pose_pairs,
    matching_precision,
    mma,
    pose_auc,
    pose_error_for_pair,
    ransac_fundamental,
    summarize_homography,
    summarize_mma,
    summarize_pose,
    synth_scene,
)
from epimatch.geometry import CameraIntrinsics
from epimatch.synthetic import write_hpatches_sequence, write_pose_pairs

from conftest import fmat_distance, make_two_view_scene


def random_homography(rng):
    h = np.eye(3) + rng.normal(scale=0.08, size=(3, 3))
    h[2, :2] = rng.normal(scale=1e-4, size=2)
    h[2, 2] = 1.0
    return h


def project(h, pts):
    ph = np.hstack([pts, np.ones((len(pts), 1))]) @ h.T
    return ph[:, :2] / ph[:, 2:3]


def auc_breakpoint_oracle(errors, threshold):
    """Numerical CDF integration on a grid refined at every jump point.

    The empirical CDF is constant between consecutive error values, so
    integrating segment-by-segment with midpoint evaluation is exact while
    remaining an independent numerical procedure.
    """
    errors = np.asarray(errors, dtype=float)
    n = errors.size
    cuts = np.concatenate([[0.0], np.sort(errors[errors <= threshold]), [threshold]])
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        if hi <= lo:
            continue
        mid = 0.5 * (lo + hi)
        total += (errors <= mid).sum() / n * (hi - lo)
    return total / threshold


class TestMma:
    def test_exact_matches_score_one(self, rng):
        h = random_homography(rng)
        pts_a = rng.uniform(10, 200, size=(40, 2))
        res = mma(pts_a, project(h, pts_a), h)
        np.testing.assert_array_equal(res.fractions, np.ones(10))
        assert not res.empty

    def test_constant_two_pixel_offset(self, rng):
        # Axis-aligned offsets on integer points keep the error exactly 2.0.
        pts_a = rng.integers(10, 200, size=(25, 2)).astype(np.float64)
        offsets = np.zeros((25, 2))
        axis = rng.integers(0, 2, size=25)
        sign = rng.choice([-2.0, 2.0], size=25)
        offsets[np.arange(25), axis] = sign
        res = mma(pts_a, pts_a + offsets, np.eye(3))
        assert res.fractions[0] == 0.0
        np.testing.assert_array_equal(res.fractions[1:], np.ones(9))

    def test_random_matches_equal_count_oracle(self, rng):
        for _ in range(20):
            h = random_homography(rng)
            n = int(rng.integers(1, 60))
            pts_a = rng.uniform(0, 250, size=(n, 2))
            pts_b = rng.uniform(0, 250, size=(n, 2))
            res = mma(pts_a, pts_b, h)
            mapped = project(h, pts_a)
            err = np.sqrt(((mapped - pts_b) ** 2).sum(axis=1))
            for t, frac in zip(res.thresholds, res.fractions):
                want = sum(1 for e in err if e <= t) / n
                assert frac == want

    def test_monotone_in_threshold(self, rng):
        for _ in range(20):
            h = random_homography(rng)
            n = int(rng.integers(1, 40))
            res = mma(
                rng.uniform(0, 250, size=(n, 2)),
                rng.uniform(0, 250, size=(n, 2)),
                h,
            )
            assert np.all(np.diff(res.fractions) >= 0)

    def test_empty_matches_flagged_zero(self):
        res = mma(np.empty((0, 2)), np.empty((0, 2)), np.eye(3))
        assert res.empty
        np.testing.assert_array_equal(res.fractions, np.zeros(10))

    def test_accepts_wrapped_ground_truth(self, rng):
        h = random_homography(rng)
        pts_a = rng.uniform(10, 200, size=(10, 2))
        res = mma(pts_a, project(h, pts_a), HomographyGT(h))
        np.testing.assert_array_equal(res.fractions, np.ones(10))


class TestHomographyAccuracy:
    def test_exact_matches_succeed_everywhere(self, rng):
        h = random_homography(rng)
        pts_a = rng.uniform(10, 240, size=(30, 2))
        res = homography_accuracy(pts_a, project(h, pts_a), h, 256, 256)
        assert not res.failed
        assert res.corner_error < 1e-6
        assert res.success == (True, True, True)

    def test_too_few_matches_fail_all_thresholds(self, rng):
        h = random_homography(rng)
        pts_a = rng.uniform(10, 240, size=(3, 2))
        res = homography_accuracy(pts_a, project(h, pts_a), h, 256, 256)
        assert res.failed
        assert res.success == (False, False, False)
        assert res.corner_error == float("inf")

    def test_collinear_matches_fail_gracefully(self, rng):
        h = np.eye(3)
        x = np.linspace(10, 200, 8)
        pts = np.column_stack([x, 2.0 * x + 5.0])
        res = homography_accuracy(pts, pts, h, 256, 256)
        assert res.failed

    def test_success_flags_match_corner_error(self, rng):
        for _ in range(15):
            h = random_homography(rng)
            n = int(rng.integers(4, 30))
            pts_a = rng.uniform(10, 240, size=(n, 2))
            noise = rng.normal(scale=rng.uniform(0, 2.0), size=(n, 2))
            res = homography_accuracy(pts_a, project(h, pts_a) + noise, h, 256, 256)
            if res.failed:
                continue
            for flag, t in zip(res.success, (1.0, 3.0, 5.0)):
                assert flag == (res.corner_error <= t)
            assert res.success[0] <= res.success[1] <= res.success[2]


class TestPoseAuc:
    def test_all_zero_errors(self):
        np.testing.assert_array_equal(pose_auc([0.0, 0.0, 0.0]), np.ones(3))

    def test_all_errors_beyond_range(self):
        np.testing.assert_array_equal(
            pose_auc([20.0, 35.0, np.inf]), np.zeros(3)
        )

    def test_two_point_case_half(self):
        # CDF is 0.5 on [0, 10); the jump at exactly 10 has measure zero,
        # so the exact integral is 0.5 * 10 / 10.  Confirmed against the
        # breakpoint-refined numerical oracle.
        got = pose_auc([0.0, 10.0], [10.0])[0]
        assert got == pytest.approx(0.5, abs=1e-15)
        assert got == pytest.approx(auc_breakpoint_oracle([0.0, 10.0], 10.0), abs=1e-12)

    def test_matches_numerical_cdf_integration(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 40))
            errors = rng.uniform(0, 30, size=n)
            if rng.random() < 0.3:
                errors[rng.integers(0, n)] = np.inf
            for t in (5.0, 10.0, 20.0):
                got = pose_auc(errors, [t])[0]
                want = auc_breakpoint_oracle(errors, t)
                assert got == pytest.approx(want, abs=1e-9)

    def test_monotone_in_threshold(self, rng):
        for _ in range(20):
            errors = rng.uniform(0, 40, size=int(rng.integers(1, 30)))
            aucs = pose_auc(errors)
            assert aucs[0] <= aucs[1] + 1e-15
            assert aucs[1] <= aucs[2] + 1e-15

    def test_validation(self):
        with pytest.raises(DegenerateInput):
            pose_auc([])
        with pytest.raises(DegenerateInput):
            pose_auc([np.nan])
        with pytest.raises(DegenerateInput):
            pose_auc([-1.0])
        with pytest.raises(DegenerateInput):
            pose_auc([1.0], thresholds=[0.0])


class TestMatchingPrecision:
    def scene_gt(self, scene):
        return PoseGT(
            k_a=scene.k_a,
            k_b=scene.k_b,
            rotation=scene.rotation,
            translation=scene.translation,
        )

    def test_exact_correspondences_score_one(self):
        scene = synth_scene(3, n_points=60)
        res = matching_precision(
            scene.points_a, scene.points_b, self.scene_gt(scene)
        )
        assert res.fraction == 1.0
        assert not res.empty

    def test_mixture_matches_count_oracle(self, rng):
        scene = synth_scene(10, n_points=60)
        gt = self.scene_gt(scene)
        pts_a = scene.points_a.copy()
        pts_b = scene.points_b.copy()
        n = len(pts_a)
        bad = rng.permutation(n)[: n // 2]
        offsets = rng.normal(size=(len(bad), 2))
        offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
        pts_b[bad] += offsets * rng.uniform(30, 80, size=(len(bad), 1))
        res = matching_precision(pts_a, pts_b, gt)
        # Independent count: squared symmetric epipolar distance per match.
        e = gt.essential
        ka_inv = np.linalg.inv(gt.k_a.matrix)
        kb_inv = np.linalg.inv(gt.k_b.matrix)
        count = 0
        for p, q in zip(pts_a, pts_b):
            xa = ka_inv @ np.array([p[0], p[1], 1.0])
            xa /= xa[2]
            xb = kb_inv @ np.array([q[0], q[1], 1.0])
            xb /= xb[2]
            la = e @ xa
            lb = e.T @ xb
            r2 = float(xb @ la) ** 2
            d = r2 / (la[0] ** 2 + la[1] ** 2) + r2 / (lb[0] ** 2 + lb[1] ** 2)
            count += d < 5e-4
        assert res.fraction == pytest.approx(count / n, abs=1e-12)
        assert 0.35 <= res.fraction <= 0.65

    def test_homography_variant(self, rng):
        h = random_homography(rng)
        pts_a = rng.uniform(10, 240, size=(20, 2))
        pts_b = project(h, pts_a)
        exact = matching_precision(pts_a, pts_b, HomographyGT(h))
        assert exact.fraction == 1.0
        shifted = matching_precision(pts_a, pts_b + 10.0, HomographyGT(h))
        assert shifted.fraction == 0.0

    def test_empty_flagged(self):
        res = matching_precision(
            np.empty((0, 2)), np.empty((0, 2)), HomographyGT(np.eye(3))
        )
        assert res.empty
        assert res.fraction == 0.0


class TestPoseErrorForPair:
    def test_exact_scene_recovers_pose(self):
        scene = synth_scene(3, n_points=60)
        gt = PoseGT(
            k_a=scene.k_a,
            k_b=scene.k_b,
            rotation=scene.rotation,
            translation=scene.translation,
        )
        err = pose_error_for_pair(scene.f_gt, scene.points_a, scene.points_b, gt)
        assert err < 0.1

    def test_failure_returns_infinity(self):
        scene = synth_scene(3, n_points=60)
        gt = PoseGT(
            k_a=scene.k_a,
            k_b=scene.k_b,
            rotation=scene.rotation,
            translation=scene.translation,
        )
        assert pose_error_for_pair(
            scene.f_gt, np.empty((0, 2)), np.empty((0, 2)), gt
        ) == float("inf")


class TestRansac:
    def test_recovers_from_outlier_mixture(self, rng):
        scene = make_two_view_scene(rng, n_points=60)
        pts_a = scene["pts_a"].copy()
        pts_b = scene["pts_b"].copy()
        bad = rng.permutation(60)[:18]
        # Push outliers perpendicular to their epipolar lines so they can
        # never rejoin the consensus along the 1-D epipolar constraint.
        f_gt = scene["f_gt"]
        for i in bad:
            line = f_gt @ np.array([pts_a[i, 0], pts_a[i, 1], 1.0])
            normal = line[:2] / np.hypot(line[0], line[1])
            pts_b[i] += normal * rng.uniform(15, 60) * rng.choice([-1.0, 1.0])
        f, mask = ransac_fundamental(pts_a, pts_b, threshold=1.0, seed=3)
        good = np.setdiff1d(np.arange(60), bad)
        assert mask[good].all()
        assert not mask[bad].any()
        assert fmat_distance(f, scene["f_gt"]) < 1e-6

    def test_deterministic_for_fixed_seed(self, rng):
        scene = make_two_view_scene(rng, n_points=40)
        pts_a, pts_b = scene["pts_a"], scene["pts_b"].copy()
        pts_b[:10] += 25.0
        f1, m1 = ransac_fundamental(pts_a, pts_b, seed=11)
        f2, m2 = ransac_fundamental(pts_a, pts_b, seed=11)
        assert f1.tobytes() == f2.tobytes()
        assert np.array_equal(m1, m2)

    def test_needs_eight_points(self, rng):
        pts = rng.uniform(0, 100, size=(7, 2))
        with pytest.raises(DegenerateInput):
            ransac_fundamental(pts, pts)


class TestReportSerialization:
    def build(self):
        records = (
            PairRecord("pair-b", 12, {"mma@1": 0.5, "mma@2": 0.75}),
            PairRecord("pair-a", 30, {"mma@1": 1.0, "mma@2": 1.0}),
        )
        return MetricReport(records=records, aggregates={"mma@1": 0.75, "mma@2": 0.875})

    def test_json_round_trip(self):
        report = self.build()
        payload = json.loads(report.to_json())
        assert [p["pair_id"] for p in payload["pairs"]] == ["pair-a", "pair-b"]
        assert payload["aggregates"]["mma@1"] == 0.75
        assert payload["pairs"][1]["metrics"]["mma@2"] == 0.75
        assert payload["pairs"][0]["match_count"] == 30

    def test_csv_layout(self):
        lines = self.build().to_csv().strip().splitlines()
        assert lines[0] == "pair_id,match_count,mma@1,mma@2"
        assert lines[1].startswith("pair-a,30,")
        assert float(lines[2].split(",")[2]) == 0.5


class TestSummaries:
    def test_mma_mean_includes_empty_pairs(self, rng):
        h = np.eye(3)
        pts = rng.uniform(0, 100, size=(10, 2))
        full = mma(pts, pts, h)
        empty = mma(np.empty((0, 2)), np.empty((0, 2)), h)
        agg = summarize_mma([full, empty])
        assert agg["mma@1"] == 0.5
        assert all(0.0 <= v <= 1.0 for v in agg.values())

    def test_homography_fraction_of_pairs(self, rng):
        h = random_homography(rng)
        pts = rng.uniform(10, 240, size=(12, 2))
        good = homography_accuracy(pts, project(h, pts), h, 256, 256)
        bad = homography_accuracy(pts[:3], project(h, pts[:3]), h, 256, 256)
        agg = summarize_homography([good, bad])
        assert agg["acc@1px"] == 0.5
        assert agg["acc@5px"] == 0.5
        assert agg["failure_rate"] == 0.5

    def test_pose_summary_fields(self):
        scene = synth_scene(3, n_points=40)
        gt = PoseGT(
            k_a=scene.k_a,
            k_b=scene.k_b,
            rotation=scene.rotation,
            translation=scene.translation,
        )
        prec = matching_precision(scene.points_a, scene.points_b, gt)
        agg = summarize_pose([0.0, 10.0], [prec], thresholds=(5.0, 10.0, 20.0))
        assert agg["auc@5deg"] == pytest.approx(0.5)
        assert agg["auc@10deg"] == pytest.approx(0.5)
        assert agg["auc@20deg"] == pytest.approx(0.75)
        assert agg["precision"] == 1.0


class TestHpatchesLoader:
    def test_written_sequence_round_trips(self, tmp_path):
        root = tmp_path / "seq"
        write_hpatches_sequence(root, seed=2, n_points=40)
        seq = load_hpatches_sequence(root)
        assert len(seq.images) == 6
        assert len(seq.ground_truth) == 5
        assert seq.images[0].ndim == 3
        for k, gt in enumerate(seq.ground_truth, start=2):
            want = np.loadtxt(root / f"H_1_{k}")
            np.testing.assert_array_equal(gt.h, want)
        pairs = seq.pairs()
        assert [(a, b) for a, b, _ in pairs] == [(0, k) for k in range(1, 6)]

    def test_missing_homography_file(self, tmp_path):
        root = tmp_path / "seq"
        write_hpatches_sequence(root, seed=2, n_points=40)
        (root / "H_1_3").unlink()
        with pytest.raises(MissingFile) as excinfo:
            load_hpatches_sequence(root)
        assert "H_1_3" in str(excinfo.value)

    def test_missing_image(self, tmp_path):
        root = tmp_path / "seq"
        write_hpatches_sequence(root, seed=2, n_points=40)
        (root / "4.ppm").unlink()
        with pytest.raises(MissingFile):
            load_hpatches_sequence(root)

    def test_malformed_matrix(self, tmp_path):
        root = tmp_path / "seq"
        write_hpatches_sequence(root, seed=2, n_points=40)
        (root / "H_1_2").write_text("1 0 0 0 1 0 0 1\n")
        with pytest.raises(MalformedMatrix):
            load_hpatches_sequence(root)
        (root / "H_1_2").write_text("1 0 0 0 1 0 0 oops 1\n")
        with pytest.raises(MalformedMatrix):
            load_hpatches_sequence(root)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(MissingFile):
            load_hpatches_sequence(tmp_path / "absent")


class TestPosePairLoader:
    def record(self, **overrides):
        rec = {
            "imgA": "a.png",
            "imgB": "b.png",
            "KA": np.eye(3).tolist(),
            "KB": np.eye(3).tolist(),
            "R": np.eye(3).tolist(),
            "t": [2.0, 0.0, 0.0],
        }
        rec.update(overrides)
        return rec

    def test_identity_record(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        path.write_text(json.dumps(self.record()) + "\n")
        pairs = load_pose_pairs(path)
        assert len(pairs) == 1
        gt = pairs[0].gt
        np.testing.assert_array_equal(gt.rotation, np.eye(3))
        np.testing.assert_allclose(gt.translation, [1.0, 0.0, 0.0])
        assert pairs[0].image_a.endswith("a.png")

    def test_written_pairs_round_trip(self, tmp_path):
        list_path = write_pose_pairs(tmp_path, seeds=[1, 6], n_points=40)
        pairs = load_pose_pairs(list_path)
        assert len(pairs) == 2
        for pair in pairs:
            assert np.isclose(np.linalg.norm(pair.gt.translation), 1.0)
            r = pair.gt.rotation
            np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-9)

    def test_truncated_line_names_line_number(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        good = json.dumps(self.record())
        path.write_text(good + "\n" + good[: len(good) // 2] + "\n")
        with pytest.raises(MalformedRecord) as excinfo:
            load_pose_pairs(path)
        assert "line 2" in str(excinfo.value)

    def test_missing_field(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        rec = self.record()
        del rec["KB"]
        path.write_text(json.dumps(rec) + "\n")
        with pytest.raises(MalformedRecord) as excinfo:
            load_pose_pairs(path)
        assert "line 1" in str(excinfo.value)

    def test_bad_shape_and_zero_translation(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        path.write_text(json.dumps(self.record(R=[[1, 0], [0, 1]])) + "\n")
        with pytest.raises(MalformedRecord):
            load_pose_pairs(path)
        path.write_text(json.dumps(self.record(t=[0.0, 0.0, 0.0])) + "\n")
        with pytest.raises(MalformedRecord):
            load_pose_pairs(path)

    def test_missing_list_file(self, tmp_path):
        with pytest.raises(MissingFile):
            load_pose_pairs(tmp_path / "absent.jsonl")

    def test_blank_lines_ignored(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        path.write_text("\n" + json.dumps(self.record()) + "\n\n")
        assert len(load_pose_pairs(path)) == 1
