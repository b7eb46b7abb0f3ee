"""Cascade scoring, seeding, filtering, and end-to-end refinement tests.

Confidence scores, top-k selection, and the epipolar filter are checked
against exhaustive double-loop oracles.  End-to-end behaviour is checked on
rendered synthetic pairs with known ground-truth geometry.
"""

import numpy as np
import pytest

from epimatch.cascade import (
    CascadeConfig,
    cascade_match,
    confidence_score,
    filter_by_epipolar,
    score_cells,
    score_matches,
    select_top_confident,
    _children_mask,
)
from epimatch.errors import (
    DegenerateInput,
    InsufficientMatches,
    InsufficientSeedMatches,
    ShapeMismatch,
)
from epimatch.features import FeatureMap, builtin_pyramid, cells_to_image
from epimatch.matching import MatchSet, dense_nn_match
from epimatch.synthetic import synth_scene, synth_warp_pair

from conftest import fmat_distance


def feature_map(data, layer=0, scale=1.0):
    return FeatureMap(layer=layer, scale=scale, data=np.asarray(data, np.float32))


def make_match_set(shape_a, shape_b, pa, pb, distance=None, confidence=None):
    """MatchSet from explicit flat-index pairs, sorted by pa."""
    pa = np.asarray(pa, dtype=np.int64)
    pb = np.asarray(pb, dtype=np.int64)
    order = np.argsort(pa, kind="stable")
    n = pa.shape[0]
    if distance is None:
        distance = np.zeros(n)
    if confidence is None:
        confidence = np.full(n, np.nan)
    return MatchSet(
        layer=0,
        shape_a=tuple(shape_a),
        shape_b=tuple(shape_b),
        pa=pa[order],
        pb=pb[order],
        distance=np.asarray(distance, dtype=np.float64)[order],
        ratio=np.zeros(n),
        confidence=np.asarray(confidence, dtype=np.float64)[order],
    )


def unit_rows(data):
    """Float64 row normalization matching the scorer's convention."""
    flat = np.asarray(data, dtype=np.float64).reshape(-1, data.shape[-1])
    norms = np.sqrt((flat**2).sum(axis=1))
    out = np.zeros_like(flat)
    nz = norms > 0
    out[nz] = flat[nz] / norms[nz, None]
    return out


def oracle_confidence(cell_a, cell_b, s, map_a, map_b, match_pairs, eps):
    """Double-loop reference for one aligned-footprint confidence score."""
    da = unit_rows(map_a.data)
    db = unit_rows(map_b.data)
    total = 0.0
    for oi in range(s):
        for oj in range(s):
            qa = (cell_a[0] * s + oi, cell_a[1] * s + oj)
            qb = (cell_b[0] * s + oi, cell_b[1] * s + oj)
            if qa[0] >= map_a.height or qa[1] >= map_a.width:
                continue
            if qb[0] >= map_b.height or qb[1] >= map_b.width:
                continue
            ia = qa[0] * map_a.width + qa[1]
            ib = qb[0] * map_b.width + qb[1]
            if (ia, ib) not in match_pairs:
                continue
            sim = min(max(float(np.dot(da[ia], db[ib])), -1.0), 1.0)
            total += 1.0 / max(1.0 - sim, eps)
    return total


def sampson_oracle(f, pts_a, pts_b):
    """Scalar-loop Sampson distance used as an independent reference."""
    f = np.asarray(f, dtype=float)
    out = np.empty(len(pts_a))
    for i, (p, q) in enumerate(zip(pts_a, pts_b)):
        pa = np.array([p[0], p[1], 1.0])
        pb = np.array([q[0], q[1], 1.0])
        fa = f @ pa
        fb = f.T @ pb
        numer = float(pb @ fa) ** 2
        denom = fa[0] ** 2 + fa[1] ** 2 + fb[0] ** 2 + fb[1] ** 2
        out[i] = numer / denom if denom > 0 else np.inf
    return out


def random_config(rng):
    """Random shallow maps, shallow match set, and deep cells to score."""
    ha, wa = rng.integers(6, 13, size=2)
    hb, wb = rng.integers(6, 13, size=2)
    channels = 5
    map_a = feature_map(rng.normal(size=(ha, wa, channels)))
    map_b = feature_map(rng.normal(size=(hb, wb, channels)))
    cells_a_total = ha * wa
    cells_b_total = hb * wb
    n_pairs = int(rng.integers(10, min(cells_a_total, cells_b_total)))
    pa = rng.choice(cells_a_total, size=n_pairs, replace=False)
    pb = rng.integers(0, cells_b_total, size=n_pairs)
    mset = make_match_set((ha, wa), (hb, wb), pa, pb)
    s = int(rng.integers(1, 5))
    n_cells = 12
    # Allow one cell of overhang so edge clipping gets exercised.
    cells_a = np.column_stack(
        [
            rng.integers(0, ha // s + 1, size=n_cells),
            rng.integers(0, wa // s + 1, size=n_cells),
        ]
    )
    cells_b = np.column_stack(
        [
            rng.integers(0, hb // s + 1, size=n_cells),
            rng.integers(0, wb // s + 1, size=n_cells),
        ]
    )
    return map_a, map_b, mset, s, cells_a, cells_b


class TestConfidenceOracle:
    def test_random_configurations_match_double_loop(self, rng):
        eps = 1e-6
        for _ in range(100):
            map_a, map_b, mset, s, cells_a, cells_b = random_config(rng)
            pairs = set(zip(mset.pa.tolist(), mset.pb.tolist()))
            got = score_cells(cells_a, cells_b, s, map_a, map_b, mset, eps)
            want = np.array(
                [
                    oracle_confidence(ca, cb, s, map_a, map_b, pairs, eps)
                    for ca, cb in zip(cells_a, cells_b)
                ]
            )
            np.testing.assert_allclose(got, want, rtol=1e-12, atol=0.0)

    def test_matchset_and_scalar_wrappers_agree(self, rng):
        map_a, map_b, mset, s, cells_a, cells_b = random_config(rng)
        direct = score_cells(cells_a, cells_b, s, map_a, map_b, mset)
        flat_a = cells_a[:, 0] * map_a.width + cells_a[:, 1]
        flat_b = cells_b[:, 0] * map_b.width + cells_b[:, 1]
        # Valid flat indices are required by MatchSet; clamp the overhang.
        flat_a = np.minimum(flat_a, map_a.cells - 1)
        flat_b = np.minimum(flat_b, map_b.cells - 1)
        as_set = make_match_set(
            (map_a.height, map_a.width), (map_b.height, map_b.width), flat_a, flat_b
        )
        via_set = score_matches(as_set, s, map_a, map_b, mset)
        clamped = np.column_stack([flat_a // map_a.width, flat_a % map_a.width])
        clamped_b = np.column_stack([flat_b // map_b.width, flat_b % map_b.width])
        order = np.argsort(flat_a, kind="stable")
        expect = score_cells(clamped[order], clamped_b[order], s, map_a, map_b, mset)
        np.testing.assert_array_equal(via_set, expect)
        one = confidence_score(
            tuple(clamped[0]), tuple(clamped_b[0]), s, map_a, map_b, mset
        )
        got = score_cells(clamped[:1], clamped_b[:1], s, map_a, map_b, mset)[0]
        assert one == got
        # Unused variable guard: direct must stay finite.
        assert np.all(np.isfinite(direct))

    def test_zero_numerator_scores_zero(self):
        map_a = feature_map(np.ones((8, 8, 4)))
        map_b = feature_map(np.ones((8, 8, 4)))
        empty = make_match_set((8, 8), (8, 8), [], [])
        cells = np.array([[0, 0], [1, 2], [3, 3]])
        got = score_cells(cells, cells, 2, map_a, map_b, empty)
        np.testing.assert_array_equal(got, np.zeros(3))
        # Non-empty set whose pairs all miss the footprint also scores zero.
        far = make_match_set((8, 8), (8, 8), [63], [63])
        got = score_cells(cells[:1], cells[:1], 2, map_a, map_b, far)
        np.testing.assert_array_equal(got, np.zeros(1))

    @pytest.mark.parametrize("half", [1, 2, 4])
    def test_uniform_footprint_closed_form(self, half):
        # Footprint side 2*half, every aligned pair matched at distance 1
        # (orthogonal descriptors): score must equal 4*half^2 / d exactly.
        side = 2 * half
        h = w = side * 2
        data_a = np.zeros((h, w, 2), np.float32)
        data_a[..., 0] = 1.0
        data_b = np.zeros((h, w, 2), np.float32)
        data_b[..., 1] = 1.0
        map_a = feature_map(data_a)
        map_b = feature_map(data_b)
        cell = (1, 1)
        rows = np.arange(cell[0] * side, cell[0] * side + side)
        cols = np.arange(cell[1] * side, cell[1] * side + side)
        grid = np.stack(np.meshgrid(rows, cols, indexing="ij"), -1).reshape(-1, 2)
        flat = grid[:, 0] * w + grid[:, 1]
        mset = make_match_set((h, w), (h, w), flat, flat)
        got = confidence_score(cell, cell, side, map_a, map_b, mset)
        assert got == pytest.approx(4.0 * half**2 / 1.0, rel=1e-12)

    def test_uniform_footprint_fractional_distance(self):
        # Descriptors [1, 0] vs [3, 4]/5 give cosine distance exactly 1 - 0.6.
        side = 4
        h = w = 8
        data_a = np.zeros((h, w, 2), np.float32)
        data_a[..., 0] = 1.0
        data_b = np.zeros((h, w, 2), np.float32)
        data_b[..., 0] = 3.0
        data_b[..., 1] = 4.0
        map_a = feature_map(data_a)
        map_b = feature_map(data_b)
        rows = np.arange(side)
        grid = np.stack(np.meshgrid(rows, rows, indexing="ij"), -1).reshape(-1, 2)
        flat = grid[:, 0] * w + grid[:, 1]
        mset = make_match_set((h, w), (h, w), flat, flat)
        got = confidence_score((0, 0), (0, 0), side, map_a, map_b, mset)
        d = 1.0 - 3.0 / 5.0
        assert got == pytest.approx(side * side / d, rel=1e-12)

    def test_epsilon_clamps_zero_distance(self):
        # Identical descriptors have distance 0; each term clamps to 1/eps.
        h = w = 4
        data = np.ones((h, w, 3), np.float32)
        map_a = feature_map(data)
        map_b = feature_map(data.copy())
        flat = np.array([0, 1, 4, 5])
        mset = make_match_set((h, w), (h, w), flat, flat)
        got = confidence_score((0, 0), (0, 0), 2, map_a, map_b, mset, epsilon=1e-6)
        assert got == pytest.approx(4 * 1e6, rel=1e-12)

    def test_input_validation(self):
        map_a = feature_map(np.ones((4, 4, 2)))
        mset = make_match_set((4, 4), (4, 4), [0], [0])
        cells = np.array([[0, 0]])
        with pytest.raises(DegenerateInput):
            score_cells(cells, cells, 1.5, map_a, map_a, mset)
        with pytest.raises(DegenerateInput):
            score_cells(np.array([[-1, 0]]), cells, 1, map_a, map_a, mset)
        with pytest.raises(ShapeMismatch):
            score_cells(cells, np.array([[0, 0], [1, 1]]), 1, map_a, map_a, mset)
        wrong = make_match_set((5, 5), (4, 4), [0], [0])
        with pytest.raises(ShapeMismatch):
            score_cells(cells, cells, 1, map_a, map_a, wrong)


class TestTopSelection:
    def scored_set(self, rng, n, conf_pool=None, dist_pool=None):
        shape = (8, 8)
        pa = rng.choice(64, size=n, replace=False)
        pb = rng.integers(0, 64, size=n)
        if conf_pool is None:
            conf = rng.uniform(0.0, 10.0, size=n)
        else:
            conf = rng.choice(conf_pool, size=n)
        if dist_pool is None:
            dist = rng.uniform(0.0, 1.0, size=n)
        else:
            dist = rng.choice(dist_pool, size=n)
        return make_match_set(shape, shape, pa, pb, distance=dist, confidence=conf)

    def selection_oracle(self, matches, k):
        rows = sorted(
            range(len(matches)),
            key=lambda i: (
                -matches.confidence[i],
                matches.distance[i],
                matches.pa[i],
            ),
        )
        return rows[:k]

    def test_full_sort_oracle(self, rng):
        for _ in range(30):
            n = int(rng.integers(8, 40))
            k = int(rng.integers(8, min(n, 12) + 1))
            matches = self.scored_set(rng, n)
            got = select_top_confident(matches, k)
            want = self.selection_oracle(matches, k)
            np.testing.assert_array_equal(got.pa, matches.pa[want])
            np.testing.assert_array_equal(got.pb, matches.pb[want])
            np.testing.assert_array_equal(got.confidence, matches.confidence[want])

    def test_tie_breaks_are_deterministic(self, rng):
        for _ in range(20):
            n = int(rng.integers(10, 30))
            matches = self.scored_set(
                rng, n, conf_pool=np.array([1.0, 2.0]), dist_pool=np.array([0.25, 0.5])
            )
            got = select_top_confident(matches, 8)
            want = self.selection_oracle(matches, 8)
            np.testing.assert_array_equal(got.pa, matches.pa[want])
            np.testing.assert_array_equal(got.pb, matches.pb[want])

    def test_requires_enough_scored_matches(self, rng):
        small = self.scored_set(rng, 7)
        with pytest.raises(InsufficientMatches):
            select_top_confident(small, 8)
        unscored = make_match_set((8, 8), (8, 8), np.arange(10), np.arange(10))
        with pytest.raises(DegenerateInput):
            select_top_confident(unscored, 8)


class TestEpipolarFilter:
    def test_per_element_oracle(self, rng):
        for _ in range(20):
            scale = float(rng.choice([1.0, 2.0, 4.0]))
            h = w = 16
            map_a = feature_map(rng.normal(size=(h, w, 3)), scale=scale)
            map_b = feature_map(rng.normal(size=(h, w, 3)), scale=scale)
            n = int(rng.integers(5, 40))
            pa = rng.choice(h * w, size=n, replace=False)
            pb = rng.integers(0, h * w, size=n)
            matches = make_match_set((h, w), (h, w), pa, pb)
            f = rng.normal(size=(3, 3))
            threshold = float(rng.uniform(0.5, 4.0)) * scale**2
            kept = filter_by_epipolar(matches, f, threshold, map_a, map_b)
            pts_a = cells_to_image(matches.cells_a(), map_a)
            pts_b = cells_to_image(matches.cells_b(), map_b)
            d = sampson_oracle(f, pts_a, pts_b)
            keep = d <= threshold
            np.testing.assert_array_equal(kept.pa, matches.pa[keep])
            np.testing.assert_array_equal(kept.pb, matches.pb[keep])

    def test_empty_passthrough(self):
        map_a = feature_map(np.ones((4, 4, 2)))
        empty = make_match_set((4, 4), (4, 4), [], [])
        out = filter_by_epipolar(empty, np.eye(3), 1.0, map_a, map_a)
        assert len(out) == 0


class TestChildrenMask:
    def mask_oracle(self, parents, ratio, map_a, map_b, margin=1):
        allowed = {}
        for ca, cb in zip(parents.cells_a(), parents.cells_b()):
            row_lo = max(cb[0] * ratio - margin, 0)
            row_hi = min(cb[0] * ratio + ratio + margin, map_b.height)
            col_lo = max(cb[1] * ratio - margin, 0)
            col_hi = min(cb[1] * ratio + ratio + margin, map_b.width)
            pool = [
                r * map_b.width + c
                for r in range(row_lo, row_hi)
                for c in range(col_lo, col_hi)
            ]
            for oi in range(ratio):
                for oj in range(ratio):
                    child = (ca[0] * ratio + oi) * map_a.width + ca[1] * ratio + oj
                    allowed[child] = pool
        return allowed

    @pytest.mark.parametrize("ratio", [2, 3])
    def test_blocks_with_margin(self, rng, ratio):
        for _ in range(10):
            hc = wc = 6
            map_a = feature_map(rng.normal(size=(hc * ratio, wc * ratio, 2)))
            map_b = feature_map(rng.normal(size=(hc * ratio, wc * ratio, 2)))
            n = int(rng.integers(1, 12))
            pa = rng.choice(hc * wc, size=n, replace=False)
            pb = rng.integers(0, hc * wc, size=n)
            parents = make_match_set((hc, wc), (hc, wc), pa, pb)
            mask = _children_mask(parents, ratio, map_a, map_b)
            want = self.mask_oracle(parents, ratio, map_a, map_b)
            for child in range(map_a.cells):
                got = mask.indices[mask.indptr[child] : mask.indptr[child + 1]]
                np.testing.assert_array_equal(got, want.get(child, []))


@pytest.fixture(scope="module")
def warp_scene():
    return synth_warp_pair(1, n_points=300)


@pytest.fixture(scope="module")
def warp_pyramids(warp_scene):
    return (
        builtin_pyramid(warp_scene.image_a, 4),
        builtin_pyramid(warp_scene.image_b, 4),
    )


@pytest.fixture(scope="module")
def warp_result(warp_pyramids):
    return cascade_match(*warp_pyramids)


class TestCascadeEndToEnd:
    def test_identical_pair_recovers_identity(self, rng):
        img = rng.integers(0, 256, size=(64, 64, 3)).astype(np.uint8)
        pyr = builtin_pyramid(img, 4)
        res = cascade_match(pyr, pyr)
        assert len(res) > 0
        same = np.all(res.points_a == res.points_b, axis=1)
        assert same.mean() >= 0.95
        assert res.distance.max() < 1e-6
        # Identical views have no baseline: the matrix must be flagged.
        assert res.degenerate

    def test_homography_scene_accuracy(self, warp_scene, warp_result):
        res = warp_result
        assert len(res) >= 50
        h = warp_scene.h_gt
        ones = np.ones((len(res), 1))
        proj = np.hstack([res.points_a, ones]) @ h.T
        mapped = proj[:, :2] / proj[:, 2:3]
        err = np.linalg.norm(mapped - res.points_b, axis=1)
        assert (err <= 3.0).mean() >= 0.9

    def test_two_view_epipolar_consistency(self):
        scene = synth_scene(3, n_points=600, render=True)
        pyr_a = builtin_pyramid(scene.image_a, 4)
        pyr_b = builtin_pyramid(scene.image_b, 4)
        res = cascade_match(pyr_a, pyr_b, CascadeConfig(keep_layer_matches=True))
        assert len(res) >= 300
        assert not res.degenerate

        # Every final match must satisfy the true epipolar geometry.
        d_gt = sampson_oracle(scene.f_gt, res.points_a, res.points_b)
        assert d_gt.max() < 1.0

        # The recovered matrix must agree with the analytic one.
        assert fmat_distance(res.f_final, scene.f_gt) <= 1e-3

        # Refinement must not degrade agreement with the true geometry.
        assert res.layer_matches is not None
        layers = [lm.layer for lm in res.layer_matches]
        assert layers == sorted(layers, reverse=True)
        medians = []
        for lm in res.layer_matches:
            assert len(lm) > 0
            medians.append(np.median(sampson_oracle(scene.f_gt, lm.points_a, lm.points_b)))
        for earlier, later in zip(medians, medians[1:]):
            assert later <= earlier

    def test_final_matches_satisfy_reported_matrix(self, warp_result):
        res = warp_result
        d = sampson_oracle(res.f_final, res.points_a, res.points_b)
        assert d.max() <= 1.0 + 1e-9

    def test_repeated_runs_are_bitwise_identical(self, warp_pyramids, warp_result):
        again = cascade_match(*warp_pyramids)
        assert again.points_a.tobytes() == warp_result.points_a.tobytes()
        assert again.points_b.tobytes() == warp_result.points_b.tobytes()
        assert again.distance.tobytes() == warp_result.distance.tobytes()
        assert again.confidence.tobytes() == warp_result.confidence.tobytes()
        assert again.f_final.tobytes() == warp_result.f_final.tobytes()
        assert again.degenerate == warp_result.degenerate
        assert len(again.diagnostics) == len(warp_result.diagnostics)
        for da, db in zip(again.diagnostics, warp_result.diagnostics):
            assert (da.layer, da.matched, da.retained) == (
                db.layer,
                db.matched,
                db.retained,
            )
            assert da.f.tobytes() == db.f.tobytes()

    def test_featureless_pair_raises_with_diagnostics(self):
        img = np.full((64, 64, 3), 128, np.uint8)
        pyr = builtin_pyramid(img, 3)
        with pytest.raises(InsufficientSeedMatches) as excinfo:
            cascade_match(pyr, pyr)
        assert len(excinfo.value.diagnostics) == 1
        assert excinfo.value.diagnostics[0].f is None

    def test_diagnostics_cover_selected_layers(self, warp_result):
        layers = [d.layer for d in warp_result.diagnostics]
        assert layers == [3, 2, 1, 0]
        assert warp_result.diagnostics[0].inlier_ratio == 1.0


class TestConfigValidation:
    def test_config_bounds(self):
        with pytest.raises(DegenerateInput):
            CascadeConfig(top_k=7)
        with pytest.raises(DegenerateInput):
            CascadeConfig(min_matches=4)
        with pytest.raises(DegenerateInput):
            CascadeConfig(sampson_base=0.0)
        with pytest.raises(DegenerateInput):
            CascadeConfig(epsilon=0.0)

    def test_layer_selection_errors(self, rng):
        img = rng.integers(0, 256, size=(32, 32, 3)).astype(np.uint8)
        pyr = builtin_pyramid(img, 3)
        with pytest.raises(DegenerateInput):
            cascade_match(pyr, pyr, CascadeConfig(layers=(0, 0)))
        with pytest.raises(DegenerateInput):
            cascade_match(pyr, pyr, CascadeConfig(layers=(1,)))
        with pytest.raises(DegenerateInput):
            cascade_match(pyr, pyr, CascadeConfig(layers=(0, 5)))

    def test_incompatible_pyramids(self, rng):
        img = rng.integers(0, 256, size=(32, 32, 3)).astype(np.uint8)
        with pytest.raises(ShapeMismatch):
            cascade_match(builtin_pyramid(img, 3), builtin_pyramid(img, 2))

    def test_per_layer_ratio_mapping(self, rng):
        cfg = CascadeConfig(ratio_threshold={0: 0.8, 1: 0.9, 2: 0.95, 3: 1.0})
        assert cfg.ratio_for(2) == 0.95
        img = rng.integers(0, 256, size=(64, 64, 3)).astype(np.uint8)
        pyr = builtin_pyramid(img, 4)
        res = cascade_match(pyr, pyr, cfg)
        assert len(res) > 0
