import itertools

import numpy as np
import pytest

from changedet.core import ChangeMask, ConfigError, ImagePair, LabeledSample, ProbabilityMask
from changedet.evalkit import (
    EvalConfig,
    Region,
    binarize,
    connected_components,
    evaluate,
    filter_min_area,
    match_regions,
    pr_auc,
    pr_curve,
    prf1,
    production_min_area,
    region_iou,
    regions_of_mask,
)


def mask_of(rows):
    return ChangeMask(np.array(rows, dtype=np.uint8))


def accept_pairs(pred, gt, config):
    """All (i, j) pairs admissible under the config's acceptance rule."""
    out = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            iou = region_iou(p, g)
            if config.match_mode == "any_overlap":
                ok = iou > 0.0
            else:
                ok = iou >= config.iou_tau
            if ok:
                out.append((i, j))
    return out


def max_matching_size(pairs, n_pred, n_gt):
    """Exhaustive maximum one-to-one matching over the admissible pairs."""
    best = 0
    for r in range(min(n_pred, n_gt), 0, -1):
        for combo in itertools.combinations(pairs, r):
            preds = [c[0] for c in combo]
            gts = [c[1] for c in combo]
            if len(set(preds)) == r and len(set(gts)) == r:
                return r
    return best


class TestBinarize:
    def test_geq_convention(self):
        p = ProbabilityMask(np.array([[0.5, 0.4999]]))
        m = binarize(p, 0.5)
        assert m.data.tolist() == [[1, 0]]

    def test_all_below_gives_empty(self):
        p = ProbabilityMask(np.full((4, 4), 0.2))
        assert binarize(p, 0.5).data.sum() == 0

    def test_lower_threshold_superset(self):
        rng = np.random.default_rng(40)
        p = ProbabilityMask(rng.random((16, 16)))
        hi = binarize(p, 0.7).data
        lo = binarize(p, 0.3).data
        assert np.all(lo >= hi)

    def test_bad_threshold_rejected(self):
        p = ProbabilityMask(np.full((2, 2), 0.5))
        with pytest.raises(ConfigError):
            binarize(p, 0.0)
        with pytest.raises(ConfigError):
            binarize(p, 1.0)


class TestConnectedComponents:
    def test_solid_block(self):
        m = ChangeMask.zeros((5, 5)).data.copy()
        m[1:4, 1:4] = 1
        regions = connected_components(ChangeMask(m))
        assert len(regions) == 1
        assert regions[0].area == 9

    def test_diagonal_connectivity(self):
        m = mask_of([[1, 0], [0, 1]])
        assert len(connected_components(m, connectivity=8)) == 1
        assert len(connected_components(m, connectivity=4)) == 2

    def test_empty_mask(self):
        assert connected_components(ChangeMask.zeros((6, 6))) == []

    def test_row_major_first_pixel_order(self):
        m = ChangeMask.zeros((10, 10)).data.copy()
        m[7, 1] = 1  # later in scan order
        m[2, 8] = 1
        m[4, 4] = 1
        regions = connected_components(ChangeMask(m), connectivity=8)
        firsts = [tuple(r.pixels[0]) for r in regions]
        assert firsts == [(2, 8), (4, 4), (7, 1)]

    def test_partition_property(self):
        rng = np.random.default_rng(41)
        for _ in range(20):
            data = (rng.random((20, 20)) < 0.3).astype(np.uint8)
            regions = connected_components(ChangeMask(data))
            seen = np.zeros_like(data)
            for r in regions:
                assert r.area == len(r.pixels)
                for row, col in r.pixels:
                    assert seen[row, col] == 0  # disjoint
                    seen[row, col] = 1
            assert np.array_equal(seen, data)  # union is the foreground

    def test_bbox(self):
        m = ChangeMask.zeros((8, 8)).data.copy()
        m[2:5, 3:7] = 1
        (region,) = connected_components(ChangeMask(m))
        assert region.bbox == (2, 3, 4, 6)

    def test_bad_connectivity_rejected(self):
        with pytest.raises(ConfigError):
            connected_components(ChangeMask.zeros((4, 4)), connectivity=6)


class TestFilterMinArea:
    def _regions(self, areas):
        out = []
        col = 0
        for a in areas:
            pixels = [(0, col + k) for k in range(a)]
            out.append(Region.from_pixels(np.array(pixels)))
            col += a + 2
        return out

    def test_zero_is_identity(self):
        regions = self._regions([3, 10, 25])
        assert filter_min_area(regions, 0) == regions

    def test_boundary_inclusive(self):
        regions = self._regions([5, 6])
        kept = filter_min_area(regions, 6)
        assert [r.area for r in kept] == [6]

    def test_selection_and_order(self):
        regions = self._regions([3, 10, 25])
        kept = filter_min_area(regions, 10)
        assert [r.area for r in kept] == [10, 25]

    def test_idempotent(self):
        regions = self._regions([3, 10, 25])
        once = filter_min_area(regions, 10)
        assert filter_min_area(once, 10) == once

    def test_production_default(self):
        assert production_min_area((128, 256)) == 16
        assert production_min_area((128, 256, 3)) == 16


class TestRegionIoU:
    def test_identical_is_one(self):
        r = Region.from_pixels(np.array([[0, 0], [0, 1], [1, 0]]))
        assert region_iou(r, r) == 1.0

    def test_disjoint_is_zero(self):
        a = Region.from_pixels(np.array([[0, 0]]))
        b = Region.from_pixels(np.array([[5, 5]]))
        assert region_iou(a, b) == 0.0

    def test_hand_computed_overlap(self):
        a = Region.from_pixels(np.array([[0, c] for c in range(4)]))
        b = Region.from_pixels(np.array([[0, c] for c in range(2, 6)]))
        # intersection 2, union 6
        assert abs(region_iou(a, b) - 2.0 / 6.0) < 1e-12


class TestMatchRegions:
    def test_identical_masks_all_tp(self):
        m = ChangeMask.zeros((10, 10)).data.copy()
        m[1:3, 1:3] = 1
        m[6:9, 6:9] = 1
        regions = connected_components(ChangeMask(m))
        res = match_regions(regions, regions, EvalConfig())
        assert (res.tp, res.fp, res.fn) == (2, 0, 0)

    def test_empty_pred_all_fn(self):
        m = ChangeMask.zeros((10, 10)).data.copy()
        m[0, 0] = 1
        m[5, 5] = 1
        m[9, 9] = 1
        gt = connected_components(ChangeMask(m))
        res = match_regions([], gt, EvalConfig())
        assert (res.tp, res.fp, res.fn) == (0, 0, 3)

    def test_iou_below_tau_rejected_but_any_overlap_accepts(self):
        pred = [Region.from_pixels(np.array([[0, c] for c in range(4)]))]
        gt = [Region.from_pixels(np.array([[0, c] for c in range(2, 6)]))]
        strict = match_regions(pred, gt, EvalConfig(iou_tau=0.5))
        assert (strict.tp, strict.fp, strict.fn) == (0, 1, 1)
        loose = match_regions(pred, gt, EvalConfig(match_mode="any_overlap"))
        assert (loose.tp, loose.fp, loose.fn) == (1, 0, 0)

    def test_one_to_one(self):
        # two preds inside one gt: only one can match
        gt_pixels = [(r, c) for r in range(4) for c in range(4)]
        gt = [Region.from_pixels(np.array(gt_pixels))]
        p1 = Region.from_pixels(np.array([(r, c) for r in range(4) for c in range(3)]))
        p2 = Region.from_pixels(np.array([(r, 3) for r in range(4)]))
        res = match_regions([p1, p2], gt, EvalConfig(match_mode="any_overlap"))
        assert (res.tp, res.fp, res.fn) == (1, 1, 0)
        # greedy prefers the larger-IoU pair
        assert res.matches[0][0] == 0

    def test_match_list_consistency(self):
        rng = np.random.default_rng(42)
        cfg = EvalConfig()
        for _ in range(30):
            pred = regions_of_mask(
                ChangeMask((rng.random((16, 16)) < 0.25).astype(np.uint8)), cfg
            )
            gt = regions_of_mask(
                ChangeMask((rng.random((16, 16)) < 0.25).astype(np.uint8)), cfg
            )
            res = match_regions(pred, gt, cfg)
            assert res.tp == len(res.matches)
            assert res.fp == len(pred) - res.tp
            assert res.fn == len(gt) - res.tp
            pred_ids = [m[0] for m in res.matches]
            gt_ids = [m[1] for m in res.matches]
            assert len(set(pred_ids)) == len(pred_ids)
            assert len(set(gt_ids)) == len(gt_ids)

    def test_greedy_equals_enumeration_default_rule(self):
        rng = np.random.default_rng(43)
        cfg = EvalConfig()
        for _ in range(80):
            a = (rng.random((12, 12)) < 0.3).astype(np.uint8)
            b = (rng.random((12, 12)) < 0.3).astype(np.uint8)
            pred = connected_components(ChangeMask(a))[:6]
            gt = connected_components(ChangeMask(b))[:6]
            res = match_regions(pred, gt, cfg)
            pairs = accept_pairs(pred, gt, cfg)
            assert res.tp == max_matching_size(pairs, len(pred), len(gt))


class TestPrf1:
    def test_direct_arithmetic(self):
        p, r, f1 = prf1(2, 1, 1)
        assert abs(p - 2 / 3) < 1e-12 and abs(r - 2 / 3) < 1e-12
        assert abs(f1 - 2 / 3) < 1e-12

    def test_zero_denominator_conventions(self):
        assert prf1(0, 0, 0) == (1.0, 1.0, 1.0)
        p, r, f1 = prf1(0, 0, 5)  # nothing predicted
        assert (p, r, f1) == (1.0, 0.0, 0.0)
        p, r, f1 = prf1(0, 5, 0)  # nothing to find but predictions made
        assert (p, r, f1) == (0.0, 1.0, 0.0)

    def test_harmonic_identity(self):
        rng = np.random.default_rng(44)
        for _ in range(500):
            tp, fp, fn = (int(v) for v in rng.integers(0, 50, size=3))
            p, r, f1 = prf1(tp, fp, fn)
            if p + r > 0:
                assert abs(f1 * (p + r) - 2 * p * r) < 1e-12


def _labeled(mask_data, rng):
    h, w = mask_data.shape
    img = rng.random((h, w, 3), dtype=np.float32)
    pair = ImagePair(t0=img, t1=img.copy(), scene_id="e")
    return LabeledSample(pair=pair, mask=ChangeMask(mask_data))


class GtOracle:
    """Predictor stub that returns the GT as confident probabilities."""

    def __init__(self, dataset):
        self.lookup = {id(s.pair): s.mask for s in dataset}

    def __call__(self, pair):
        mask = self.lookup[id(pair)]
        return ProbabilityMask(np.where(mask.data > 0, 0.99, 0.01))


class TestEvaluate:
    def _dataset(self, seed=45, n=6):
        rng = np.random.default_rng(seed)
        out = []
        for _ in range(n):
            data = np.zeros((24, 24), dtype=np.uint8)
            for _ in range(int(rng.integers(1, 4))):
                r, c = rng.integers(0, 18, size=2)
                data[r : r + 4, c : c + 4] = 1
            out.append(_labeled(data, rng))
        return out

    def test_perfect_predictor(self):
        dataset = self._dataset()
        report = evaluate(GtOracle(dataset), dataset, EvalConfig())
        assert (report.precision, report.recall, report.f1) == (1.0, 1.0, 1.0)
        assert report.fp == 0 and report.fn == 0

    def test_constant_zero_predictor(self):
        dataset = self._dataset()
        report = evaluate(lambda pair: ProbabilityMask(np.full(pair.shape, 0.01)), dataset)
        assert report.precision == 1.0  # by convention: nothing predicted
        assert report.recall == 0.0
        assert report.tp == 0 and report.fp == 0 and report.fn > 0

    def test_min_area_applies_to_predictions_only(self):
        rng = np.random.default_rng(46)
        gt = np.zeros((24, 24), dtype=np.uint8)
        gt[2:4, 2:4] = 1  # area 4 GT region, below min_area
        dataset = [_labeled(gt, rng)]
        report = evaluate(GtOracle(dataset), dataset, EvalConfig(min_area=10))
        # prediction filtered away -> FN, but GT region still counted
        assert report.tp == 0 and report.fn == 1 and report.fp == 0

    def test_per_image_rows(self):
        dataset = self._dataset(n=4)
        report = evaluate(GtOracle(dataset), dataset)
        assert len(report.per_image) == 4
        assert [row.index for row in report.per_image] == [0, 1, 2, 3]

    def test_missing_mask_rejected(self):
        rng = np.random.default_rng(47)
        img = rng.random((8, 8, 3), dtype=np.float32)
        sample = LabeledSample(
            pair=ImagePair(t0=img, t1=img.copy(), scene_id="u"), mask=None
        )
        with pytest.raises(ConfigError):
            evaluate(lambda pair: ProbabilityMask(np.full(pair.shape, 0.5)), [sample])


class TestPrCurve:
    def test_single_threshold_matches_evaluate(self):
        rng = np.random.default_rng(48)
        dataset = TestEvaluate()._dataset(seed=48)
        predictor = GtOracle(dataset)
        points, _ = pr_curve(predictor, dataset, [0.5])
        report = evaluate(predictor, dataset)
        assert points == [(0.5, report.precision, report.recall)]

    def test_perfect_predictor_auc_one(self):
        dataset = TestEvaluate()._dataset(seed=49)
        points, auc = pr_curve(GtOracle(dataset), dataset, [0.1, 0.5, 0.9])
        assert abs(auc - 1.0) < 1e-12
        for _, precision, recall in points:
            assert precision == 1.0 and recall == 1.0

    def test_threshold_validation(self):
        dataset = TestEvaluate()._dataset(seed=50)
        predictor = GtOracle(dataset)
        with pytest.raises(ConfigError):
            pr_curve(predictor, dataset, [])
        with pytest.raises(ConfigError):
            pr_curve(predictor, dataset, [0.5, 0.4])
        with pytest.raises(ConfigError):
            pr_curve(predictor, dataset, [0.0, 0.5])


class TestPrAuc:
    def test_single_point(self):
        assert abs(pr_auc([(0.5, 1.0, 0.5)]) - 0.5) < 1e-12

    def test_two_point_trapezoid(self):
        points = [(0.3, 0.6, 0.8), (0.7, 1.0, 0.4)]
        # anchor (0, 1.0), then (0.4, 1.0) -> (0.8, 0.6)
        expected = 0.4 * 1.0 + 0.4 * (1.0 + 0.6) / 2.0
        assert abs(pr_auc(points) - expected) < 1e-12
