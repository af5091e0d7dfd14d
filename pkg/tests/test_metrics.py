import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gadfit import metrics as M
from gadfit.errors import MetricError, ParameterError

from oracles import brute_force_pro, flood_fill_components, pairwise_auroc


# ---------------------------------------------------------------------------
# auroc


def test_auroc_perfect_separation():
    scores = np.array([0.9, 0.8, 0.1, 0.2])
    positives = np.array([True, True, False, False])
    assert M.auroc(scores, positives) == 1.0


def test_auroc_all_ties_is_half():
    scores = np.ones(10)
    positives = np.arange(10) < 4
    assert M.auroc(scores, positives) == 0.5


def test_auroc_single_class_rejected():
    with pytest.raises(MetricError):
        M.auroc(np.array([1.0, 2.0]), np.array([True, True]))


def test_auroc_matches_pairwise_oracle_on_200_scores():
    rng = np.random.default_rng(0)
    scores = np.round(rng.normal(size=200), 2)  # rounding forces ties
    positives = rng.random(200) < 0.4
    assert abs(M.auroc(scores, positives) - pairwise_auroc(scores, positives)) <= 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_auroc_random_instances_match_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 120))
    scores = np.round(rng.normal(size=n), 1)
    positives = rng.random(n) < rng.uniform(0.2, 0.8)
    if positives.all() or not positives.any():
        positives[0] = True
        positives[-1] = False
    assert abs(M.auroc(scores, positives) - pairwise_auroc(scores, positives)) <= 1e-12


@given(st.integers(0, 5000))
@settings(max_examples=30, deadline=None)
def test_auroc_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=30)
    positives = rng.random(30) < 0.5
    if positives.all() or not positives.any():
        positives[0] = True
        positives[1] = False
    base = M.auroc(scores, positives)
    assert M.auroc(np.exp(scores), positives) == pytest.approx(base, abs=1e-12)
    assert M.auroc(3 * scores + 7, positives) == pytest.approx(base, abs=1e-12)


def test_auroc_negation_symmetry_for_tie_free_scores():
    rng = np.random.default_rng(3)
    scores = rng.permutation(40).astype(float)  # distinct values
    positives = rng.random(40) < 0.5
    positives[0] = True
    positives[1] = False
    assert M.auroc(scores, positives) + M.auroc(-scores, positives) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# pixel_auroc


def test_pixel_auroc_heatmap_equals_mask():
    mask = np.zeros((6, 6), dtype=bool)
    mask[1:3, 1:4] = True
    assert M.pixel_auroc([mask.astype(float)], [mask]) == 1.0


def test_pixel_auroc_constant_heatmap():
    mask = np.zeros((5, 5), dtype=bool)
    mask[2, 2] = True
    assert M.pixel_auroc([np.ones((5, 5))], [mask]) == 0.5


def test_pixel_auroc_is_flattened_auroc():
    rng = np.random.default_rng(4)
    heatmaps = [rng.random((4, 4)) for _ in range(3)]
    masks = [rng.random((4, 4)) < 0.3 for _ in range(3)]
    masks[0][0, 0] = True
    flat_scores = np.concatenate([h.ravel() for h in heatmaps])
    flat_masks = np.concatenate([m.ravel() for m in masks])
    assert M.pixel_auroc(heatmaps, masks) == pytest.approx(M.auroc(flat_scores, flat_masks), abs=1e-15)


def test_pixel_auroc_without_anomalies_rejected():
    with pytest.raises(MetricError):
        M.pixel_auroc([np.ones((3, 3))], [np.zeros((3, 3), dtype=bool)])


# ---------------------------------------------------------------------------
# connected components


def test_cc_empty_and_full():
    labels, count = M.connected_components(np.zeros((4, 4), dtype=bool))
    assert count == 0 and not labels.any()
    labels, count = M.connected_components(np.ones((4, 4), dtype=bool))
    assert count == 1 and (labels == 1).all()


def test_cc_checkerboard_is_one_region_under_8_connectivity():
    yy, xx = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    checker = ((yy + xx) % 2) == 0
    _, count = M.connected_components(checker)
    assert count == 1
    # the same mask under a 4-connectivity oracle falls apart into singletons
    _, count4 = flood_fill_components(checker, connectivity=4)
    assert count4 == checker.sum() == 32


def test_cc_labels_deterministic_scanline_order():
    mask = np.zeros((5, 5), dtype=bool)
    mask[0, 0] = True
    mask[0, 4] = True
    mask[4, 2] = True
    labels, count = M.connected_components(mask)
    assert count == 3
    assert labels[0, 0] == 1 and labels[0, 4] == 2 and labels[4, 2] == 3


@pytest.mark.parametrize("seed", range(25))
def test_cc_matches_flood_fill_oracle(seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((12, 12)) < rng.uniform(0.2, 0.7)
    labels, count = M.connected_components(mask)
    ref_labels, ref_count = flood_fill_components(mask, connectivity=8)
    assert count == ref_count
    # same partition: labels agree up to renaming; scanline order makes them equal
    np.testing.assert_array_equal(labels, ref_labels)


# ---------------------------------------------------------------------------
# pro curve


def test_pro_perfect_detector():
    mask = np.zeros((8, 8), dtype=bool)
    mask[1:3, 1:3] = True
    mask[5:7, 5:7] = True
    _, _, area = M.pro_curve([mask.astype(float)], [mask], fpr_limit=0.3)
    assert area == pytest.approx(1.0, abs=1e-12)


def test_pro_constant_heatmap_diagonal():
    # single threshold step: curve is the (0,0)-(1,1) diagonal, so the
    # normalized area up to 30% FPR is 0.15
    hm = np.full((8, 8), 0.7)
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:4, 2:4] = True
    _, _, area = M.pro_curve([hm], [mask], fpr_limit=0.3)
    assert area == pytest.approx(0.15, abs=1e-12)
    assert area == pytest.approx(brute_force_pro([hm], [mask], 0.3), abs=1e-12)


def test_pro_two_regions_hand_computed():
    # region A is predicted at the top threshold, region B never before
    # the background: overlap plateaus at 0.5 until FPR reaches 1
    hm = np.zeros((4, 4))
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, 0] = True
    mask[3, 3] = True
    hm[0, 0] = 5.0
    hm[~mask] = 1.0
    fprs, pros, area = M.pro_curve([hm], [mask], fpr_limit=0.3)
    np.testing.assert_allclose(fprs, [0.0, 0.0, 1.0, 1.0])
    np.testing.assert_allclose(pros, [0.0, 0.5, 0.5, 1.0])
    assert area == pytest.approx(0.5, abs=1e-12)
    assert area == pytest.approx(brute_force_pro([hm], [mask], 0.3), abs=1e-12)


def test_pro_fpr_limit_validation():
    mask = np.zeros((3, 3), dtype=bool)
    mask[0, 0] = True
    with pytest.raises(ParameterError):
        M.pro_curve([np.ones((3, 3))], [mask], fpr_limit=0.0)
    with pytest.raises(ParameterError):
        M.pro_curve([np.ones((3, 3))], [mask], fpr_limit=1.5)


def test_pro_without_regions_rejected():
    with pytest.raises(MetricError):
        M.pro_curve([np.ones((3, 3))], [np.zeros((3, 3), dtype=bool)])


def test_pro_area_monotone_in_fpr_limit():
    rng = np.random.default_rng(5)
    hm = rng.random((10, 10))
    mask = rng.random((10, 10)) < 0.2
    mask[0, 0] = True
    areas = [M.pro_curve([hm], [mask], fpr_limit=lim)[2] * lim for lim in (0.1, 0.3, 0.5, 1.0)]
    assert all(a <= b + 1e-12 for a, b in zip(areas, areas[1:]))


@pytest.mark.parametrize("seed", range(20))
def test_pro_matches_brute_force_oracle(seed):
    rng = np.random.default_rng([seed, 55])
    n_imgs = int(rng.integers(1, 4))
    heatmaps = []
    masks = []
    for _ in range(n_imgs):
        side = int(rng.integers(4, 17))
        heatmaps.append(np.round(rng.random((side, side)), 2))  # duplicates force tie handling
        mask = rng.random((side, side)) < rng.uniform(0.05, 0.4)
        masks.append(mask)
    if not any(m.any() for m in masks):
        masks[0][0, 0] = True
    if all(m.all() for m in masks):
        masks[0][0, 0] = False
    limit = float(rng.uniform(0.1, 1.0))
    _, _, area = M.pro_curve(heatmaps, masks, fpr_limit=limit)
    ref = brute_force_pro(heatmaps, masks, fpr_limit=limit)
    assert abs(area - ref) <= 1e-9


# ---------------------------------------------------------------------------
# report


def test_report_aggregate_and_csv():
    report = M.EvalReport()
    report.add(M.EvalRow("cat00", 0, 0.9, 0.8, 0.7, "frozen"))
    report.add(M.EvalRow("cat00", 1, 1.0, 0.9, 0.8, "frozen"))
    report.add(M.EvalRow("cat00", 0, 0.95, 0.85, 0.75, "finetuned"))
    agg = report.aggregate("frozen")
    assert agg["image_auroc"]["mean"] == pytest.approx(0.95)
    assert agg["image_auroc"]["sem"] == pytest.approx(np.std([0.9, 1.0], ddof=1) / np.sqrt(2))
    csv = report.to_csv()
    lines = csv.strip().split("\n")
    assert lines[0] == "category,fold,image_auroc,pixel_auroc,pro_30,variant"
    assert len(lines) == 4
    assert report.to_json()["aggregate"]["finetuned"]["pro_30"]["mean"] == pytest.approx(0.75)
