import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdmesa.density import (
    AnnotationSet,
    count_region,
    count_total,
    estimate_density,
    rasterize_ground_truth,
    read_annotations,
    write_annotations,
)
from crowdmesa.features import FeatureIndexMap, stack_feature_maps
from crowdmesa.grids import BoxRegion, FormatError, full_box
from oracles import gaussian_kernel_loop


def test_empty_annotations_give_zero_map():
    d = rasterize_ground_truth(AnnotationSet("f", np.zeros((0, 2))), 8.0, 20, 10)
    assert d.shape == (10, 20) and count_total(d) == 0


@pytest.mark.parametrize("sigma", [0.3, 1.0, 4.5, 32.0])
def test_single_annotation_unit_mass(sigma):
    d = rasterize_ground_truth(AnnotationSet("f", [[10.3, 7.9]]), sigma, 30, 20)
    assert count_total(d) == pytest.approx(1.0, rel=1e-12)


def test_kernel_matches_loop_oracle():
    for x, y, s in [(10.3, 7.9, 2.0), (0.2, 0.1, 3.0), (29.9, 19.5, 5.0)]:
        d = rasterize_ground_truth(AnnotationSet("f", [[x, y]]), s, 30, 20)
        assert np.allclose(d, gaussian_kernel_loop(x, y, s, 30, 20), atol=1e-14)


def test_263_annotations_sum():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, [360, 270], (263, 2))
    d = rasterize_ground_truth(AnnotationSet("f", pts), 8.0, 360, 270)
    assert abs(count_total(d) - 263) <= 263e-9


def test_rasterize_validation():
    with pytest.raises(ValueError):
        rasterize_ground_truth(AnnotationSet("f", [[21, 1]]), 2.0, 20, 10)
    with pytest.raises(ValueError):
        rasterize_ground_truth(AnnotationSet("f", [[1, 1]]), 0.0, 20, 10)


def test_truncated_support_leaves_far_box_empty():
    d = rasterize_ground_truth(AnnotationSet("f", [[5.0, 5.0]]), 1.0, 30, 30)
    assert abs(count_region(d, BoxRegion(9, 0, 29, 29))) <= 1e-9


def test_estimate_density_examples():
    fm = FeatureIndexMap(np.full((10, 10), 3), (5,))
    w = np.zeros(5)
    assert count_total(estimate_density(fm, w)) == 0
    w[3] = 0.5
    assert count_total(estimate_density(fm, w)) == 50
    a = FeatureIndexMap(np.full((2, 2), 1), (3,))
    b = FeatureIndexMap(np.full((2, 2), 0), (2,))
    s = stack_feature_maps([a, b])
    w = np.array([0.0, 0.2, 0.0, 0.3, 0.0])
    assert np.allclose(estimate_density(s, w), 0.5)
    with pytest.raises(ValueError):
        estimate_density(s, np.zeros(4))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 3), st.floats(0, 3))
def test_estimate_density_linear_in_weights(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    fm = FeatureIndexMap(rng.integers(0, 6, (5, 7, 2)), (6, 6))
    w1, w2 = rng.random(12), rng.random(12)
    lhs = estimate_density(fm, alpha * w1 + beta * w2)
    rhs = alpha * estimate_density(fm, w1) + beta * estimate_density(fm, w2)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_count_region_whole_and_halves():
    rng = np.random.default_rng(2)
    d = rng.random((12, 17))
    assert count_region(d, full_box(17, 12)) == pytest.approx(count_total(d), rel=1e-12)
    left = count_region(d, BoxRegion(0, 0, 7, 11))
    right = count_region(d, BoxRegion(8, 0, 16, 11))
    assert abs(left + right - count_total(d)) <= 1e-9 * count_total(d)
    with pytest.raises(ValueError):
        count_region(d, BoxRegion(0, 0, 17, 11))


def test_rasterized_gt_counts_back():
    pts = np.array([[3.2, 4.1], [10.0, 2.0], [7.7, 7.7]])
    d = rasterize_ground_truth(AnnotationSet("f", pts), 1.5, 15, 10)
    assert count_total(d) == pytest.approx(3.0, rel=1e-12)


def test_annotation_csv_round_trip(tmp_path):
    sets = [AnnotationSet("a", [[1.25, 2.5], [0.1, 0.2]]), AnnotationSet("b", [[3.0, 4.0]])]
    write_annotations(tmp_path / "a.csv", sets)
    text = (tmp_path / "a.csv").read_bytes()
    assert text.startswith(b"frame,x,y\n") and b"\r" not in text
    back = read_annotations(tmp_path / "a.csv")
    assert list(back) == ["a", "b"]
    assert np.array_equal(back["a"].points, sets[0].points)
    (tmp_path / "bad.csv").write_text("frame,x\n")
    with pytest.raises(FormatError):
        read_annotations(tmp_path / "bad.csv")
