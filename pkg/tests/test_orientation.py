import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thetarbm.data import ImageDataset, subsample
from thetarbm.orientation import (
    PerturbationSpec,
    assign_orientations,
    estimate_angles,
    estimate_orientation,
    gradient_histograms,
    perturb_indices,
)
from thetarbm.rotation import build_support_set, rotate_rows

NINE = tuple(range(0, 360, 40))


def _circ(a, b):
    return abs((a - b + 180.0) % 360.0 - 180.0)


def test_vertical_edge_points_along_x():
    img = np.ones((8, 8))
    img[:, :4] = -1.0
    est = estimate_orientation(img.reshape(-1), 8)
    assert est.angle == 0.0 and not est.flat
    # only the two interior columns around the edge see a gradient, each (2 / 2) in magnitude
    assert est.histogram[0] == pytest.approx(2 * 6 * 1.0)
    assert est.histogram.sum() == pytest.approx(est.histogram[0])


def test_edge_rotated_quarter_turn():
    img = np.ones((8, 8))
    img[:, :4] = -1.0
    s = build_support_set([0, 90, 180, 270], 8, "exact")
    est = estimate_orientation(rotate_rows(img.reshape(-1), 90, s), 8)
    assert _circ(est.angle, 90.0) <= 10.0


def test_constant_image_is_flat():
    est = estimate_orientation(np.full(25, 0.7), 5)
    assert est.flat and est.angle == 0.0 and est.index == 0


def test_quantization_to_support():
    s = build_support_set(NINE, 8, "nn")
    assert s.nearest_index(38.0) == 1
    assert s.nearest_index(359.0) == 0
    assert s.nearest_index(20.0) == 0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), side=st.integers(4, 12), k=st.integers(1, 3))
def test_equivariance_under_exact_rotation(seed, side, k):
    s = build_support_set([0, 90, 180, 270], side, "exact")
    img = np.random.default_rng(seed).normal(size=side * side)
    a0 = estimate_orientation(img, side)
    a1 = estimate_orientation(rotate_rows(img, 90 * k, s), side)
    assert not a0.flat
    assert _circ(a1.angle, a0.angle + 90 * k) <= 10.0 + 1e-9


def test_histogram_rotates_by_whole_bins(rng):
    side = 9
    s = build_support_set([0, 90, 180, 270], side, "exact")
    img = rng.normal(size=side * side)
    h0 = gradient_histograms(img[None], side, 36)[0]
    h1 = gradient_histograms(rotate_rows(img, 90, s)[None], side, 36)[0]
    # a quarter turn moves every vote 9 bins; votes right on a bin edge may land next door
    assert np.abs(np.roll(h0, 9) - h1).sum() <= 0.05 * h0.sum()


def _assigned(rng, n=60, side=8):
    ds = ImageDataset(rng.random((n, side * side)), rng.integers(0, 10, n), side)
    return assign_orientations(ds, build_support_set(NINE, side, "nn"))


def test_perturb_trivial_specs(rng):
    ds = _assigned(rng)
    for spec in (PerturbationSpec(0, 0.5, 1), PerturbationSpec(3, 0.0, 1)):
        out = perturb_indices(ds, spec, 9)
        assert np.array_equal(out.orientation_index, ds.orientation_index)


def test_perturb_n1_p1_shifts_by_one():
    n = 1000
    ds = ImageDataset(np.zeros((n, 4)), np.zeros(n, dtype=int), 2).with_orientation(np.full(n, 4))
    out = perturb_indices(ds, PerturbationSpec(1, 1.0, 7), 9)
    d = out.orientation_index - 4
    assert set(np.unique(d)) == {-1, 1}
    assert abs(np.mean(d == 1) - 0.5) <= 0.05


def test_perturb_fraction_and_reproducibility():
    n, spec = 10_000, PerturbationSpec(3, 0.2, 11)
    ds = ImageDataset(np.zeros((n, 4)), np.zeros(n, dtype=int), 2).with_orientation(np.full(n, 4))
    a = perturb_indices(ds, spec, 9)
    b = perturb_indices(ds, spec, 9)
    assert np.array_equal(a.orientation_index, b.orientation_index)
    expect = 1 - (1 - spec.p) ** spec.n
    frac = np.mean(a.orientation_index != 4)
    assert abs(frac - expect) <= 3 * np.sqrt(expect * (1 - expect) / n)
    assert np.all(np.isnan(a.orientation_angle))


def test_perturb_is_per_image_stream():
    # the draw for image i does not depend on how many images come before it
    n = 50
    ds = ImageDataset(np.zeros((n, 4)), np.zeros(n, dtype=int), 2).with_orientation(np.zeros(n, dtype=int))
    full = perturb_indices(ds, PerturbationSpec(4, 0.5, 3), 9).orientation_index
    part = perturb_indices(ds.take(np.arange(20)), PerturbationSpec(4, 0.5, 3), 9).orientation_index
    assert np.array_equal(full[:20], part)


def test_perturb_wraps():
    ds = ImageDataset(np.zeros((200, 4)), np.zeros(200, dtype=int), 2).with_orientation(np.zeros(200, dtype=int))
    out = perturb_indices(ds, PerturbationSpec(2, 0.9, 0), 9).orientation_index
    assert out.min() >= 0 and out.max() <= 8 and np.any(out >= 7)


def test_perturb_validation(rng):
    with pytest.raises(ValueError):
        PerturbationSpec(-1, 0.1)
    with pytest.raises(ValueError):
        PerturbationSpec(1, 1.5)
    ds = ImageDataset(np.zeros((3, 4)), [0, 1, 2], 2)
    with pytest.raises(ValueError):
        perturb_indices(ds, PerturbationSpec(1, 0.5), 4)


def test_assign_commutes_with_subsample(rng):
    ds = ImageDataset(rng.random((80, 64)), rng.integers(0, 10, 80), 8)
    s = build_support_set(NINE, 8, "nn")
    a = subsample(assign_orientations(ds, s), 30, 5)
    b = assign_orientations(subsample(ds, 30, 5), s)
    assert np.array_equal(a.orientation_index, b.orientation_index)
    np.testing.assert_array_equal(a.orientation_angle, b.orientation_angle)


def test_assign_matches_single_estimates(rng):
    ds = _assigned(rng, n=25)
    s = build_support_set(NINE, 8, "nn")
    for i in range(len(ds)):
        est = estimate_orientation(ds.images[i], 8, support=s)
        assert est.index == ds.orientation_index[i]
        assert est.angle == ds.orientation_angle[i]
    angles, flat = estimate_angles(ds.images, 8)
    assert not flat.any()


def test_assign_rejects_bad_inputs(rng):
    ds = ImageDataset(rng.random((4, 16)), [0, 1, 2, 3], 4)
    with pytest.raises(ValueError):
        assign_orientations(ds, build_support_set(NINE, 4, "nn"), bins=4)
    with pytest.raises(ValueError):
        assign_orientations(ds, build_support_set(NINE, 5, "nn"))
