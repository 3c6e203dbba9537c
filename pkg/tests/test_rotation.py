import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thetarbm.rotation import (
    SENTINEL,
    RotationModeError,
    ShapeError,
    adjoint_rows,
    build_support_set,
    build_table,
    inverse_table,
    rotate_column,
    rotate_rows,
    rotation_matrix,
)

NINE = tuple(range(0, 360, 40))


def test_forty_degree_support_set_nn():
    s = build_support_set(NINE, 28, "nn")
    assert s.size == 9 and s.angles[1] == 40.0


def test_exact_tables_are_bijections():
    s = build_support_set([0, 90, 180, 270], 5, "exact")
    for phi in s.angles:
        t = s.table(phi)
        assert sorted(t) == list(range(25))


def test_exact_rejects_non_right_angles():
    with pytest.raises(RotationModeError):
        build_support_set([0, 45], 4, "exact")
    s = build_support_set([0, 90], 4, "exact")
    with pytest.raises(RotationModeError):
        s.table(30)


def test_support_validation():
    with pytest.raises(ValueError):
        build_support_set([], 4)
    with pytest.raises(ValueError):
        build_support_set([90, 0], 4)
    with pytest.raises(ValueError):
        build_support_set([0, 360], 4)
    with pytest.raises(ValueError):
        build_support_set([0], 4, "bilinear")


def test_two_by_two_hand_mapping():
    # pixels (row, col): a=(0,0) b=(0,1) c=(1,0) d=(1,1); counter-clockwise quarter turn
    # moves b to the top-left, d to the top-right, a to the bottom-left, c to the bottom-right
    s = build_support_set([0, 90], 2, "exact")
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    out = rotate_rows(np.array([a, b, c, d]), 90, s)
    np.testing.assert_array_equal(out, [b, d, a, c])
    np.testing.assert_array_equal(build_table(90, 2), [1, 3, 0, 2])


def test_matches_numpy_rot90(rng):
    s = build_support_set([0, 90, 180, 270], 7, "exact")
    img = rng.random((7, 7))
    for k, phi in enumerate((0, 90, 180, 270)):
        np.testing.assert_array_equal(rotate_rows(img.reshape(-1), phi, s), np.rot90(img, k).reshape(-1))


def test_one_hot_half_turn():
    side = 6
    s = build_support_set([0, 180], side, "exact")
    for r, c in [(0, 0), (1, 4), (5, 2)]:
        x = np.zeros(side * side)
        x[r * side + c] = 1.0
        y = rotate_column(x, 180, s).reshape(side, side)
        assert y[side - 1 - r, side - 1 - c] == 1.0 and y.sum() == 1.0


def test_identity_and_inverse_column(rng):
    s = build_support_set([0, 90, 180, 270], 6, "exact")
    x = rng.random(36)
    assert np.array_equal(rotate_column(x, 0, s), x)
    assert np.array_equal(rotate_column(rotate_column(x, 90, s), -90, s), x)


def test_shape_errors(rng):
    s = build_support_set([0, 90], 4, "exact")
    with pytest.raises(ShapeError):
        rotate_rows(rng.random((3, 15)), 90, s)
    with pytest.raises(ShapeError):
        rotate_column(rng.random((2, 16)), 90, s)


@settings(max_examples=25, deadline=None)
@given(side=st.integers(1, 9), a=st.sampled_from([0, 90, 180, 270]), b=st.sampled_from([0, 90, 180, 270]),
       seed=st.integers(0, 1000))
def test_exact_group_laws(side, a, b, seed):
    s = build_support_set([0, 90, 180, 270], side, "exact")
    x = np.random.default_rng(seed).normal(size=(5, side * side))
    assert np.array_equal(rotate_rows(x, 0, s), x)
    assert np.array_equal(rotate_rows(rotate_rows(x, a, s), -a, s), x)
    # closure: R_b R_a = R_(a+b)
    assert np.array_equal(rotate_rows(rotate_rows(x, a, s), b, s), rotate_rows(x, a + b, s))
    y = x
    for _ in range(4):
        y = rotate_rows(y, 90, s)
    assert np.array_equal(y, x)


def test_table_closure_on_differences():
    s = build_support_set([0, 90, 180, 270], 5, "exact")
    for pa in s.angles:
        for pb in s.angles:
            for pc in s.angles:
                ab, bc, ac = s.table(pb - pa), s.table(pc - pb), s.table(pc - pa)
                # rotate_rows(x, t)[i] = x[t[i]]: applying ab then bc reads x[ab[bc[i]]]
                assert np.array_equal(ab[bc], ac)


def test_inverse_table_and_matrix(rng):
    s = build_support_set([0, 90], 5, "exact")
    t = s.table(90)
    inv = inverse_table(t)
    assert np.array_equal(t[inv], np.arange(25))
    T = rotation_matrix(t)
    np.testing.assert_array_equal(T @ T.T, np.eye(25))
    x = rng.random(25)
    np.testing.assert_array_equal(T @ x, rotate_column(x, 90, s))


def test_nn_inscribed_disc_has_no_fill():
    for side in (8, 13, 28):
        c = (side - 1) / 2.0
        yy, xx = np.mgrid[:side, :side]
        disc = (np.hypot(yy - c, xx - c) <= side / 2.0 - 1).reshape(-1)
        for theta in (13.0, 40.0, 200.0, 317.5):
            t = build_table(theta, side)
            assert np.all(t[disc] != SENTINEL)


def test_nn_table_has_zero_fill_outside():
    t = build_table(45.0, 10)
    assert np.any(t == SENTINEL)
    with pytest.raises(RotationModeError):
        inverse_table(t)


def test_adjoint_is_transpose(rng):
    s = build_support_set(NINE, 9, "nn")
    for theta in (40.0, 120.0, 20.0):
        T = rotation_matrix(s.table(theta))
        a = rng.normal(size=(4, 81))
        np.testing.assert_allclose(adjoint_rows(a, theta, s), a @ T, atol=1e-12)


def test_adjoint_of_permutation_is_inverse_rotation(rng):
    s = build_support_set([0, 90, 180, 270], 6, "exact")
    a = rng.normal(size=(3, 36))
    assert np.array_equal(adjoint_rows(a, 90, s), rotate_rows(a, -90, s))


def test_with_mode_and_nearest_index():
    s = build_support_set(NINE, 8, "nn")
    assert s.nearest_index(38.0) == 1
    assert s.nearest_index(359.0) == 0
    assert s.nearest_index(20.0) == 0  # tie goes to the lower index
    assert s.nearest_index(335.0) == 8
    assert s.nearest_index(340.0) == 0  # equidistant from 320 and 360
    ex = build_support_set([0, 90, 180, 270], 8, "exact")
    free = ex.with_mode("nn")
    assert free.mode == "nn" and np.array_equal(free.table(90), ex.table(90))
    free.table(20.0)
