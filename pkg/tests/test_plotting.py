import numpy as np
import pytest

from thetarbm.plotting import (
    MID_GRAY,
    export_filters,
    pgm_bytes,
    plot_error_grid,
    plot_gamma_histograms,
    plot_training_curves,
    read_pgm,
    select_filters,
    tile_filters,
    to_gray,
    write_pgm,
)
from thetarbm.rbm import ThetaRBM
from thetarbm.rotation import build_support_set, rotate_rows
from thetarbm.trainer import TrainConfig, init_model


def test_constant_filter_is_mid_gray():
    assert np.all(to_gray(np.full((3, 3), -2.5)) == MID_GRAY)
    g = to_gray(np.array([[0.0, 1.0], [0.5, 0.25]]))
    assert g.min() == 0 and g.max() == 255


def test_pgm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, size=(7, 11), dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)
    assert pgm_bytes(img).startswith(b"P5\n11 7\n255\n")


def test_tile_layout(rng):
    f = rng.random((5, 9))
    canvas = tile_filters(f, 3, 2, 3)
    assert canvas.shape == (2 * 3 + 1, 3 * 3 + 2)
    assert np.all(canvas[3, :] == 0) and np.all(canvas[:, 3] == 0)
    np.testing.assert_array_equal(canvas[4:7, 4:7], to_gray(f[4].reshape(3, 3)))
    with pytest.raises(ValueError):
        tile_filters(f, 3, 2, 2)


def test_slices_of_one_unit_are_rotations(tmp_path):
    side = 6
    s = build_support_set([0, 90, 180, 270], side, "exact")
    m = init_model(TrainConfig(n_hidden=3), s, 3, side * side, np.random.default_rng(1))
    canvas = export_filters(m, tmp_path / "f.pgm", 3, 4)
    assert np.array_equal(read_pgm(tmp_path / "f.pgm"), canvas)
    for u in range(3):
        y = u * (side + 1)
        base = canvas[y:y + side, 0:side]
        for k, phi in enumerate(s.angles):
            x = k * (side + 1)
            tile = canvas[y:y + side, x:x + side].reshape(-1)
            assert np.array_equal(tile, rotate_rows(base.reshape(-1), phi, s))


def test_nine_slice_grid(tmp_path, rng):
    m = ThetaRBM(rng.normal(size=(9, 12, 16)), np.zeros(12), np.zeros(16), "gaussian", 4,
                 tuple(float(a) for a in range(0, 360, 40)), "nn")
    canvas = export_filters(m, tmp_path / "g.pgm", 10, 9, png=True)
    assert canvas.shape == (10 * 5 - 1, 9 * 5 - 1)
    assert (tmp_path / "g.png").exists()
    # row 0 holds unit 0 in every slice
    np.testing.assert_array_equal(canvas[0:4, 5:9], to_gray(m.W[1, 0].reshape(4, 4)))


def test_select_filters_bounds(rng):
    m = ThetaRBM(rng.normal(size=(2, 3, 4)), np.zeros(3), np.zeros(4), "gaussian", 2, (0.0, 90.0))
    assert select_filters(m, [2, 0], [1]).shape == (2, 4)
    with pytest.raises(IndexError):
        select_filters(m, [3], [0])
    with pytest.raises(IndexError):
        select_filters(m, [0], [2])


def test_report_figures(tmp_path, rng):
    plot_training_curves({"a": [{"epoch": 1, "recon_error": 1.0}, {"epoch": 2, "recon_error": 0.5}]},
                         tmp_path / "c.png")
    plot_gamma_histograms({"a": rng.random(20), "b": np.array([np.nan, 0.5])}, tmp_path / "h.png")
    plot_error_grid(rng.random((2, 3)) * 10, ["n=1", "n=2"], ["a", "b", "c"], tmp_path / "e.png", "t")
    for name in ("c.png", "h.png", "e.png"):
        assert (tmp_path / name).read_bytes()[:4] == b"\x89PNG"
