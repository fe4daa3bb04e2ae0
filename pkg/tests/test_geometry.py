import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iradonmap.geometry import (GeometryError, ImagingGeometry, build_bp_table, default_n_det,
                                dump_geometry_config, load_geometry_config, sinusoid_s, uniform_angles)


def test_geometry_validation():
    with pytest.raises(GeometryError):
        ImagingGeometry(0, 4, 4, 4)
    with pytest.raises(GeometryError):
        ImagingGeometry(4, 4, 4, 4, pixel_size=0)
    with pytest.raises(GeometryError):
        ImagingGeometry(4, 4, 2, 4, angles=[0.5, 0.1])
    with pytest.raises(GeometryError):
        ImagingGeometry(4, 4, 2, 4, angles=[0.0, np.pi])


def test_default_angles_exclude_pi():
    g = ImagingGeometry(4, 4, 8, 7)
    np.testing.assert_allclose(g.angles, np.arange(8) * np.pi / 8)
    assert g.angles[-1] < np.pi


def test_sinusoid_center_pixel_is_zero():
    g = ImagingGeometry(5, 7, 9, 9)
    for v in range(9):
        assert sinusoid_s(g, (3, 2), v) == 0.0


def test_sinusoid_cos_sin_identities():
    # pixel (i=2, j=3) of a 5x5 grid sits at x = 1, y = 0
    g = ImagingGeometry(5, 5, 2, 9, angles=[0.0, np.pi / 2])
    assert sinusoid_s(g, (2, 3), 0) == pytest.approx(1.0)
    assert sinusoid_s(g, (2, 3), 1) == pytest.approx(0.0, abs=1e-15)


def test_sinusoid_3_4_5():
    # 9x9 grid: x = 3 is column 7, y = 4 is row 0
    theta = math.atan2(4, 3)
    g = ImagingGeometry(9, 9, 1, 13, angles=[theta])
    assert sinusoid_s(g, (0, 7), 0) == pytest.approx(5.0, rel=1e-14)


def test_sinusoid_rejects_bad_index():
    g = ImagingGeometry(4, 4, 3, 7)
    with pytest.raises(GeometryError):
        sinusoid_s(g, (4, 0), 0)
    with pytest.raises(GeometryError):
        sinusoid_s(g, (0, 0), 3)


def test_table_single_pixel_central_bin():
    g = ImagingGeometry(1, 1, 6, 5)
    t = build_bp_table(g)
    assert t.valid.all()
    assert (t.k_lo == 2).all() and (t.t == 0).all()


def test_table_counts_and_coverage():
    g = ImagingGeometry(32, 32, 45, 47)
    t = build_bp_table(g)
    assert t.n_entries == 32 * 32 * 45 == 46_080
    # half-diagonal 16*sqrt(2) = 22.63 <= detector half-width (47-1)/2 = 23
    assert default_n_det(32, 32) <= 47
    assert t.n_invalid == 0


def test_truncated_detector_marks_invalid():
    g = ImagingGeometry(32, 32, 10, 11)
    t = build_bp_table(g)
    assert 0 < t.n_invalid < t.n_entries
    s = np.abs(t.s_values())
    assert np.all(t.t[~t.valid] == 0)
    assert np.all(s[t.valid] <= 5 + 1e-12)


def test_table_entry_invariants(geom32, table32):
    t = table32
    assert np.all((t.k_lo >= 0) & (t.k_lo < geom32.n_det - 1))
    assert np.all((t.t >= 0) & (t.t <= 1))
    np.testing.assert_array_equal(t.k_hi, t.k_lo + 1)


def test_table_recovers_sinusoid(geom32, table32):
    exact = np.array([[sinusoid_s(geom32, divmod(p, geom32.n_x), v) for p in range(0, geom32.n_pixels, 37)]
                      for v in range(geom32.n_views)])
    recovered = table32.s_values()[:, ::37]
    half_width = (geom32.n_det - 1) / 2 * geom32.det_spacing
    assert np.max(np.abs(recovered - exact)) <= 1e-12 * half_width


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 12), st.integers(3, 12), st.integers(4, 30),
       st.floats(0.3, 2.0), st.floats(0.3, 2.0))
def test_sinusoid_is_a_cosine(n_x, n_y, n_views, pixel_size, det_spacing):
    g = ImagingGeometry(n_x, n_y, n_views, default_n_det(n_x, n_y, pixel_size, det_spacing),
                        pixel_size, det_spacing)
    t = build_bp_table(g)
    s = t.s_values()
    basis = np.stack([np.cos(g.angles), np.sin(g.angles)], axis=1)
    coef, *_ = np.linalg.lstsq(basis, s, rcond=None)
    assert np.max(np.abs(basis @ coef - s)) < 1e-9
    x, y = g.pixel_centers()
    np.testing.assert_allclose(coef[0], x.ravel(), atol=1e-9)
    np.testing.assert_allclose(coef[1], y.ravel(), atol=1e-9)


def test_table_is_deterministic(geom32):
    a, b = build_bp_table(geom32), build_bp_table(geom32)
    assert np.array_equal(a.k_lo, b.k_lo) and np.array_equal(a.t, b.t)


def test_interp_weights_sum_to_one(table32):
    m = table32.interp_matrix()
    np.testing.assert_allclose(np.asarray(m.sum(axis=1)).ravel(), 1.0, rtol=0, atol=1e-15)


def test_config_round_trip(tmp_path):
    g = ImagingGeometry(40, 30, 12, 55, pixel_size=0.5, det_spacing=0.75)
    (tmp_path / "g.cfg").write_text(dump_geometry_config(g))
    assert load_geometry_config(tmp_path / "g.cfg") == g


def test_config_defaults_and_modes(tmp_path):
    (tmp_path / "g.cfg").write_text("# desk\nn_x = 64\nn_views = 145\nangle_mode = subsample:145:2\n")
    with pytest.raises(GeometryError):
        load_geometry_config(tmp_path / "g.cfg")
    (tmp_path / "g.cfg").write_text("n_x = 64\nangle_mode = subsample:145:2\n")
    g = load_geometry_config(tmp_path / "g.cfg")
    assert g.n_y == 64 and g.n_det == 91
    assert g.n_views == 72
    np.testing.assert_array_equal(g.angles, uniform_angles(145)[:143:2])
    (tmp_path / "g.cfg").write_text("n_x = 64\nbogus = 1\n")
    with pytest.raises(GeometryError):
        load_geometry_config(tmp_path / "g.cfg")


def test_desk_field_of_view_units():
    g = ImagingGeometry.desk(64, 60, pixel_size=2 / 64)
    assert g.det_spacing == g.pixel_size == 2 / 64 and g.n_det == 91
    x, _ = g.pixel_centers()
    assert x.max() == pytest.approx(1 - 1 / 64)
