import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree

from misreg import presets
from misreg.errors import DegenerateGeometryError, EmptyMaskError, InputError
from misreg.geometry import (
    build_cartesian_grid,
    build_hex_grid,
    build_projector,
    build_subaperture_grid,
    compute_valid_mask,
    influence_matrix,
    project_commands,
    subaperture_flux,
)


def test_gpao40_counts():
    # frozen: 40x40 lattice clipped to the 1432-actuator disc, 0.14 obscuration
    s = presets.build_system("gpao40")
    assert s.grid.n_act == 1432
    assert s.sub.n_valid == 1240


def test_cartesian_grid_is_centered_and_on_lattice():
    g = build_cartesian_grid(21, 0.1, 2.15)
    assert np.allclose(g.positions.mean(axis=0), 0.0, atol=1e-12)
    frac = g.positions / 0.1
    assert np.allclose(frac, np.round(frac))
    assert np.hypot(*g.positions.T).max() <= 1.075 + 1e-12


def test_cartesian_grid_rejects_tiny_aperture():
    with pytest.raises(DegenerateGeometryError):
        build_cartesian_grid(4, 1.0, 0.1)


@pytest.mark.parametrize("rings", [1, 2, 4])
def test_hex_ring_counts_and_spacing(rings):
    g = build_hex_grid(rings, 0.5)
    assert g.n_act == 1 + 3 * rings * (rings + 1)
    d, _ = cKDTree(g.positions).query(g.positions, k=2)
    assert np.allclose(d[:, 1], 0.5)


def test_hex_drop_center_gives_60():
    g = build_hex_grid(4, 1.0, drop_center=True)
    assert g.n_act == 60
    assert not np.any(np.all(np.isclose(g.positions, 0.0), axis=1))


def test_subaperture_mask_obscuration():
    sub = build_subaperture_grid(10, 1.0, 0.3)
    c = (np.arange(10) - 4.5) * 0.1
    rr = np.hypot(*np.meshgrid(c, c))
    assert np.array_equal(sub.wfs_mask, (rr > 0.15) & (rr <= 0.5))
    with pytest.raises(InputError):
        build_subaperture_grid(10, 1.0, 1.0)


def test_valid_mask_threshold():
    flux = np.array([[1.0, 0.4], [0.6, 0.0]])
    v = compute_valid_mask(flux, 0.5)
    # median 0.5, threshold 0.25; zero flux stays out
    assert v.valid.tolist() == [[True, True], [True, False]]
    with pytest.raises(EmptyMaskError):
        compute_valid_mask(np.zeros((3, 3)))


def test_flux_shift_moves_pupil():
    sub = build_subaperture_grid(8, 1.0)
    f0 = subaperture_flux(sub)
    f1 = subaperture_flux(sub, (1.0, 0.0))
    assert np.allclose(f1[:, 1:], f0[:, :-1])


def test_influence_partition_of_unity_inside():
    g = build_cartesian_grid(11, 1.0, 11.0)
    pts = np.random.default_rng(0).uniform(-2, 2, (50, 2))
    w = influence_matrix(g, pts)
    assert np.allclose(np.asarray(w.sum(axis=1)).ravel(), 1.0)


def test_influence_peak_at_actuator():
    g = build_cartesian_grid(3, 1.0, 3.0)
    w = influence_matrix(g, g.positions).toarray()
    assert np.all(np.argmax(w, axis=1) == np.arange(g.n_act))


def test_projector_size_and_pupil(chara):
    p = chara.projector
    assert p.raster_n == math.ceil(1.5 * chara.grid.clear_aperture_diameter / chara.grid.pitch - 1e-9)
    out = project_commands(p, np.ones(p.n_act))
    assert np.all(out[~p.pupil] == 0.0)
    with pytest.raises(InputError):
        project_commands(p, np.ones(p.n_act + 1))
    with pytest.raises(InputError):
        build_projector(chara.grid, 5.0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=4))
def test_projector_is_linear(coefs):
    s = presets.build_system("chara")
    rng = np.random.default_rng(len(coefs))
    vecs = rng.standard_normal((len(coefs), s.grid.n_act))
    lhs = project_commands(s.projector, np.asarray(coefs) @ vecs)
    rhs = sum(c * project_commands(s.projector, v) for c, v in zip(coefs, vecs))
    assert np.allclose(lhs, rhs, atol=1e-10)
