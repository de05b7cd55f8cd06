import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lorentzgas import geometry


def test_rotation_examples():
    # d=2: e2 maps to e1 under rotation by -pi/2
    r = geometry.rotation_to_e1(np.array([0.0, 1.0]))
    assert np.allclose(r, np.array([[0.0, -1.0], [1.0, 0.0]]), atol=1e-15)
    # identity at e1 itself
    r = geometry.rotation_to_e1(np.array([1.0, 0.0]))
    assert np.allclose(r, np.eye(2), atol=1e-15)
    # the pole -e1 gets the fixed flip
    r = geometry.rotation_to_e1(np.array([-1.0, 0.0]))
    assert np.allclose(np.array([-1.0, 0.0]) @ r, [1.0, 0.0], atol=1e-15)
    assert np.isclose(np.linalg.det(r), 1.0)


@settings(max_examples=200, deadline=None)
@given(
    st.integers(min_value=2, max_value=3),
    st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3),
)
def test_rotation_properties(dim, raw):
    v = np.array(raw[:dim])
    if np.linalg.norm(v) < 1e-3 or v[0] / np.linalg.norm(v) < -0.999:
        v = np.eye(dim)[dim - 1]
    v = v / np.linalg.norm(v)
    r = geometry.rotation_to_e1(v)
    assert np.allclose(v @ r, np.eye(dim)[0], atol=1e-10)
    assert np.allclose(r @ r.T, np.eye(dim), atol=1e-10)
    assert np.isclose(np.linalg.det(r), 1.0, atol=1e-10)


def test_rotation_near_pole_stays_sane():
    # conditioning is allowed to degrade approaching -e1, but not collapse
    v = geometry.unit_vector([-1.0 + 1e-7, 1e-4])
    r = geometry.rotation_to_e1(v)
    assert np.allclose(v @ r, [1.0, 0.0], atol=1e-5)
    assert np.allclose(r @ r.T, np.eye(2), atol=1e-5)


def test_rotation_batch_matches_single():
    rng = np.random.default_rng(7)
    for dim in (2, 3):
        vs = rng.normal(size=(64, dim))
        vs /= np.linalg.norm(vs, axis=1)[:, None]
        vs[0] = np.eye(dim)[0]
        vs[1] = -np.eye(dim)[0]
        batch = geometry.rotation_to_e1_batch(vs)
        for v, r in zip(vs, batch):
            assert np.allclose(r, geometry.rotation_to_e1(v), atol=1e-14)


def test_angle_clamps_roundoff():
    v = geometry.unit_vector([1.0, 1.0])
    assert geometry.angle(v, v) < 3e-8
    assert np.isclose(geometry.angle(v, -v), np.pi)
    u = np.array([1.0 + 4e-16, 0.0])
    assert geometry.angle(u, np.array([1.0, 0.0])) == 0.0


def test_perp_embed_roundtrip():
    x = np.array([0.3, -0.2, 0.9])
    w = geometry.perp(x)
    assert w.shape == (2,)
    assert np.allclose(geometry.embed_perp(w, x[0]), x)


def test_unit_ball_volumes():
    assert geometry.unit_ball_volume(1) == 2.0
    assert np.isclose(geometry.unit_ball_volume(2), np.pi)
    assert np.isclose(geometry.unit_ball_volume(3), 4.0 * np.pi / 3.0)
    assert np.isclose(geometry.sphere_area(1), 2.0 * np.pi)
    assert np.isclose(geometry.sphere_area(2), 4.0 * np.pi)


def test_scale_params_conversions():
    sp = geometry.ScaleParams(rho=0.005, dim=2)
    assert np.isclose(sp.xi_factor, 0.005)
    assert np.allclose(sp.to_microscopic([1.0, 2.0]), [200.0, 400.0])
    assert np.isclose(sp.path_to_xi(100.0), 0.5)
    sp3 = geometry.ScaleParams(rho=0.1, dim=3)
    assert np.isclose(sp3.xi_factor, 0.01)
    assert np.isclose(sp3.xi_to_path(1.0), 100.0)


def test_scale_params_validation():
    with pytest.raises(ValueError):
        geometry.ScaleParams(rho=0.7, dim=2)
    with pytest.raises(ValueError):
        geometry.ScaleParams(rho=0.1, dim=4)


def test_mean_free_path_values():
    assert np.isclose(geometry.mean_free_path(1.0, 2), 0.5)
    assert np.isclose(geometry.mean_free_path(1.0, 3), 1.0 / np.pi)
    assert np.isclose(geometry.mean_free_path(4.0 / np.sqrt(3.0), 2),
                      np.sqrt(3.0) / 8.0)


def test_vector_validation():
    with pytest.raises(ValueError):
        geometry.unit_vector([0.0, 0.0])
    with pytest.raises(ValueError):
        geometry.as_vector([[1.0, 2.0]])
    with pytest.raises(ValueError):
        geometry.require_unit([1.0, 1.0])
