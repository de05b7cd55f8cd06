import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import simpson

from lorentzgas import scattering
from lorentzgas.geometry import rotation_to_e1
from lorentzgas.scattering import (
    HardSphereMap,
    LinearWallProfile,
    MuffinTinMap,
    MuffinTinProfile,
    PotentialScatteringMap,
    TabulatedProfile,
    beta_constant,
    deflection_angle,
    dispersing_check,
    make_scattering_map,
    scattering_time,
    specular_map,
    total_cross_section,
    turning_radius,
)


def muffin_theta(alpha, w):
    # closed-form deflection of the truncated Coulomb scatterer; the
    # product form of 1 - w^2 keeps the grazing end accurate
    w = np.asarray(w, dtype=float)
    c = np.sqrt((1.0 - w) * (1.0 + w))
    return 2.0 * np.arctan2(alpha * c, (1.0 + alpha) * w)


def random_rotation(rng, dim):
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def sphere_cross_section_integral(m, n=8001):
    """Integrate the differential cross section over outgoing directions."""
    phis = np.linspace(1e-9, np.pi - 1e-9, n)
    e1 = np.eye(m.dim)[0]
    if m.dim == 2:
        sig = np.array([m.cross_section(e1, [np.cos(p), np.sin(p)])
                        for p in phis])
        return 2.0 * simpson(sig, x=phis)
    sig = np.array([m.cross_section(e1, [np.cos(p), np.sin(p), 0.0])
                    for p in phis])
    return 2.0 * np.pi * simpson(sig * np.sin(phis), x=phis)


class BottomlessProfile(scattering.PotentialProfile):
    """Attractor so strong the radial speed never vanishes."""

    def value(self, r):
        r = np.asarray(r, dtype=float)
        return np.where(r < 1.0, -1.0 / r ** 2, 0.0)


@pytest.fixture(scope="module")
def muffin_map():
    return MuffinTinMap(1.0)


@pytest.fixture(scope="module")
def attractive_map():
    return MuffinTinMap(-2.0)


# ---------------------------------------------------------------------------
# specular reflection


def test_specular_head_on():
    v_plus, b_plus = specular_map([1.0, 0.0], [-1.0, 0.0])
    assert np.allclose(v_plus, [-1.0, 0.0], atol=1e-15)
    assert np.allclose(b_plus, [-1.0, 0.0], atol=1e-15)


def test_specular_sixty_degree_normal():
    v_plus, _ = specular_map([1.0, 0.0], [-np.sqrt(3) / 2, 0.5])
    assert np.allclose(v_plus, [-0.5, np.sqrt(3) / 2], atol=1e-12)


def test_specular_rejects_outgoing_pair():
    with pytest.raises(ValueError, match="incoming"):
        specular_map([1.0, 0.0], [1.0, 0.0])
    with pytest.raises(ValueError, match="incoming"):
        specular_map([1.0, 0.0], [0.0, 1.0])


def test_specular_random_pairs_follow_impact_law():
    # the impact parameter sqrt(1 - (v.b)^2) must equal cos(phi/2) for the
    # separation angle phi between incoming and outgoing directions
    rng = np.random.default_rng(3)
    for dim in (2, 3):
        for _ in range(50):
            v = rng.normal(size=dim)
            v /= np.linalg.norm(v)
            while True:
                b = rng.normal(size=dim)
                b /= np.linalg.norm(b)
                if v @ b < -1e-3:
                    break
            v_plus, _ = specular_map(v, b)
            assert np.isclose(np.linalg.norm(v_plus), 1.0, atol=1e-12)
            phi = np.arccos(np.clip(v @ v_plus, -1.0, 1.0))
            w = np.sqrt(max(1.0 - (v @ b) ** 2, 0.0))
            assert np.isclose(w, np.cos(0.5 * phi), atol=1e-9)


# ---------------------------------------------------------------------------
# turning radius


def test_turning_radius_steep_wall_stays_near_boundary():
    r0 = turning_radius(LinearWallProfile(1e6), 0.5)
    assert abs(r0 - 1.0) < 1e-5


def test_turning_radius_matches_quadratic_root():
    rng = np.random.default_rng(11)
    for alpha in (1.0, -2.0):
        prof = MuffinTinProfile(alpha)
        for w in rng.uniform(0.02, 0.98, size=30):
            assert np.isclose(turning_radius(prof, float(w)),
                              prof.turning_point(float(w)), rtol=1e-10)


def test_turning_radius_grazing_limit():
    prof = MuffinTinProfile(1.0)
    r_a = turning_radius(prof, 0.999)
    r_b = turning_radius(prof, 1.0 - 1e-8)
    assert r_a < r_b < 1.0
    assert 1.0 - r_b < 1e-7


def test_turning_radius_domain_and_failure():
    prof = MuffinTinProfile(1.0)
    for bad in (0.0, 1.0, -0.5, 1.5):
        with pytest.raises(ValueError, match="impact parameter"):
            turning_radius(prof, bad)
    with pytest.raises(ValueError, match="no turning radius"):
        turning_radius(BottomlessProfile(), 0.5)


# ---------------------------------------------------------------------------
# deflection angle and interior time


def test_deflection_muffin_tin_reference_point():
    got = deflection_angle(MuffinTinProfile(1.0), 1.0 / np.sqrt(2.0))
    assert abs(got - 2.0 * np.arctan(0.5)) < 1e-9


def test_deflection_steep_wall_approaches_specular():
    got = deflection_angle(LinearWallProfile(1e4), 0.5)
    assert abs(got - (np.pi - 2.0 * np.arcsin(0.5))) < 1e-2


def test_deflection_grazing_tends_to_zero():
    prof = MuffinTinProfile(1.0)
    assert 0.0 < deflection_angle(prof, 1.0 - 1e-6) < 4e-3
    assert 0.0 < deflection_angle(prof, 1.0 - 1e-10) < 4e-5


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0, -2.0])
def test_muffin_tin_closed_form_sweep(alpha):
    prof = MuffinTinProfile(alpha)
    ws = np.linspace(1e-6, 1.0 - 1e-6, 200)
    worst = max(abs(deflection_angle(prof, float(w)) - muffin_theta(alpha, w))
                for w in ws)
    assert worst < 1e-8


def test_time_steep_wall_vanishes():
    assert scattering_time(LinearWallProfile(1e6), 0.5) < 1e-4


def test_time_matches_independent_quadrature():
    # frozen values from the factored-radicand route with scipy's algebraic
    # endpoint weight, sharing nothing with the panel quadrature used here
    assert abs(scattering_time(MuffinTinProfile(1.0), 0.99)
               - 0.14130341400046958) < 1e-6
    assert abs(scattering_time(MuffinTinProfile(1.0), 0.5)
               - 0.9518408519815955) < 1e-9
    assert abs(scattering_time(MuffinTinProfile(-2.0), 0.3)
               - 0.9922073495765733) < 1e-9


def test_time_bound_on_full_grid(muffin_map, attractive_map):
    maps = [muffin_map, attractive_map, MuffinTinMap(-0.5),
            PotentialScatteringMap(LinearWallProfile(1.0))]
    for m in maps:
        bound = (np.pi - m.deflection_grid) / m.impact_grid
        assert np.all(m.time_grid >= 0.0)
        assert np.all(m.time_grid < bound)


# ---------------------------------------------------------------------------
# dispersing checks


def test_beta_constant_frozen_values():
    alpha, beta = beta_constant()
    assert abs(alpha - 0.40935945432933585) < 1e-10
    assert abs(beta - 0.7124018585359926) < 1e-10
    poly = lambda x: 2 * x ** 5 + 2 * x ** 4 - 8 * x ** 3 + 2 * x ** 2 - 7 * x + 3
    assert abs(poly(alpha)) < 1e-10
    assert poly(0.0) == 3.0 and poly(1.0) == -6.0


def test_dispersing_reports():
    rep = dispersing_check(MuffinTinProfile(1.0))
    assert rep.dispersing and rep.beta_ok
    assert rep.theta_prime_sign == -1 and rep.head_on_multiple == 1

    # the Eaton lens turns every ray by exactly pi, so the deflection is
    # flat and the scatterer is not dispersing
    rep = dispersing_check(MuffinTinProfile(-1.0))
    assert rep.theta_prime_sign == 0
    assert not rep.dispersing

    rep = dispersing_check(LinearWallProfile(1.0))
    assert rep.beta_ok

    rep = dispersing_check(LinearWallProfile(0.6))
    assert not rep.beta_ok


# ---------------------------------------------------------------------------
# cross sections


def test_hard_sphere_cross_section_values():
    m3 = HardSphereMap(3)
    rng = np.random.default_rng(5)
    for _ in range(20):
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        if m3.admissible(v, u):
            assert np.isclose(m3.cross_section(v, u), 0.25, atol=1e-12)
    m2 = HardSphereMap(2)
    phi = 2.0 * np.pi / 3.0
    sigma = m2.cross_section([1.0, 0.0], [np.cos(phi), np.sin(phi)])
    assert np.isclose(sigma, np.sqrt(3) / 4, atol=1e-12)
    assert m2.cross_section([1.0, 0.0], [1.0, 0.0]) == 0.0


def test_cross_section_normalization(muffin_map, attractive_map):
    cases = [HardSphereMap(2), HardSphereMap(3), muffin_map,
             MuffinTinMap(1.0, dim=3), attractive_map,
             PotentialScatteringMap(LinearWallProfile(1.0))]
    for m in cases:
        total = sphere_cross_section_integral(m)
        assert abs(total - total_cross_section(m.dim)) < 1e-6, m.describe()


def test_cross_section_symmetry_and_rotation_invariance(muffin_map,
                                                        attractive_map):
    rng = np.random.default_rng(17)
    for m in (HardSphereMap(3), muffin_map, attractive_map):
        for _ in range(40):
            v = rng.normal(size=m.dim)
            v /= np.linalg.norm(v)
            u = rng.normal(size=m.dim)
            u /= np.linalg.norm(u)
            k = random_rotation(rng, m.dim)
            s = m.cross_section(v, u)
            assert abs(s - m.cross_section(u, v)) < 1e-8
            assert abs(s - m.cross_section(v @ k, u @ k)) < 1e-8


def test_cross_section_rejects_dimension_mismatch(muffin_map):
    with pytest.raises(ValueError):
        muffin_map.cross_section([1.0, 0.0, 0.0], [0.0, 1.0, 0.0])


def test_huge_strength_approaches_hard_sphere():
    big = MuffinTinMap(1e4, grid_size=64)
    hs = HardSphereMap(2)
    ws = np.linspace(1e-3, 1.0 - 1e-3, 300)
    assert np.max(np.abs(big.deflection(ws) - hs.deflection(ws))) < 1e-3


# ---------------------------------------------------------------------------
# exit bookkeeping


def test_exit_head_on_reverses(muffin_map):
    v = np.array([0.6, -0.8])
    for m in (HardSphereMap(2), muffin_map):
        v_plus, w_exit = m.exit_data(v, np.zeros(1))
        assert np.allclose(v_plus, -v, atol=1e-12)
        assert np.allclose(w_exit, 0.0, atol=1e-12)


def test_exit_hard_sphere_half_impact():
    m = HardSphereMap(2)
    v_plus, w_exit = m.exit_data([1.0, 0.0], [0.5])
    # deflection pi - 2 arcsin(1/2) puts the outgoing ray at 120 degrees
    assert np.allclose(v_plus, [-0.5, np.sqrt(3) / 2], atol=1e-12)
    phi = np.arccos(np.clip(v_plus[0], -1.0, 1.0))
    assert np.isclose(np.cos(0.5 * phi), 0.5, atol=1e-12)
    assert np.isclose(np.linalg.norm(w_exit), 0.5, atol=1e-12)


def test_exit_rotation_covariance(muffin_map):
    # rotating the incoming data rotates the whole exit picture: compare
    # outgoing directions and the reconstructed lab-frame exit contact point
    rng = np.random.default_rng(23)
    for m in (HardSphereMap(3), muffin_map):
        d = m.dim
        for _ in range(50):
            v = rng.normal(size=d)
            v /= np.linalg.norm(v)
            w_vec = rng.normal(size=d - 1)
            w_vec *= rng.uniform(0.1, 0.9) / np.linalg.norm(w_vec)
            k = random_rotation(rng, d)

            v_plus, w_exit = m.exit_data(v, w_vec)
            cw = np.sqrt(1.0 - w_exit @ w_exit)
            b_lab = np.concatenate(([cw], w_exit)) @ rotation_to_e1(v_plus).T

            v_rot = v @ k
            block = rotation_to_e1(v).T @ k @ rotation_to_e1(v_rot)
            v_plus_rot, w_exit_rot = m.exit_data(v_rot, w_vec @ block[1:, 1:])
            cw = np.sqrt(1.0 - w_exit_rot @ w_exit_rot)
            b_rot = np.concatenate(([cw], w_exit_rot)) @ rotation_to_e1(
                v_plus_rot).T

            assert np.allclose(v_plus_rot, v_plus @ k, atol=1e-8)
            assert np.allclose(b_rot, b_lab @ k, atol=1e-8)


def test_exit_dual_route_agreement(muffin_map, attractive_map):
    rng = np.random.default_rng(29)
    for m in (HardSphereMap(2), HardSphereMap(3), muffin_map, attractive_map,
              MuffinTinMap(-0.5, dim=3)):
        for _ in range(40):
            v = rng.normal(size=m.dim)
            v /= np.linalg.norm(v)
            w_vec = rng.normal(size=m.dim - 1)
            w_vec *= rng.uniform(0.05, 0.95) / np.linalg.norm(w_vec)
            v_plus, w_exit = m.exit_data(v, w_vec)
            assert np.isclose(np.linalg.norm(v_plus), 1.0, atol=1e-12)
            assert np.isclose(np.linalg.norm(w_exit),
                              np.linalg.norm(w_vec), atol=1e-9)
            back = m.exit_impact_between(v, v_plus)
            assert np.allclose(back, w_exit, atol=1e-8)


def test_exit_rejects_bad_impact(muffin_map):
    with pytest.raises(ValueError, match="unit ball"):
        muffin_map.exit_data([1.0, 0.0], [1.0])
    with pytest.raises(ValueError, match="dimension"):
        muffin_map.exit_data([1.0, 0.0], [0.1, 0.2])


def test_incoming_impact_roundtrip(muffin_map):
    e1 = np.array([1.0, 0.0])
    for m in (HardSphereMap(2), muffin_map):
        for w in (0.15, 0.5, 0.85):
            u = m.outgoing_direction(e1, np.array([w]))
            assert np.isclose(m.incoming_impact(u)[0], w, atol=1e-9)
    with pytest.raises(ValueError, match="cone"):
        muffin_map.incoming_impact(e1)


@settings(max_examples=60, deadline=None)
@given(st.floats(-0.95, 0.95).filter(lambda w: abs(w) > 1e-3))
def test_outgoing_direction_consistent_with_deflection(w):
    m = HardSphereMap(2)
    v = np.array([1.0, 0.0])
    u = m.outgoing_direction(v, np.array([w]))
    assert m.admissible(v, u)
    phi = np.arccos(np.clip(v @ u, -1.0, 1.0))
    assert np.isclose(phi, np.pi - 2.0 * np.arcsin(abs(w)), atol=1e-9)


# ---------------------------------------------------------------------------
# construction and selection


def test_map_rejects_non_dispersing_profile():
    with pytest.raises(ValueError, match="monotone"):
        PotentialScatteringMap(MuffinTinProfile(-1.0), grid_size=64)


def test_muffin_tin_map_rejects_special_strengths():
    with pytest.raises(ValueError, match="not dispersing"):
        MuffinTinMap(0.0)
    with pytest.raises(ValueError, match="not dispersing"):
        MuffinTinMap(-1.0)
    with pytest.raises(ValueError, match="grid"):
        MuffinTinMap(1.0, grid_size=16)


def test_profile_validation():
    with pytest.raises(ValueError, match="slope 1/2"):
        LinearWallProfile(0.5)
    with pytest.raises(ValueError, match="positive"):
        LinearWallProfile(-1.0)
    with pytest.raises(ValueError, match="nonzero"):
        MuffinTinProfile(0.0)
    with pytest.raises(ValueError, match="at least 4"):
        TabulatedProfile([0.5, 1.0], [0.1, 0.0])
    with pytest.raises(ValueError, match="increasing"):
        TabulatedProfile([0.5, 0.4, 0.8, 1.0], [0.1, 0.2, 0.1, 0.0])


def test_tabulated_profile_matches_linear_wall(tmp_path):
    rs = np.linspace(1e-3, 1.0, 400)
    table = tmp_path / "wall.csv"
    np.savetxt(table, np.column_stack([rs, 2.0 * (1.0 - rs)]), delimiter=",")
    via_csv = make_scattering_map(f"custom_table({table})", grid_size=256)
    direct = PotentialScatteringMap(LinearWallProfile(2.0), grid_size=256)
    for w in (0.3, 0.5, 0.8):
        assert np.isclose(float(via_csv.deflection(w)),
                          float(direct.deflection(w)), atol=1e-6)


def test_scatterer_parser():
    assert isinstance(make_scattering_map("  hard_sphere  "), HardSphereMap)
    m = make_scattering_map("muffin_tin( 2.0 )", grid_size=64)
    assert isinstance(m, MuffinTinMap)
    assert m.profile.strength == 2.0
    m = make_scattering_map("linear_wall(1.5)", grid_size=64)
    assert isinstance(m, PotentialScatteringMap)

    with pytest.raises(ValueError, match="no parameter"):
        make_scattering_map("hard_sphere(1)")
    with pytest.raises(ValueError, match="needs a parameter"):
        make_scattering_map("muffin_tin")
    with pytest.raises(ValueError, match="unknown"):
        make_scattering_map("frobnicate(2)")
    with pytest.raises(ValueError, match="cannot parse"):
        make_scattering_map("not a name!!")


def test_total_cross_section_values():
    assert total_cross_section(2) == 2.0
    assert np.isclose(total_cross_section(3), np.pi, atol=1e-15)
