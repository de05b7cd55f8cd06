import numpy as np
import pytest

from lorentzgas import pointsets


def brute_force_hits(config, origin, direction, rho, horizon):
    """Oracle: enumerate a covering ball and test every point directly."""
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    pos, _ = config.points_in_ball(origin + 0.5 * horizon * direction,
                                   0.5 * horizon + rho + 1.0)
    entries = []
    for p in pos:
        rel = p - origin
        if np.linalg.norm(rel) < 1e-9:
            continue
        t_mid = rel @ direction
        miss_sq = rel @ rel - t_mid ** 2
        if t_mid > 0 and miss_sq < rho ** 2:
            entry = t_mid - np.sqrt(rho ** 2 - miss_sq)
            if 1e-12 < entry <= horizon:
                entries.append((entry, tuple(p)))
    entries.sort()
    return entries


# ---------------------------------------------------------------------------
# hash streams


def test_cell_streams_scalar_matches_vectorized():
    cells = np.array([[0, 0], [5, -3], [-1, 7], [123, -456]], dtype=np.int64)
    state_vec = pointsets.cell_state_array(42, cells)
    for row, sv in zip(cells, state_vec):
        ss = pointsets.cell_state(42, row[0], row[1], pointsets._NO_CELL)
        assert np.uint64(ss) == sv
        for k in (0, 1, 7):
            u_vec = pointsets.cell_uniform_array(np.array([sv]),
                                                 np.array([k]))[0]
            assert pointsets.cell_uniform(np.uint64(ss), np.uint64(k)) == u_vec
    cells3 = np.array([[1, 2, 3], [-4, 0, 9]], dtype=np.int64)
    state3 = pointsets.cell_state_array(7, cells3)
    for row, sv in zip(cells3, state3):
        assert np.uint64(pointsets.cell_state(7, row[0], row[1], row[2])) == sv


def test_cell_streams_depend_on_seed_and_cell():
    cells = np.array([[0, 0], [0, 1], [1, 0]], dtype=np.int64)
    a = pointsets.cell_state_array(1, cells)
    b = pointsets.cell_state_array(2, cells)
    assert len(set(a.tolist() + b.tolist())) == 6


def test_poisson_count_table_is_a_cdf():
    cdf = pointsets.poisson_count_table(1.0)
    assert np.all(np.diff(cdf) > 0)
    assert cdf[-1] > 1.0 - 1e-14
    assert np.isclose(cdf[0], np.exp(-1.0))


# ---------------------------------------------------------------------------
# Poisson family


def test_poisson_reproducible_and_seed_sensitive():
    cfg = pointsets.PoissonConfiguration(1.0, seed=11, dim=2)
    again = pointsets.PoissonConfiguration(1.0, seed=11, dim=2)
    other = pointsets.PoissonConfiguration(1.0, seed=12, dim=2)
    p1, _ = cfg.points_in_ball([0.3, -0.2], 20.0)
    p2, _ = again.points_in_ball([0.3, -0.2], 20.0)
    p3, _ = other.points_in_ball([0.3, -0.2], 20.0)
    assert np.array_equal(p1, p2)
    assert p1.shape != p3.shape or not np.allclose(p1, p3)


def test_poisson_queries_agree_on_overlap():
    cfg = pointsets.PoissonConfiguration(1.5, seed=5, dim=2)
    big, _ = cfg.points_in_ball([0.0, 0.0], 12.0)
    small, _ = cfg.points_in_ball([3.0, 1.0], 4.0)
    big_set = {tuple(p) for p in big}
    for p in small:
        assert tuple(p) in big_set


def test_poisson_density_2d_and_3d():
    for dim, radius in ((2, 60.0), (3, 18.0)):
        cfg = pointsets.PoissonConfiguration(1.0, seed=3, dim=dim)
        pos, marks = cfg.points_in_ball(np.zeros(dim), radius)
        assert marks.shape == (pos.shape[0], 0)
        volume = np.pi * radius ** 2 if dim == 2 else 4 / 3 * np.pi * radius ** 3
        assert abs(pos.shape[0] / volume - 1.0) < 4.0 / np.sqrt(volume)


def test_poisson_ray_query_matches_brute_force():
    cfg = pointsets.PoissonConfiguration(1.0, seed=9, dim=2)
    origin = np.array([0.21, -0.37])
    direction = np.array([2.0, 1.0]) / np.sqrt(5.0)
    hits = cfg.ray_tube_query(origin, direction, 0.3, 40.0)
    oracle = brute_force_hits(cfg, origin, direction, 0.3, 40.0)
    assert len(hits) == len(oracle)
    for h, (entry, p) in zip(hits, oracle):
        assert np.isclose(h.entry_time, entry, atol=1e-10)
        assert np.allclose(h.position, p)
        assert isinstance(h.mark, pointsets.TrivialMark)
        assert np.linalg.norm(h.impact_offset) < 0.3


def test_poisson_covered():
    cfg = pointsets.PoissonConfiguration(1.0, seed=9, dim=2)
    pos, _ = cfg.points_in_ball([0.0, 0.0], 5.0)
    inside = pos[0] + np.array([0.01, 0.0])
    assert cfg.covered(inside, 0.05)
    assert not cfg.covered(inside, 1e-6)


def test_poisson_validation():
    with pytest.raises(ValueError):
        pointsets.PoissonConfiguration(0.0, seed=1, dim=2)
    with pytest.raises(ValueError):
        pointsets.PoissonConfiguration(1.0, seed=1, dim=4)
    cfg = pointsets.PoissonConfiguration(1.0, seed=1, dim=2)
    with pytest.raises(ValueError):
        cfg.points_in_ball([0.0, 0.0], 2e4)


# ---------------------------------------------------------------------------
# periodic families


def test_square_lattice_ray_example():
    cfg = pointsets.square_lattice(2)
    hits = cfg.ray_tube_query([0.0, 0.05], [1.0, 0.0], 0.1, 10.0)
    assert hits
    first = hits[0]
    assert np.allclose(first.position, [1.0, 0.0])
    # frozen oracle: 1 - sqrt(0.1^2 - 0.05^2)
    assert np.isclose(first.entry_time, 0.9133974596215562, atol=1e-12)
    assert np.isclose(np.linalg.norm(first.impact_offset), 0.05)


def test_square_lattice_excludes_origin_point():
    cfg = pointsets.square_lattice(2)
    hits = cfg.ray_tube_query([0.0, 0.0], [1.0, 0.0], 0.1, 3.5)
    assert all(np.linalg.norm(h.position) > 1e-9 for h in hits)
    assert np.allclose(hits[0].position, [1.0, 0.0])
    assert np.isclose(hits[0].entry_time, 0.9)


def test_lattice_tie_break_is_lexicographic():
    cfg = pointsets.square_lattice(2)
    v = np.array([1.0, 1.0]) / np.sqrt(2.0)
    hits = cfg.ray_tube_query([0.5, 0.5], v, 0.2, 3.0)
    # (1,0)g and (0,1)g style pairs enter simultaneously along the diagonal
    assert len(hits) >= 2
    assert hits[0].entry_time <= hits[1].entry_time + 1e-12
    if abs(hits[0].entry_time - hits[1].entry_time) <= 1e-12:
        assert tuple(hits[0].position) < tuple(hits[1].position)


def test_lattice_ray_matches_brute_force_3d():
    cfg = pointsets.square_lattice(3)
    origin = np.array([0.1, 0.2, -0.3])
    direction = np.array([3.0, -1.0, 2.0])
    direction = direction / np.linalg.norm(direction)
    hits = cfg.ray_tube_query(origin, direction, 0.2, 25.0)
    oracle = brute_force_hits(cfg, origin, direction, 0.2, 25.0)
    assert [tuple(np.round(h.position, 9)) for h in hits] == \
        [tuple(np.round(p, 9)) for _, p in oracle]


def test_honeycomb_density_and_gap():
    cfg = pointsets.honeycomb()
    assert np.isclose(cfg.density, 4.0 / np.sqrt(3.0))
    pos, marks = cfg.points_in_ball([0.0, 0.0], 80.0)
    area = np.pi * 80.0 ** 2
    assert abs(pos.shape[0] / area / cfg.density - 1.0) < 0.01
    # brute-force nearest neighbor distance, frozen: 1/sqrt(3)
    assert np.isclose(cfg.min_gap(6.0), 0.5773502691896258, atol=1e-9)
    assert np.isclose(cfg.global_min_gap, 0.5773502691896258, atol=1e-9)
    assert set(np.unique(marks[:, 0])) == {0.0, 1.0}


def test_component_marks_wrap():
    cfg = pointsets.honeycomb()
    pts = cfg.marked_points_in_ball([0.0, 0.0], 2.0)
    kinds = {type(p.mark) for p in pts}
    assert kinds == {pointsets.ComponentMark}
    assert {p.mark.index for p in pts} <= {0, 1}


def test_periodic_union_validation():
    eye = np.eye(2)
    with pytest.raises(ValueError):
        pointsets.PeriodicConfiguration(eye, 1.0, 2,
                                        offsets=[[0.1, 0.0], [0.5, 0.5]])
    with pytest.raises(ValueError):
        pointsets.PeriodicConfiguration(eye, 1.0, 2,
                                        offsets=[[0.0, 0.0], [1.0, 2.0]])
    with pytest.raises(ValueError):
        pointsets.PeriodicConfiguration(np.zeros((2, 2)), 1.0, 2)
    with pytest.raises(ValueError):
        pointsets.PeriodicConfiguration(eye, -1.0, 2)


def test_lattice_basis_rescaled_to_unit_determinant():
    cfg = pointsets.PeriodicConfiguration(2.0 * np.eye(2), 1.0, 2)
    assert np.isclose(abs(np.linalg.det(cfg.basis)), 1.0)
    assert np.isclose(cfg.density, 1.0)
    assert np.isclose(cfg.global_min_gap, 1.0)


# ---------------------------------------------------------------------------
# cut-and-project family


def test_octagon_window_area():
    cfg = pointsets.ammann_beenker()
    assert np.isclose(cfg.window.measure, 2.0 + 2.0 * np.sqrt(2.0), atol=1e-12)
    assert np.isclose(cfg.covolume, 4.0, atol=1e-12)
    assert np.isclose(cfg.density, (1.0 + np.sqrt(2.0)) / 2.0, atol=1e-12)


def test_ammann_beenker_counts_match_density():
    cfg = pointsets.ammann_beenker()
    radius = 60.0
    pos, marks = cfg.points_in_ball([0.0, 0.0], radius)
    count = pos.shape[0]
    assert abs(count / (np.pi * radius ** 2) / cfg.density - 1.0) < 0.01
    # marks are the internal coordinates and land inside the window
    assert marks.shape == (count, 2)
    assert np.all(cfg.window.contains(marks))


def test_toy_cut_project_density():
    cfg = pointsets.cut_project_toy()
    assert np.isclose(cfg.density, 0.3)
    radius = 80.0
    pos, _ = cfg.points_in_ball([0.0, 0.0], radius)
    assert abs(pos.shape[0] / (np.pi * radius ** 2) / 0.3 - 1.0) < 0.02
    # physical points sit on the integer grid for this shear
    assert np.allclose(pos, np.round(pos), atol=1e-9)


def test_cut_project_ray_matches_brute_force():
    cfg = pointsets.ammann_beenker()
    origin = np.array([0.05, 0.12])
    direction = np.array([1.0, 0.4])
    direction = direction / np.linalg.norm(direction)
    hits = cfg.ray_tube_query(origin, direction, 0.15, 12.0)
    oracle = brute_force_hits(cfg, origin, direction, 0.15, 12.0)
    assert len(hits) == len(oracle)
    for h, (entry, p) in zip(hits, oracle):
        assert np.isclose(h.entry_time, entry, atol=1e-10)
        assert np.allclose(h.position, p)
        assert isinstance(h.mark, pointsets.InternalMark)


# ---------------------------------------------------------------------------
# windows and mark cells


def test_box_window_cells_are_exact_eighths():
    w = pointsets.BoxWindow([0.0, 0.0], [1.0, 1.0])
    masses = w.cell_masses(samples_per_axis=256)
    assert np.allclose(masses, 1.0 / 8.0, atol=1e-3)
    idx = w.cell_index(np.array([[0.01, 0.01], [0.99, 0.99]]))
    assert idx[0] != idx[1]


def test_mark_cells_trivial_component_internal():
    poisson = pointsets.PoissonConfiguration(1.0, seed=1, dim=2)
    assert poisson.mark_cell_count() == 1
    assert poisson.mark_cell_masses().tolist() == [1.0]
    honey = pointsets.honeycomb()
    assert honey.mark_cell_count() == 2
    assert np.allclose(honey.mark_cell_masses(), [0.5, 0.5])
    ab = pointsets.ammann_beenker()
    assert ab.mark_cell_count() == 8
    masses = ab.mark_cell_masses()
    assert np.isclose(masses.sum(), 1.0)
    assert np.all(masses > 0)


def test_build_configuration_factory():
    cfg = pointsets.build_configuration("poisson", 2, intensity=1.0, seed=4)
    assert isinstance(cfg, pointsets.PoissonConfiguration)
    cfg = pointsets.build_configuration("square_lattice", 3)
    assert isinstance(cfg, pointsets.PeriodicConfiguration)
    assert cfg.dim == 3
    cfg = pointsets.build_configuration("honeycomb", 2)
    assert np.isclose(cfg.density, 4.0 / np.sqrt(3.0))
    cfg = pointsets.build_configuration(
        "cut_and_project", 2,
        basis=pointsets.ammann_beenker().basis,
        window={"shape": "box", "lo": [-0.4, -0.4], "hi": [0.4, 0.4]})
    assert isinstance(cfg, pointsets.CutProjectConfiguration)
    with pytest.raises(ValueError):
        pointsets.build_configuration("nope", 2)
    with pytest.raises(ValueError):
        pointsets.build_configuration("poisson", 2, intensity=1.0, seed=4,
                                      bogus=1)
    with pytest.raises(ValueError):
        pointsets.build_configuration("honeycomb", 3)
