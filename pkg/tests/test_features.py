import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tmecontrol import _featkernels as fk
from tmecontrol import features as ft
from tmecontrol import sim
from tmecontrol.errors import ConfigurationError, InputDataError
from tmecontrol.sim import AgentConfiguration, CellType

OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]


def config(G, agents, step=0):
    return AgentConfiguration.from_agents(step, G, agents)


def random_grid(rng, G, density):
    g = np.where(rng.random((G, G)) < density, rng.integers(0, 7, (G, G)), -1).astype(np.int8)
    return g


# ---- brute-force oracles over explicit pair lists ------------------------------------

def oracle_contacts(grid):
    G = grid.shape[0]
    pairs = tpairs = tt = 0
    eff = exh = 0
    for y in range(G):
        for x in range(G):
            c = int(grid[y, x])
            nbrs = [int(grid[(y + dy) % G, (x + dx) % G]) for dy, dx in OFFSETS]
            nbrs = [n for n in nbrs if n >= 0]
            if c == 0:
                pairs += len(nbrs)
                tt += sum(n == 0 for n in nbrs)
                tpairs += sum(1 <= n <= 3 for n in nbrs)
            if c == 2 and 0 in nbrs:
                eff += 1
            if c == 3 and 0 in nbrs:
                exh += 1
    return pairs, tpairs, tt, eff, exh


def oracle_components(grid):
    G = grid.shape[0]
    cells = [(y, x) for y in range(G) for x in range(G) if grid[y, x] == 0]
    parent = {c: c for c in cells}

    def find(c):
        while parent[c] != c:
            c = parent[c]
        return c

    for (y, x) in cells:
        for dy, dx in OFFSETS:
            n = ((y + dy) % G, (x + dx) % G)
            if n in parent:
                parent[find(n)] = find((y, x))
    return len({find(c) for c in cells})


def oracle_distance_sum(grid):
    G = grid.shape[0]
    tum = [(y, x) for y in range(G) for x in range(G) if grid[y, x] == 0]
    tc = [(y, x) for y in range(G) for x in range(G) if 1 <= grid[y, x] <= 3]
    if not tc:
        return -1.0

    def d(a, b):
        dy = abs(a[0] - b[0])
        dx = abs(a[1] - b[1])
        return max(min(dy, G - dy), min(dx, G - dx))

    return float(sum(min(d(a, b) for b in tc) for a in tum))


# ---- observe -------------------------------------------------------------------------------

def test_feature_names_and_sets():
    assert len(ft.FEATURE_NAMES) == 15
    ex = ft.FeatureSetSpec(exclude_macrophage=True)
    assert ex.M == 12
    assert not set(ex.names) & set(ft.MACROPHAGE_FEATURES)
    assert list(ft.FeatureSetSpec().indices) == list(range(15))


def test_tumor_only_configuration():
    cfg = config(10, [(i, 0, CellType.TUMOR) for i in range(10)])
    v = ft.observe(cfg)
    assert v[0] == 1.0
    assert np.all(v[1:7] == 0.0)


def test_single_tumor_t_contact():
    v = ft.observe(config(6, [(2, 2, CellType.TUMOR), (3, 2, CellType.T_EFF)]))
    assert v[ft.FEATURE_NAMES.index("tumor_t_mixing")] == 1.0
    assert v[ft.FEATURE_NAMES.index("eff_infiltration")] == 1.0
    assert v[ft.FEATURE_NAMES.index("tumor_t_distance")] == pytest.approx(1 / 6)


def test_checkerboard_matches_pair_enumeration():
    g = np.where((np.add.outer(np.arange(4), np.arange(4)) % 2) == 0, CellType.TUMOR, CellType.T_EFF).astype(np.int8)
    pairs, tpairs, tt, *_ = oracle_contacts(g)
    v = ft.observe_grid(g)
    assert v[ft.FEATURE_NAMES.index("tumor_t_mixing")] == tpairs / pairs == 0.5
    assert v[ft.FEATURE_NAMES.index("tumor_degree")] == tt / 8


def test_empty_configuration_flagged():
    v = ft.observe(config(5, []))
    assert v[-1] == 1.0
    assert np.all(v[:-1] == 0.0)


def test_no_t_cells_distance_convention():
    v = ft.observe(config(8, [(1, 1, CellType.TUMOR), (5, 5, CellType.M2)]))
    assert v[ft.FEATURE_NAMES.index("tumor_t_distance")] == ft.NO_T_CELL_DISTANCE


@settings(max_examples=60, deadline=None)
@given(G=st.integers(3, 8), seed=st.integers(0, 10**6), density=st.floats(0.05, 1.0))
def test_kernels_match_oracles(G, seed, density):
    g = random_grid(np.random.default_rng(seed), G, density)
    expect = oracle_contacts(g)
    assert tuple(fk.contacts_numba(g)) == expect
    assert tuple(fk._contacts_numpy(g)) == expect
    assert fk.components_numba(g) == fk._components_numpy(g) == oracle_components(g)
    d = oracle_distance_sum(g) if (g == 0).any() else None
    if d is not None:
        assert fk.tumor_t_distance_numba(g) == d
        assert fk._tumor_t_distance_numpy(g) == d


def test_kernels_agree_on_simulated_grids():
    traj = sim.simulate(sim.nominal_parameters(r_exh=0.05), 2, 60, grid_size=40)
    for cfg in traj[::10]:
        g = cfg.to_grid()
        assert tuple(fk.contacts_numba(g)) == tuple(fk._contacts_numpy(g))
        assert fk.components_numba(g) == fk._components_numpy(g)
        assert fk.tumor_t_distance_numba(g) == fk._tumor_t_distance_numpy(g)


def test_components_wrap_around_the_torus():
    g = np.full((6, 6), -1, dtype=np.int8)
    g[2, 0] = g[2, 5] = 0          # neighbours across the seam
    g[0, 0] = g[5, 5] = 0          # diagonal across the corner, a second component
    assert fk.components_numba(g) == fk._components_numpy(g) == oracle_components(g) == 2


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_translation_and_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    G = int(rng.integers(5, 20))
    g = random_grid(rng, G, rng.uniform(0.1, 0.8))
    base = ft.observe_grid(g)
    assert np.array_equal(base, ft.observe_grid(np.roll(g, (int(rng.integers(G)), int(rng.integers(G))), (0, 1))))
    cfg = AgentConfiguration.from_grid(0, g)
    perm = rng.permutation(len(cfg))
    shuffled = AgentConfiguration(0, G, cfg.x[perm], cfg.y[perm], cfg.cell_type[perm])
    assert np.array_equal(ft.observe(cfg), ft.observe(shuffled))
    if len(cfg):
        assert abs(base[:7].sum() - 1.0) <= 1e-12
    assert np.all(np.isfinite(base))


# ---- series, standardization, embedding ---------------------------------------------------------

def test_featurize_columns_match_observe():
    traj = sim.simulate(sim.nominal_parameters(), 1, 5, grid_size=25)
    s = ft.featurize_trajectory(traj, trajectory_id=3)
    assert s.matrix.shape == (15, 6) and s.trajectory_id == 3
    for k, cfg in enumerate(traj):
        assert np.array_equal(s.matrix[:, k], ft.observe(cfg))
    assert ft.featurize_trajectory(traj[:1]).K == 1
    with pytest.raises(InputDataError):
        ft.featurize_trajectory([])


def test_frozen_trajectory_gives_identical_columns():
    cfg = config(10, [(1, 1, 0), (2, 1, 2), (5, 5, 4)])
    s = ft.featurize_trajectory([cfg] * 4)
    assert np.all(s.matrix == s.matrix[:, :1])


def test_standardize_hand_example():
    a = ft.ObservationSeries(0, np.array([[1.0], [5.0]]), ("a", "b"))
    b = ft.ObservationSeries(1, np.array([[3.0], [5.0]]), ("a", "b"))
    (za, zb), table = ft.standardize([a, b])
    assert za.matrix[0, 0] == -1.0 and zb.matrix[0, 0] == 1.0
    assert za.matrix[1, 0] == 0.0 and table.zero_variance.tolist() == [False, True]
    assert np.array_equal(table.apply(a).matrix, za.matrix)
    again = ft.StandardizationTable.from_dict(table.to_dict())
    assert np.array_equal(again.apply(b).matrix, zb.matrix)


def test_standardize_pooled_moments():
    rng = np.random.default_rng(0)
    ens = [ft.ObservationSeries(i, rng.normal(3, 2, (4, 30)), tuple("abcd")) for i in range(5)]
    z, _ = ft.standardize(ens)
    pooled = np.concatenate([s.matrix for s in z], axis=1)
    assert np.allclose(pooled.mean(axis=1), 0, atol=1e-12)
    assert np.allclose(pooled.std(axis=1), 1, atol=1e-12)


def test_delay_embed_hand_example():
    s = ft.ObservationSeries(0, np.array([[1.0, 2, 3, 4, 5]]), ("f",))
    e = ft.delay_embed(s, 1)
    assert e.values.tolist() == [[1, 2, 3], [2, 3, 4], [3, 4, 5]]
    assert e.center_step.tolist() == [1, 2, 3]
    assert np.array_equal(e.center_columns()[:, 0], [2, 3, 4])


def test_delay_embed_identity_and_order():
    m = np.arange(12.0).reshape(3, 4)
    s = ft.ObservationSeries(0, m, ("a", "b", "c"))
    assert np.array_equal(ft.delay_embed(s, 0).values, m.T)
    e = ft.delay_embed(s, 1)
    assert np.array_equal(e.values[0], np.concatenate([m[:, 0], m[:, 1], m[:, 2]]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 40)), elements=st.floats(-5, 5)),
       st.integers(0, 25))
def test_delay_embed_shape_law(matrix, w):
    M, K = matrix.shape
    s = ft.ObservationSeries(0, matrix, tuple(f"f{i}" for i in range(M)))
    if K < 2 * w + 1:
        with pytest.raises(ft.TrajectoryTooShort):
            ft.delay_embed(s, w)
    else:
        e = ft.delay_embed(s, w)
        assert e.values.shape == (K - 2 * w, M * (2 * w + 1))
        assert np.array_equal(e.center_columns(), matrix[:, w:K - w].T)


def test_window_radius_convention():
    assert ft.window_radius(51) == 25
    with pytest.raises(ConfigurationError):
        ft.window_radius(50)


def test_series_and_window_files(tmp_path):
    traj = sim.simulate(sim.nominal_parameters(), 1, 8, grid_size=20)
    s = ft.featurize_trajectory(traj, trajectory_id=2)
    ft.write_series_csv(tmp_path / "s.csv", s)
    back = ft.read_series_csv(tmp_path / "s.csv", 2)
    assert np.array_equal(back.matrix, s.matrix)
    assert (tmp_path / "s.csv").read_text().startswith("step,f1,f2")
    e = ft.delay_embed(s, 2)
    ft.write_windows(tmp_path / "w", e)
    e2 = ft.read_windows(tmp_path / "w")
    assert np.array_equal(e2.values, e.values) and (e2.M, e2.w) == (15, 2)
    ft.write_windows_csv(tmp_path / "w_full.csv", e)
    header = (tmp_path / "w_full.csv").read_text().splitlines()[0].split(",")
    assert header[:2] == ["trajectory_id", "center_step"] and len(header) == 2 + e.dim
    bad = tmp_path / "bad.csv"
    bad.write_text("step,g1\n0,1\n")
    with pytest.raises(InputDataError):
        ft.read_series_csv(bad, 0)
