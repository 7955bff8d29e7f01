import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmecontrol import _simkernel, sim
from tmecontrol.errors import ConfigurationError, InputDataError
from tmecontrol.sim import (
    CELL_TOKENS, DEFAULT_BOUNDS, N_PARAMS, PARAM_INDEX, AgentConfiguration, CellType, EnsembleSpec,
    InitialCondition,
)


def frozen_parameters():
    p = np.zeros(N_PARAMS)
    p[PARAM_INDEX["f_m1"]] = 1.5
    p[PARAM_INDEX["f_m2"]] = 1.5
    return p


def test_cell_types_and_tokens():
    assert len(CellType) == 7
    assert [c.token for c in CellType] == list(CELL_TOKENS)
    assert CellType.from_token("t_exh") is CellType.T_EXH
    with pytest.raises(ValueError):
        CellType.from_token("neutrophil")


def test_parameter_table_shape():
    assert N_PARAMS == 21
    assert DEFAULT_BOUNDS.shape == (21, 2)
    assert np.all(DEFAULT_BOUNDS[:, 0] < DEFAULT_BOUNDS[:, 1])
    assert DEFAULT_BOUNDS[PARAM_INDEX["r_exh"], 0] > 0


def test_check_parameters_rejects_bad_vectors():
    with pytest.raises(ConfigurationError):
        sim.check_parameters(np.zeros(20))
    p = sim.nominal_parameters()
    p[0] = -0.1
    with pytest.raises(ConfigurationError):
        sim.check_parameters(p)
    with pytest.raises(ConfigurationError):
        sim.check_parameters(sim.nominal_parameters(p_kill=1.5))
    with pytest.raises(ConfigurationError):
        sim.nominal_parameters(bogus=1.0)


# ---- Latin hypercube --------------------------------------------------------------

def test_lhs_single_sample_within_bounds():
    x = sim.latin_hypercube_sample(EnsembleSpec(n_params=1))
    assert x.shape == (1, 21)
    assert np.all(x[0] >= DEFAULT_BOUNDS[:, 0]) and np.all(x[0] < DEFAULT_BOUNDS[:, 1])


def test_lhs_four_unit_strata():
    bounds = np.tile([0.0, 1.0], (21, 1))
    bounds[PARAM_INDEX["r_exh"]] = [0.5, 1.0]
    x = sim.latin_hypercube_sample(EnsembleSpec(n_params=4, bounds=bounds))
    col = np.sort(x[:, 0])
    for i, v in enumerate(col):
        assert i / 4 <= v < (i + 1) / 4


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 60), seed=st.integers(0, 2**31 - 1))
def test_lhs_every_stratum_hit_once(n, seed):
    spec = EnsembleSpec(n_params=n, rng_seed=seed)
    x = sim.latin_hypercube_sample(spec)
    lo, hi = spec.bounds[:, 0], spec.bounds[:, 1]
    strata = np.floor((x - lo) / (hi - lo) * n).astype(int)
    for j in range(21):
        assert np.array_equal(np.sort(strata[:, j]), np.arange(n))


def test_lhs_deterministic_and_rejects_bad_bounds():
    a = sim.latin_hypercube_sample(EnsembleSpec(n_params=50, rng_seed=3))
    b = sim.latin_hypercube_sample(EnsembleSpec(n_params=50, rng_seed=3))
    assert np.array_equal(a, b)
    bounds = DEFAULT_BOUNDS.copy()
    bounds[2] = [0.5, 0.5]
    with pytest.raises(ConfigurationError):
        EnsembleSpec(bounds=bounds)
    with pytest.raises(ConfigurationError):
        EnsembleSpec(n_params=0)


# ---- configurations ------------------------------------------------------------------

def test_agent_configuration_round_trip():
    agents = [(0, 0, CellType.TUMOR), (3, 2, CellType.M1), (4, 4, CellType.T_EFF)]
    cfg = AgentConfiguration.from_agents(7, 5, agents)
    grid = cfg.to_grid()
    assert grid[2, 3] == CellType.M1
    back = AgentConfiguration.from_grid(7, grid)
    assert back.same_agents(cfg)
    assert cfg.counts().tolist() == [1, 0, 1, 0, 0, 1, 0]
    assert {a.cell_type for a in cfg.agents} == {CellType.TUMOR, CellType.M1, CellType.T_EFF}


def test_agent_configuration_rejects_collisions_and_out_of_bounds():
    with pytest.raises(ConfigurationError):
        AgentConfiguration.from_agents(0, 5, [(1, 1, 0), (1, 1, 2)])
    with pytest.raises(ConfigurationError):
        AgentConfiguration.from_agents(0, 5, [(5, 0, 0)])


def test_initial_grid_populations():
    g = sim.initial_grid(100, np.random.default_rng(0))
    counts = np.bincount(g[g >= 0], minlength=7)
    assert counts[CellType.TUMOR] == 800
    assert counts[1:].sum() == 400
    with pytest.raises(ConfigurationError):
        sim.initial_grid(10, np.random.default_rng(0), InitialCondition(tumor_fraction=0.9, immune_fraction=0.2))


# ---- simulation -----------------------------------------------------------------------

def test_simulate_length_and_determinism():
    p = sim.nominal_parameters()
    a = sim.simulate(p, 11, 15, grid_size=30)
    b = sim.simulate(p, 11, 15, grid_size=30)
    assert len(a) == 16
    assert [c.step for c in a] == list(range(16))
    assert all(x.same_agents(y) for x, y in zip(a, b))
    c = sim.simulate(p, 12, 15, grid_size=30)
    assert not all(x.same_agents(y) for x, y in zip(a, c))


def test_frozen_dynamics_keep_configuration():
    traj = sim.simulate(frozen_parameters(), 4, 10, grid_size=30)
    assert all(cfg.same_agents(traj[0]) for cfg in traj)


def test_site_exclusivity_throughout():
    traj = sim.simulate(sim.nominal_parameters(r_adh=0.2), 5, 30, grid_size=30)
    for cfg in traj:
        cfg.to_grid()  # raises on a shared site
        assert np.all(cfg.counts() >= 0)


def test_numba_and_python_kernels_agree():
    p = sim.check_parameters(sim.nominal_parameters(r_exh=0.05, r_adh=0.6))
    rng = np.random.default_rng(9)
    grid = sim.initial_grid(30, rng)
    g1, g2 = grid.copy(), grid.copy()
    s1 = np.full(grid.shape, -1, dtype=np.int32)
    s2 = s1.copy()
    for k in range(1, 25):
        ys, xs = np.nonzero(g1 >= 0)
        perm = rng.permutation(len(ys))
        u = rng.random((len(ys), _simkernel.N_UNIFORMS))
        oy, ox = ys[perm].astype(np.int64), xs[perm].astype(np.int64)
        _simkernel.step_numba(g1, s1, oy, ox, u, p, k)
        _simkernel.step_python(g2, s2, oy, ox, u, p, k)
        assert np.array_equal(g1, g2)


def _terminal_counts(**kw):
    p = sim.nominal_parameters(**kw)
    tot = np.zeros(7, dtype=int)
    for seed in range(3):
        tot += sim.simulate(p, seed, 200, grid_size=60)[-1].counts()
    return tot


def test_low_exhaustion_favours_effectors():
    lo = DEFAULT_BOUNDS[PARAM_INDEX["r_exh"], 0]
    c = _terminal_counts(r_exh=lo, r_adh=0.5)
    assert c[CellType.T_EFF] > c[CellType.T_EXH]


def test_high_exhaustion_and_adhesion_favour_exhausted():
    c = _terminal_counts(r_exh=DEFAULT_BOUNDS[PARAM_INDEX["r_exh"], 1], r_adh=1.0)
    assert c[CellType.T_EXH] > c[CellType.T_EFF]


def test_effector_fraction_falls_with_exhaustion():
    def eff_share(r):
        c = _terminal_counts(r_exh=r, r_adh=0.5)
        return c[CellType.T_EFF] / max(1, c.sum())
    assert eff_share(0.001) > eff_share(0.1)


# ---- ensembles and files -------------------------------------------------------------------

def test_ensemble_counts_and_reproducibility():
    spec = EnsembleSpec(n_params=2, n_seeds=3, n_steps=3, grid_size=20, rng_seed=5)
    a = sim.generate_ensemble(spec)
    b = sim.generate_ensemble(spec)
    assert len(a) == 6
    assert np.array_equal(a.params, b.params) and np.array_equal(a.seeds, b.seeds)
    assert np.array_equal(a.params[0], a.params[2]) and not np.array_equal(a.params[0], a.params[3])
    for ta, tb in zip(a.trajectories, b.trajectories):
        assert all(x.same_agents(y) for x, y in zip(ta, tb))
    assert EnsembleSpec().n_trajectories == 150


def test_trajectory_seeds_independent_of_ensemble_size():
    small = sim.ensemble_plan(EnsembleSpec(n_params=2, n_seeds=2, rng_seed=1))[1]
    large = sim.ensemble_plan(EnsembleSpec(n_params=5, n_seeds=2, rng_seed=1))[1]
    assert np.array_equal(small, large[:4])


def test_trajectory_csv_round_trip(tmp_path):
    traj = sim.simulate(sim.nominal_parameters(), 3, 4, grid_size=20)
    path = tmp_path / "t.csv"
    sim.write_trajectory_csv(path, traj)
    assert path.read_text().splitlines()[0] == "step,x,y,cell_type"
    back = sim.read_trajectory_csv(path, 20)
    assert len(back) == len(traj)
    assert all(a.same_agents(b) for a, b in zip(traj, back))


def test_trajectory_csv_errors(tmp_path):
    with pytest.raises(InputDataError, match="missing"):
        sim.read_trajectory_csv(tmp_path / "nope.csv", 10)
    bad = tmp_path / "bad.csv"
    bad.write_text("step,x,y,cell_type\n0,1,1,neutrophil\n")
    with pytest.raises(InputDataError, match="cell_type"):
        sim.read_trajectory_csv(bad, 10)


def test_parameter_table_round_trip(tmp_path):
    spec = EnsembleSpec(n_params=3, n_seeds=2)
    params, seeds = sim.ensemble_plan(spec)
    path = tmp_path / "params.csv"
    sim.write_parameter_table(path, params, seeds)
    ids, s2, p2 = sim.read_parameter_table(path)
    assert ids.tolist() == list(range(6))
    assert np.array_equal(s2, seeds)
    assert np.array_equal(p2, params)
    side = (tmp_path / "params.json").read_text()
    assert '"r_exh"' in side and '"bounds"' in side
