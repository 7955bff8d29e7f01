import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmecontrol import mdp, msm
from tmecontrol.errors import ConfigurationError, InputDataError


@pytest.fixture(scope="module")
def fixtures():
    return {name: msm.load_fixture(name) for name in msm.FIXTURES}


def fixture_spec(fixtures, g="P4", K=646):
    return mdp.MdpSpec(fixtures[g], fixtures["P1"], mdp.target_reward(6), K)


def random_spec(rng, S, K):
    return mdp.MdpSpec(rng.dirichlet(np.ones(S), size=S), rng.dirichlet(np.ones(S), size=S), rng.random(S), K)


# ---- spec ------------------------------------------------------------------------------

def test_spec_validation():
    I = np.eye(3)
    with pytest.raises(ConfigurationError):
        mdp.MdpSpec(I, np.eye(2), np.zeros(3), 1)
    with pytest.raises(ConfigurationError):
        mdp.MdpSpec(I, I * 0.5, np.zeros(3), 1)
    with pytest.raises(ConfigurationError):
        mdp.MdpSpec(I, I, np.array([0, 2.0, 0]), 1)
    with pytest.raises(ConfigurationError):
        mdp.MdpSpec(I, I, np.zeros(3), 0)
    assert mdp.target_reward(4, 2).tolist() == [0, 1, 0, 0]


# ---- backward induction -------------------------------------------------------------------

def test_identity_matrices_tie_to_no_drug():
    V, mu = mdp.backward_induction(mdp.MdpSpec(np.eye(6), np.eye(6), mdp.target_reward(6), 1))
    assert V.V[:, 0].tolist() == mdp.target_reward(6).tolist()
    assert not mu.actions.any()


def test_dominant_drug_action():
    P1 = np.zeros((6, 6))
    P1[:, 0] = 1.0
    V, mu = mdp.backward_induction(mdp.MdpSpec(np.eye(6), P1, mdp.target_reward(6), 1))
    assert np.all(V.V[:, 0] == 1.0)
    assert mu.actions[:, 0].tolist() == [0, 1, 1, 1, 1, 1]


def test_near_ties_go_to_no_drug():
    P0 = np.array([[1.0, 0.0], [0.3, 0.7]])
    P1 = np.array([[1.0, 0.0], [0.3 + 1e-14, 0.7 - 1e-14]])
    _, mu = mdp.backward_induction(mdp.MdpSpec(P0, P1, [1.0, 0.0], 3))
    assert not mu.actions.any()


def test_terminal_condition_and_bounds(fixtures):
    V, _ = mdp.backward_induction(fixture_spec(fixtures, "P6"))
    assert np.array_equal(V.V[:, -1], mdp.target_reward(6))
    assert V.V.min() >= 0 and V.V.max() <= 1


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), K=st.integers(1, 40))
def test_shift_invariance_and_bounds(seed, K):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, 4, K)
    longer = mdp.MdpSpec(spec.P0, spec.P1, spec.reward, K + 1)
    V, _ = mdp.backward_induction(spec)
    W, _ = mdp.backward_induction(longer)
    assert np.max(np.abs(V.V - W.V[:, 1:])) <= 1e-12
    assert V.V.min() >= -1e-15 and V.V.max() <= 1 + 1e-15


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_optimal_dominates_and_matches_own_evaluation(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, 5, 12)
    V, opt = mdp.backward_induction(spec)
    pi0 = rng.dirichlet(np.ones(5))
    best = mdp.evaluate_policy(spec, opt, pi0)
    assert best == pytest.approx(pi0 @ V.V[:, 0], abs=1e-12)
    for pol in mdp.make_fixed_policies(5, 12, 3).values():
        assert best >= mdp.evaluate_policy(spec, pol, pi0) - 1e-12
    random_pol = mdp.PolicySchedule(rng.integers(0, 2, (5, 12)).astype(np.int8), "random")
    assert best >= mdp.evaluate_policy(spec, random_pol, pi0) - 1e-12


# ---- fixed policies and evaluation --------------------------------------------------------------

def test_fixed_policy_shapes():
    p = mdp.make_fixed_policies(3, 4, 1)
    assert p["alternating"].actions[0].tolist() == [1, 0, 1, 0]
    assert p["alternating"].label == "alternating(L=1)"
    assert not p["none"].actions.any() and p["immediate"].actions.all()
    long = mdp.make_fixed_policies(3, 10, 10)
    assert np.array_equal(long["alternating"].actions, long["immediate"].actions)
    assert mdp.make_fixed_policies(1, 7, 2)["alternating"].actions[0].tolist() == [1, 1, 0, 0, 1, 1, 0]
    with pytest.raises(ConfigurationError):
        mdp.make_fixed_policies(3, 4, 0)


def test_no_drug_one_step_from_s1(fixtures):
    spec = fixture_spec(fixtures, "P4", K=1)
    v = mdp.evaluate_policy(spec, mdp.make_fixed_policies(6, 1)["none"], np.eye(6)[0])
    assert v == pytest.approx(0.997, abs=1e-3)
    assert v == fixtures["P4"].entries[0, 0]


def test_zero_reward_gives_zero(fixtures):
    spec = mdp.MdpSpec(fixtures["P4"], fixtures["P1"], np.zeros(6), 20)
    for pol in mdp.make_fixed_policies(6, 20).values():
        assert mdp.evaluate_policy(spec, pol, np.full(6, 1 / 6)) == 0.0


def test_policy_horizon_checked(fixtures):
    with pytest.raises(ConfigurationError):
        mdp.evaluate_policy(fixture_spec(fixtures, K=5), mdp.make_fixed_policies(6, 4)["none"], np.eye(6)[0])


def test_immediate_approaches_absorption_value(fixtures):
    q = msm.absorption_probabilities(fixtures["P1"], 1).q
    rng = np.random.default_rng(0)
    for g in ("P4", "P6"):
        spec = fixture_spec(fixtures, g, K=20000)
        pol = mdp.make_fixed_policies(6, 20000)["immediate"]
        for pi0 in rng.dirichlet(np.ones(6), size=3):
            assert mdp.evaluate_policy(spec, pol, pi0) == pytest.approx(pi0 @ q, abs=1e-9)


def test_strategy_ordering_on_fixtures(fixtures):
    for g in ("P4", "P6"):
        r = mdp.compare_strategies(fixture_spec(fixtures, g), mdp.default_pi0(fixtures[g]), 50)
        assert list(r) == list(mdp.STRATEGIES)
        assert r["optimal"] >= r["immediate"] - 1e-12
        assert r["immediate"] >= r["alternating"] >= r["none"]


# ---- pi0 ------------------------------------------------------------------------------------

def test_pi0_variants(fixtures):
    P4 = fixtures["P4"]
    u = mdp.parse_pi0("uniform_transient", P4)
    assert u[3] == 0 and np.allclose(u[[0, 1, 2, 4, 5]], 0.2)
    assert mdp.parse_pi0("point:2", P4).tolist() == [0, 1, 0, 0, 0, 0]
    assert mdp.parse_pi0("[0.5, 0.5, 0, 0, 0, 0]", P4)[1] == 0.5
    assert np.allclose(mdp.default_pi0(np.eye(3)), 1 / 3)
    for bad in ("point:7", "point:x", "[1, 0]", "[0.5, 0.6, 0, 0, 0, 0]", "gaussian"):
        with pytest.raises(ConfigurationError):
            mdp.parse_pi0(bad, P4)


# ---- replay ---------------------------------------------------------------------------------

def test_deterministic_chain_replay_exact():
    P0 = np.roll(np.eye(4), 1, axis=1)   # 1 -> 2 -> 3 -> 4 -> 1
    P1 = np.eye(4)
    spec = mdp.MdpSpec(P0, P1, mdp.target_reward(4), 6)
    for pol in mdp.make_fixed_policies(4, 6, 2).values():
        r = mdp.replay_trajectories([1, 2, 3, 4, 4], pol, spec, n_rollouts=7, seed=3)
        assert r.fraction == r.theoretical and r.n == 35


def test_replay_absorption_from_s2(fixtures):
    spec = fixture_spec(fixtures, "P4")
    pol = mdp.make_fixed_policies(6, 646)["immediate"]
    r = mdp.replay_trajectories([2] * 20, pol, spec, n_rollouts=200, seed=1)
    assert r.theoretical == pytest.approx(1 - 0.993 ** 646, abs=1e-12)
    assert abs(r.fraction - r.theoretical) < 3 * r.standard_error
    assert r.per_start == {2: (4000, float(r.reached))}


def test_replay_deterministic_and_per_start_streams(fixtures):
    spec = fixture_spec(fixtures, "P6", K=100)
    pol = mdp.backward_induction(spec)[1]
    a = mdp.replay_trajectories([1, 3, 5], pol, spec, n_rollouts=50, seed=9)
    b = mdp.replay_trajectories([1, 3, 5], pol, spec, n_rollouts=50, seed=9)
    assert a.fraction == b.fraction and a.per_start == b.per_start
    c = mdp.replay_trajectories([1, 3, 5, 6], pol, spec, n_rollouts=50, seed=9)
    assert all(c.per_start[s] == a.per_start[s] for s in (1, 3, 5))


def test_replay_errors(fixtures):
    spec = fixture_spec(fixtures, K=3)
    pol = mdp.make_fixed_policies(6, 3)["none"]
    with pytest.raises(InputDataError):
        mdp.replay_trajectories([7], pol, spec)
    with pytest.raises(ConfigurationError):
        mdp.replay_trajectories([], pol, spec)


# ---- files ----------------------------------------------------------------------------------

def test_policy_and_value_files(tmp_path, fixtures):
    V, mu = mdp.backward_induction(fixture_spec(fixtures, K=30))
    mdp.write_policy_csv(tmp_path / "p.csv", mu)
    back = mdp.read_policy_csv(tmp_path / "p.csv")
    assert np.array_equal(back.actions, mu.actions)
    mdp.write_value_csv(tmp_path / "v.csv", V)
    lines = (tmp_path / "v.csv").read_text().splitlines()
    assert lines[0] == "state,k,value" and len(lines) == 1 + 6 * 31
    assert float(lines[1].split(",")[2]) == V.V[0, 0]
    with pytest.raises(InputDataError):
        mdp.read_policy_csv(tmp_path / "none.csv")
    (tmp_path / "bad.csv").write_text("state,k\n1,0\n")
    with pytest.raises(InputDataError):
        mdp.read_policy_csv(tmp_path / "bad.csv")


def test_strategy_report_layout():
    rep = mdp.strategy_report({"4": {"none": 0.1, "optimal": 0.5}}, {"4": np.full(6, 1 / 6)}, 646, 50)
    assert rep["K"] == 646 and rep["groups"]["4"]["strategies"]["optimal"] == 0.5
    assert len(rep["groups"]["4"]["pi0"]) == 6
