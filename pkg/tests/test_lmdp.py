import numpy as np
import pytest
from hypothesis import given, strategies as st

from lmdp_lab.instances import make_prop1, make_random_comm, make_two_state
from lmdp_lab.lmdp import (
    LatentMdp,
    MarkovPolicy,
    NodeLimitExceeded,
    Trajectory,
    UniformRandomPolicy,
    bayes_posterior,
    gap_monte_carlo,
    rollout_real,
    sample_episode,
    solve_dr_optimal,
)
from lmdp_lab.mdp_core import TabularMdp, ValidationError, backward_induction, evaluate_markov_policy
from lmdp_lab.policies import OptimisticElimination, ClassInfo

from conftest import history_policy_values, random_mdp


def random_lmdp(seed: int, M: int, S: int, A: int, H: int) -> LatentMdp:
    rng = np.random.default_rng(seed)
    R = rng.random((S, A))
    mdps = []
    for _ in range(M):
        P = rng.dirichlet(np.full(S, 0.5), size=(S, A))
        mdps.append(TabularMdp(P, R, H, 0))
    return LatentMdp(tuple(mdps), rng.dirichlet(np.ones(M)))


# -- model ------------------------------------------------------------------


def test_members_must_share_rewards():
    a = make_two_state(0.1, 0.05)
    b = TabularMdp(a.transitions, np.zeros((2, 2)), a.horizon)
    with pytest.raises(ValidationError, match="reward"):
        LatentMdp((a, b))


def test_weights_must_be_a_distribution():
    m = make_two_state(0.1, 0.05)
    with pytest.raises(ValidationError):
        LatentMdp((m, m), [0.7, 0.4])


def test_default_weights_uniform():
    lm = make_prop1(4, 6)
    np.testing.assert_allclose(lm.weights, 0.25)


def test_json_round_trip(tmp_path):
    lm = random_lmdp(3, 3, 3, 2, 5)
    lm.save(tmp_path / "lm.json")
    back = LatentMdp.load(tmp_path / "lm.json")
    np.testing.assert_array_equal(back.kernels, lm.kernels)
    np.testing.assert_array_equal(back.weights, lm.weights)


# -- rollouts ---------------------------------------------------------------


def test_single_member_latent_index():
    lm = LatentMdp((make_two_state(0.1, 0.05, H=5),))
    assert {sample_episode(lm, UniformRandomPolicy(2), s).latent_index for s in range(20)} == {0}


def test_latent_frequencies_uniform():
    lm = make_prop1(4, 2)
    counts = np.bincount([sample_episode(lm, UniformRandomPolicy(4), (9, e)).latent_index
                          for e in range(10_000)], minlength=4)
    assert np.all((counts / 10_000 >= 0.22) & (counts / 10_000 <= 0.28))


def test_seed_determinism():
    lm = random_lmdp(1, 3, 4, 2, 30)
    t1 = sample_episode(lm, UniformRandomPolicy(2), 42)
    t2 = sample_episode(lm, UniformRandomPolicy(2), 42)
    assert t1 == t2


def test_deterministic_rollout_reward_sequence():
    P = np.zeros((3, 1, 3))
    for s in range(3):
        P[s, 0, (s + 1) % 3] = 1.0
    m = TabularMdp(P, np.array([[0.0], [0.5], [1.0]]), 7)
    traj = rollout_real(m, MarkovPolicy(np.zeros(3, dtype=int)), 0)
    assert traj.states == [0, 1, 2, 0, 1, 2, 0, 1]
    assert traj.rewards == [0.0, 0.5, 1.0, 0.0, 0.5, 1.0, 0.0]


def test_optimal_policy_mean_return_matches_value(rng):
    m = random_mdp(rng, 4, 2, 5)
    sol = backward_induction(m)
    pol = MarkovPolicy(sol.policy)
    returns = np.array([rollout_real(m, pol, (1, e)).total_reward for e in range(100_000)])
    ci = 1.96 * returns.std(ddof=1) / np.sqrt(returns.size)
    assert abs(returns.mean() - sol.value[0]) <= ci


def test_trajectory_csv_round_trip(tmp_path):
    lm = random_lmdp(2, 2, 3, 2, 6)
    traj = sample_episode(lm, UniformRandomPolicy(2), 5)
    traj.write_csv(tmp_path / "t.csv")
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "step,state,action,reward,latent_index"
    assert Trajectory.read_csv(tmp_path / "t.csv") == traj


def test_out_of_range_action_rejected():
    class Bad(UniformRandomPolicy):
        def act(self, state):
            return 5

    with pytest.raises(ValueError):
        rollout_real(make_two_state(0.1, 0.05, H=3), Bad(2), 0)


def test_policy_reset_restores_initial_state():
    pol = UniformRandomPolicy(3, seed=11)
    pol.reset()
    first = [pol.act(0) for _ in range(20)]
    pol.reset()
    assert [pol.act(0) for _ in range(20)] == first


# -- posterior --------------------------------------------------------------


def test_empty_prefix_gives_prior():
    lm = random_lmdp(4, 3, 3, 2, 4)
    np.testing.assert_allclose(bayes_posterior(lm, [0], []), lm.weights)


def test_prop1_good_state_identifies_member():
    lm = make_prop1(3, 6)
    post = bayes_posterior(lm, [0, 1, 2], [0, 0])
    np.testing.assert_array_equal(post, [1.0, 0.0, 0.0])


def test_identical_members_keep_prior():
    m = random_mdp(np.random.default_rng(0), 3, 2, 5)
    lm = LatentMdp((m, m), [0.3, 0.7])
    traj = rollout_real(m, UniformRandomPolicy(2), 3)
    np.testing.assert_allclose(bayes_posterior(lm, traj.states, traj.actions), [0.3, 0.7])


def test_impossible_prefix_raises():
    with pytest.raises(ValueError, match="impossible"):
        bayes_posterior(make_prop1(2, 5), [0, 0], [0])


@given(seed=st.integers(0, 10**6), steps=st.integers(0, 4), a=st.integers(0, 1))
def test_posterior_is_a_martingale(seed, steps, a):
    lm = random_lmdp(seed, 3, 3, 2, 8)
    traj = sample_episode(lm, UniformRandomPolicy(2), seed)
    states, actions = traj.states[: steps + 1], traj.actions[:steps]
    post = bayes_posterior(lm, states, actions)
    s = states[-1]
    pred = post @ lm.kernels[:, s, a, :]
    expected = np.zeros(len(lm))
    for s2 in np.flatnonzero(pred > 0):
        expected += pred[s2] * bayes_posterior(lm, states + [int(s2)], actions + [a])
    np.testing.assert_allclose(expected, post, atol=1e-12)


# -- exact DR oracle --------------------------------------------------------


def test_single_member_matches_backward_induction(rng):
    m = random_mdp(rng, 4, 3, 6)
    sol = solve_dr_optimal(LatentMdp((m,)))
    assert sol.value == pytest.approx(backward_induction(m).value[0], abs=1e-12)


def test_prop1_m2_h4_matches_history_enumeration():
    lm = make_prop1(2, 4)
    best = max(float(lm.weights @ np.array(v)) for v in history_policy_values(lm))
    assert best == pytest.approx(1.0, abs=1e-12)
    assert solve_dr_optimal(lm).value == pytest.approx(best, abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_dr_value_matches_history_enumeration_on_random_lmdp(seed):
    lm = random_lmdp(seed, 2, 2, 2, 3)
    best = max(float(lm.weights @ np.array(v)) for v in history_policy_values(lm))
    sol = solve_dr_optimal(lm)
    assert sol.value == pytest.approx(best, abs=1e-10)
    assert float(lm.weights @ sol.member_values) == pytest.approx(sol.value, abs=1e-10)


@pytest.mark.parametrize("M,H", [(M, H) for M in (2, 3, 4) for H in (4, 6, 8)])
def test_prop1_dr_value(M, H):
    assert solve_dr_optimal(make_prop1(M, H)).value == pytest.approx((H - 2) / M, abs=1e-12)


def test_dr_policy_rollouts_match_exact_member_values():
    lm = random_lmdp(5, 2, 3, 2, 6)
    sol = solve_dr_optimal(lm)
    pol = sol.policy()
    for j, m in enumerate(lm.mdps):
        est = gap_monte_carlo(m, pol, 4000, (j, 1), vstar=0.0)
        assert abs(-est.gap_mean - sol.member_values[j]) <= 4 * est.ci_halfwidth


def test_node_limit():
    with pytest.raises(NodeLimitExceeded) as info:
        solve_dr_optimal(random_lmdp(0, 3, 4, 2, 10), max_nodes=100)
    assert info.value.count > 100


def test_dr_dominates_a_base_policy():
    lm = make_random_comm(3, 2, 2, 0.6, seed=4, H=8)
    sol = solve_dr_optimal(lm)
    pol = OptimisticElimination(ClassInfo.build(lm.mdps))
    values = [-gap_monte_carlo(m, pol, 3000, (2, j), vstar=0.0).gap_mean for j, m in enumerate(lm.mdps)]
    ci = 1.96 * 8 / np.sqrt(3000)
    assert sol.value >= float(lm.weights @ np.array(values)) - ci


def test_finite_class_reduction_bound():
    # worst-case DR gap is at most M times the worst-case gap of any base policy
    lm = make_random_comm(3, 2, 3, 0.6, seed=8, H=10)
    sol = solve_dr_optimal(lm)
    vstar = np.array([backward_induction(m).value[0] for m in lm.mdps])
    dr_gap = float(np.max(vstar - sol.member_values))
    pol = OptimisticElimination(ClassInfo.build(lm.mdps))
    ests = [gap_monte_carlo(m, pol, 2000, (3, j)) for j, m in enumerate(lm.mdps)]
    base_gap = max(e.gap_mean + e.ci_halfwidth for e in ests)
    assert dr_gap <= len(lm) * base_gap


# -- gap estimation ---------------------------------------------------------


def test_optimal_policy_has_zero_gap(rng):
    m = random_mdp(rng, 4, 2, 20)
    est = gap_monte_carlo(m, MarkovPolicy(backward_induction(m).policy), 2000, 3)
    assert abs(est.gap_mean) <= est.ci_halfwidth * 1.5
    assert est.episodes == 2000 and est.ci_halfwidth >= 0


def test_prop1_uniform_arm_gap():
    lm = make_prop1(4, 100)
    est = gap_monte_carlo(lm.mdps[0], UniformRandomPolicy(4), 4000, 8)
    assert abs(est.gap_mean - 73.5) <= est.ci_halfwidth * 1.5


def test_two_state_suboptimal_gap():
    m = make_two_state(0.1, 0.05, H=1000)
    est = gap_monte_carlo(m, MarkovPolicy(np.array([1, 1])), 400, 5)
    exact = backward_induction(m).value[0] - evaluate_markov_policy(m, np.array([1, 1]))
    assert 80 <= exact <= 120
    assert abs(est.gap_mean - exact) <= 1.5 * est.ci_halfwidth


def test_control_variate_is_unbiased_and_tighter():
    m = make_two_state(0.1, 0.05, H=500)
    pol = MarkovPolicy(np.array([1, 1]))
    exact = backward_induction(m).value[0] - evaluate_markov_policy(m, np.array([1, 1]))
    plain = gap_monte_carlo(m, pol, 300, 7)
    cv = gap_monte_carlo(m, pol, 300, 7, control_variate=True)
    assert cv.estimator == "martingale"
    assert cv.ci_halfwidth < plain.ci_halfwidth / 3
    assert abs(cv.gap_mean - exact) <= 1.5 * cv.ci_halfwidth


def test_optimal_gap_concentrates():
    m = make_two_state(0.2, 0.1, H=50)
    pol = MarkovPolicy(backward_induction(m).policy)
    misses = 0
    for seed in range(100):
        est = gap_monte_carlo(m, pol, 200, seed)
        misses += abs(est.gap_mean) > 3 * est.ci_halfwidth
    assert misses <= 1


def test_zero_episodes_rejected():
    with pytest.raises(ValueError):
        gap_monte_carlo(make_two_state(0.1, 0.05, H=5), UniformRandomPolicy(2), 0, 0)
