import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lmdp_lab.instances import make_prop1, make_random_comm, make_two_state
from lmdp_lab.lmdp import MarkovPolicy, rollout_real
from lmdp_lab.mdp_core import AvgSolution, TabularMdp, UnboundedSpanError, ValidationError
from lmdp_lab.policies import (
    ClassInfo,
    GeneralOptimistic,
    OptimisticElimination,
    SeparatedElimination,
    SeparatedEliminationConfig,
    deviation_statistic,
    elimination_threshold,
    importance_score,
    make_general_optimistic,
    make_optimistic_elimination,
    make_separated_elimination,
    most_informative_pair,
    separation_delta,
)

def chain(up: float, down: float, H: int) -> TabularMdp:
    """Two-state chain: state 1 pays; action 0 climbs w.p. ``up``, action 1 w.p. up / 2."""
    P = np.array([[[1 - up, up], [1 - up / 2, up / 2]], [[down, 1 - down]] * 2])
    return TabularMdp(P, np.array([[0.0, 0.0], [1.0, 1.0]]), H)


TRACE_KEYS = {"step", "phase", "surviving_count", "chosen_member", "statistic", "threshold", "switched"}


# -- separation primitives --------------------------------------------------


def test_duplicated_member_has_zero_separation():
    m = make_two_state(0.1, 0.05)
    assert separation_delta([m, m]) == 0.0


def test_prop1_separation():
    assert separation_delta(make_prop1(2, 5).mdps) == pytest.approx(2.0)


def test_two_state_separation_is_twice_eps():
    assert separation_delta([make_two_state(0.2, 0.1), make_two_state(0.2, 0.0)]) == pytest.approx(0.2)


def test_identical_pair_tie_rule():
    m = make_two_state(0.1, 0.05)
    assert tuple(most_informative_pair(m, m)) == (0, 0, 0.0)


def test_prop1_informative_pair():
    a, b = make_prop1(2, 5).mdps
    s, act, dist = most_informative_pair(a, b)
    assert (s, act) == (1, 0) and dist == pytest.approx(2.0)


def test_single_row_perturbation_is_found(rng):
    P = rng.dirichlet(np.ones(4), size=(4, 3))
    Q = P.copy()
    Q[2, 1] = np.roll(Q[2, 1], 1)
    R = rng.random((4, 3))
    pair = most_informative_pair(TabularMdp(P, R, 5), TabularMdp(Q, R, 5))
    assert (pair.state, pair.action) == (2, 1)


def test_separation_needs_two_members():
    with pytest.raises(ValueError):
        separation_delta([make_two_state(0.1, 0.05)])


# -- separated elimination --------------------------------------------------


def test_sample_count_formula():
    lm = make_random_comm(5, 2, 3, 0.5, seed=2, H=1000)
    cfg = SeparatedEliminationConfig(ClassInfo.build(lm.mdps), c0=0.01)
    d = separation_delta(lm.mdps)
    expected = math.ceil(0.01 * math.log(5 * 3 * 1000) ** 2 * math.log(3 * 1000) / d**4)
    assert cfg.sample_count() == expected
    assert SeparatedEliminationConfig(cfg.info, n0=7).sample_count() == 7


def test_unseparated_class_rejected():
    m = make_two_state(0.1, 0.05)
    with pytest.raises(ValidationError):
        SeparatedEliminationConfig(ClassInfo.build([m, m]))


def test_singleton_class_plays_optimal_policy():
    m = make_two_state(0.1, 0.05, H=200)
    info = ClassInfo.build([m])
    pol = make_separated_elimination(SeparatedEliminationConfig(info), seed=3)
    ref = MarkovPolicy(info.solutions[0].policy)
    assert rollout_real(m, pol, 9) == rollout_real(m, ref, 9)
    assert pol.stage1_steps == 0


def test_separated_elimination_identifies_real_mdp():
    lm = make_random_comm(5, 2, 3, 0.5, seed=21, H=3000)
    info = ClassInfo.build(lm.mdps)
    cfg = SeparatedEliminationConfig(info, n0=200)
    hits = runs = 0
    for seed in range(200):
        j = seed % 3
        pol = SeparatedElimination(cfg, seed)
        rollout_real(lm.mdps[j], pol, (seed, 1))
        assert len(pol.survivors) == 1, "stage one did not finish inside the horizon"
        hits += pol.survivors == [j]
        runs += 1
    assert hits / runs >= 0.95


def test_separated_elimination_trace_and_reset():
    lm = make_random_comm(4, 2, 3, 0.5, seed=5, H=400)
    pol = SeparatedElimination(SeparatedEliminationConfig(ClassInfo.build(lm.mdps), n0=10), seed=1)
    pol.trace = []
    t1 = rollout_real(lm.mdps[1], pol, 4)
    trace = list(pol.trace)
    assert len(trace) == 400 and all(set(r) == TRACE_KEYS for r in trace)
    assert {r["phase"] for r in trace} <= {"travel", "sample", "exploit"}
    assert sum(r["switched"] for r in trace) == pol.eliminations == 2
    assert rollout_real(lm.mdps[1], pol, 4) == t1


# -- optimistic elimination -------------------------------------------------


def test_threshold_arithmetic():
    assert elimination_threshold(10, 50, 1000, 4) == pytest.approx(299.79, abs=0.01)
    assert elimination_threshold(10, 0, 1000, 4) == 0.0


def test_empty_window_statistic():
    sol = AvgSolution(0.5, np.array([0.0, 1.0]), np.zeros(2, int), 2.0, 0.0, 1)
    assert deviation_statistic(sol, [], np.full((2, 1, 2), 0.5)) == 0.0


def test_statistic_is_mean_zero_under_own_kernel():
    m = make_two_state(0.2, 0.1, H=50)
    info = ClassInfo.build([m])
    sol = info.solutions[0]
    rng = np.random.default_rng(0)
    stats = []
    for _ in range(10_000):
        s = int(rng.integers(2))
        a = int(rng.integers(2))
        s2 = int(rng.random() < m.transitions[s, a, 1])
        stats.append(deviation_statistic(sol, [(s, a, s2)], m.transitions))
    stats = np.array(stats)
    assert abs(stats.mean()) <= 3 * stats.std() / np.sqrt(stats.size)


def test_statistic_accumulates_kernel_mismatch():
    sol = AvgSolution(0.5, np.array([0.0, 1.0]), np.zeros(2, int), 2.0, 0.0, 1)
    model = np.array([[[0.25, 0.75]], [[0.5, 0.5]]])  # P lambda(0, 0) = 0.75
    rng = np.random.default_rng(1)
    sums = []
    for _ in range(2000):
        # the real chain moves to state 1 w.p. 0.25 from (0, 0)
        records = [(0, 0, int(u < 0.25)) for u in rng.random(100)]
        sums.append(deviation_statistic(sol, records, model))
    sums = np.array(sums)
    assert abs(sums.mean() - 50.0) <= 3 * sums.std() / np.sqrt(sums.size)


def test_optimistic_elimination_requires_communicating_members():
    with pytest.raises(UnboundedSpanError):
        make_optimistic_elimination(make_prop1(2, 10).mdps)


@settings(max_examples=10)
@given(seed=st.integers(0, 10**4), j=st.integers(0, 3))
def test_optimism_and_elimination_count(seed, j):
    lm = make_random_comm(4, 2, 4, 1.0, seed=seed, H=3000)
    info = ClassInfo.build(lm.mdps)
    pol = OptimisticElimination(info, seed)
    pol.trace = []
    rollout_real(lm.mdps[j], pol, seed)
    assert pol.eliminations <= info.M - 1 or pol.exhausted
    gains = info.gains
    survived = True
    for rec, k in zip(pol.trace, pol.history):
        if survived:
            assert gains[k] >= gains[j] - 1e-9
        if rec["switched"] and rec["chosen_member"] == j:
            survived = False


def test_strongly_separated_wrong_member_is_eliminated():
    # member 1 reaches the paying state much more easily than the real MDP
    real = chain(0.2, 0.2, 5000)
    fake = chain(0.9, 0.2, 5000)
    info = ClassInfo.build([real, fake])
    pol = OptimisticElimination(info, 0)
    rollout_real(real, pol, 1)
    assert pol.survivors == [0] and pol.eliminations == 1


# -- general optimistic -----------------------------------------------------


def test_alpha_and_beta():
    info = ClassInfo.build([make_two_state(0.1, 0.05, H=1000), make_two_state(0.1, 0.0, H=1000)])
    pol = GeneralOptimistic(info, c=2.0)
    assert info.diameter == pytest.approx(10.0)
    assert pol.alpha == pytest.approx(401.0)
    assert pol.beta == pytest.approx(2.0 * 100.0 * math.log(1000 * 4))


def test_importance_score_single_fresh_sample():
    assert importance_score(np.array([1.0]), np.array([0.0]), 401.0) == pytest.approx(1 / 401)
    assert importance_score(np.array([]), np.array([]), 401.0) == 0.0


def test_singleton_class_never_switches():
    m = make_two_state(0.2, 0.1, H=500)
    info = ClassInfo.build([m])
    pol = make_general_optimistic(info)
    ref = MarkovPolicy(info.solutions[0].policy)
    assert rollout_real(m, pol, 2) == rollout_real(m, ref, 2)
    assert pol.switches == 0


def test_general_optimistic_switches_on_informative_data():
    real = chain(0.2, 0.2, 5000)
    fake = chain(0.9, 0.2, 5000)
    info = ClassInfo.build([real, fake])
    pol = GeneralOptimistic(info, c=1.0)
    pol.trace = []
    rollout_real(real, pol, 3)
    assert pol.switches >= 1
    assert pol.confidence_set == [0]
    switched = [r for r in pol.trace if r["switched"]]
    assert len(switched) == pol.switches
    assert all(r["statistic"] >= 1.0 for r in switched)
    assert all(set(r) == TRACE_KEYS for r in pol.trace[:10])


def test_policies_reset_reproducibly():
    lm = make_random_comm(4, 2, 3, 0.8, seed=9, H=500)
    info = ClassInfo.build(lm.mdps)
    for pol in (OptimisticElimination(info, 5), GeneralOptimistic(info, seed=5)):
        assert rollout_real(lm.mdps[2], pol, 6) == rollout_real(lm.mdps[2], pol, 6)
