"""Latent MDPs: episode sampling, posteriors, the exact DR oracle and gap estimates."""

from __future__ import annotations

import csv
import json
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .mdp_core import (
    TIE_TOL,
    TabularMdp,
    ValidationError,
    backward_induction,
    relative_value_iteration,
)

LMDP_FORMAT = "lmdp-lab/lmdp-v1"
Z95 = 1.959963984540054


def seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (tuple, list)):
        return np.random.SeedSequence([int(x) for x in seed])
    return np.random.SeedSequence(int(seed))


def child_seed(seed_seq: np.random.SeedSequence) -> int:
    return int(seed_seq.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True, eq=False)
class LatentMdp:
    mdps: tuple[TabularMdp, ...]
    weights: np.ndarray | None = None

    def __post_init__(self):
        mdps = tuple(self.mdps)
        if not mdps:
            raise ValidationError("a latent MDP needs at least one member")
        w = np.full(len(mdps), 1.0 / len(mdps)) if self.weights is None else np.array(self.weights, float)
        w.setflags(write=False)
        object.__setattr__(self, "mdps", mdps)
        object.__setattr__(self, "weights", w)
        ref = mdps[0]
        for i, m in enumerate(mdps[1:], start=1):
            if m.transitions.shape != ref.transitions.shape:
                raise ValidationError(f"member {i} has shape {m.transitions.shape}, expected {ref.transitions.shape}")
            if m.horizon != ref.horizon or m.start_state != ref.start_state:
                raise ValidationError(f"member {i} disagrees on horizon or start state")
            if not np.allclose(m.rewards, ref.rewards, rtol=0.0, atol=1e-12):
                raise ValidationError(f"member {i} has a different reward table")
        if w.shape != (len(mdps),) or (w < 0).any() or abs(w.sum() - 1.0) > 1e-12:
            raise ValidationError(f"weights must be a distribution over {len(mdps)} members")

    def __len__(self) -> int:
        return len(self.mdps)

    @property
    def num_states(self) -> int:
        return self.mdps[0].num_states

    @property
    def num_actions(self) -> int:
        return self.mdps[0].num_actions

    @property
    def horizon(self) -> int:
        return self.mdps[0].horizon

    @property
    def start_state(self) -> int:
        return self.mdps[0].start_state

    @property
    def rewards(self) -> np.ndarray:
        return self.mdps[0].rewards

    @property
    def kernels(self) -> np.ndarray:
        """(M, S, A, S) stack of member transition tensors."""
        return np.stack([m.transitions for m in self.mdps])

    def with_horizon(self, horizon: int) -> "LatentMdp":
        return LatentMdp(tuple(m.with_horizon(horizon) for m in self.mdps), self.weights)

    def to_dict(self) -> dict:
        return {
            "format": LMDP_FORMAT,
            "weights": self.weights.tolist(),
            "mdps": [m.to_dict() for m in self.mdps],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LatentMdp":
        if doc.get("format") != LMDP_FORMAT:
            raise ValidationError(f"expected format {LMDP_FORMAT!r}, got {doc.get('format')!r}")
        return cls(tuple(TabularMdp.from_dict(m) for m in doc["mdps"]), doc.get("weights"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "LatentMdp":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Trajectory:
    states: list[int]
    actions: list[int]
    rewards: list[float]
    latent_index: int = 0

    @property
    def total_reward(self) -> float:
        return math.fsum(self.rewards)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "state", "action", "reward", "latent_index"])
            for h, s in enumerate(self.states):
                a = self.actions[h] if h < len(self.actions) else ""
                r = self.rewards[h] if h < len(self.rewards) else ""
                w.writerow([h + 1, s, a, r, self.latent_index])

    @classmethod
    def read_csv(cls, path: str | Path) -> "Trajectory":
        states, actions, rewards = [], [], []
        latent = 0
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                states.append(int(row["state"]))
                latent = int(row["latent_index"])
                if row["action"] != "":
                    actions.append(int(row["action"]))
                    rewards.append(float(row["reward"]))
        return cls(states, actions, rewards, latent)


class HistoryPolicy:
    """Stateful agent: ``reset``, then alternate ``observe`` and ``act``.

    ``observe(s, None)`` delivers the start state; every later call carries the
    reward of the previous action. Subclasses keep arbitrary memory but must
    be deterministic given their seed and the observation sequence.
    """

    def __init__(self, seed=0):
        self.seed = seed
        self.trace: list[dict] | None = None

    def reset(self, seed=None) -> None:
        if seed is not None:
            self.seed = seed
        self._rng = np.random.default_rng(seed_sequence(self.seed))
        if self.trace is not None:
            self.trace = []

    def observe(self, state: int, reward: float | None) -> None:
        pass

    def act(self, state: int) -> int:
        raise NotImplementedError

    def diagnostics(self) -> dict:
        return {}


class MarkovPolicy(HistoryPolicy):
    """Deterministic Markov policy from an (H, S) or stationary (S,) action table."""

    def __init__(self, table, seed=0):
        super().__init__(seed)
        table = np.asarray(table, dtype=int)
        self.stationary = table.ndim == 1
        self._rows = table.tolist()
        self.reset()

    def reset(self, seed=None) -> None:
        super().reset(seed)
        self._step = 0

    def act(self, state: int) -> int:
        row = self._rows if self.stationary else self._rows[min(self._step, len(self._rows) - 1)]
        self._step += 1
        return row[state]


class UniformRandomPolicy(HistoryPolicy):
    def __init__(self, num_actions: int, seed=0):
        super().__init__(seed)
        self.num_actions = num_actions
        self.reset()

    def act(self, state: int) -> int:
        return int(self._rng.integers(self.num_actions))


def _run(mdp: TabularMdp, policy: HistoryPolicy, env_rng, policy_seed, latent_index: int) -> Trajectory:
    cum = mdp.cumulative
    rew = mdp.reward_lists
    A = mdp.num_actions
    draws = env_rng.random(mdp.horizon).tolist()
    s = mdp.start_state
    states, actions, rewards = [s], [], []
    policy.reset(policy_seed)
    policy.observe(s, None)
    for u in draws:
        a = policy.act(s)
        if not 0 <= a < A:
            raise ValueError(f"policy emitted action {a} outside [0, {A})")
        r = rew[s][a]
        s = bisect_right(cum[s][a], u)
        actions.append(a)
        rewards.append(r)
        states.append(s)
        policy.observe(s, r)
    return Trajectory(states, actions, rewards, latent_index)


def rollout_real(mdp: TabularMdp, policy: HistoryPolicy, seed) -> Trajectory:
    env_ss, pol_ss = seed_sequence(seed).spawn(2)
    return _run(mdp, policy, np.random.default_rng(env_ss), child_seed(pol_ss), 0)


def sample_episode(lmdp: LatentMdp, policy: HistoryPolicy, seed) -> Trajectory:
    latent_ss, env_ss, pol_ss = seed_sequence(seed).spawn(3)
    i = int(np.random.default_rng(latent_ss).choice(len(lmdp), p=lmdp.weights))
    return _run(lmdp.mdps[i], policy, np.random.default_rng(env_ss), child_seed(pol_ss), i)


def bayes_posterior(lmdp: LatentMdp, states: Sequence[int], actions: Sequence[int]) -> np.ndarray:
    """Posterior over members given a state/action prefix (rewards carry no information)."""
    if len(states) != len(actions) + 1 and not (len(states) == 0 and len(actions) == 0):
        raise ValueError("prefix needs exactly one more state than actions")
    P = lmdp.kernels
    with np.errstate(divide="ignore"):
        logp = np.log(lmdp.weights)
    for t, a in enumerate(actions):
        with np.errstate(divide="ignore"):
            logp = logp + np.log(P[:, states[t], a, states[t + 1]])
    if np.isneginf(logp).all():
        raise ValueError("prefix is impossible under every member")
    logp -= logp.max()
    post = np.exp(logp)
    return post / post.sum()


class NodeLimitExceeded(RuntimeError):
    def __init__(self, count: int, limit: int):
        super().__init__(f"belief MDP has more than {limit} reachable nodes (reached {count})")
        self.count = count
        self.limit = limit


@dataclass(eq=False)
class DrSolution:
    """Exact belief-MDP solution of a latent MDP."""

    value: float  # ν-average value of the optimal history policy
    member_values: np.ndarray  # value of that policy in each member
    node_state: list[int]
    node_action: list[int]
    node_children: list[dict[int, int]]  # children under the chosen action, keyed by next state
    num_nodes: int

    def policy(self) -> "DrPolicy":
        return DrPolicy(self)

    def on_policy_nodes(self) -> list[int]:
        """Nodes reachable when the optimal actions are followed."""
        seen, stack = {0}, [0]
        while stack:
            for child in self.node_children[stack.pop()].values():
                if child not in seen:
                    seen.add(child)
                    stack.append(child)
        return sorted(seen)

    def actions_used(self) -> set[int]:
        return {self.node_action[n] for n in self.on_policy_nodes() if self.node_children[n]}


class DrPolicy(HistoryPolicy):
    """Executes a DrSolution by walking its belief tree."""

    def __init__(self, solution: DrSolution, seed=0):
        super().__init__(seed)
        self.solution = solution
        self.reset()

    def reset(self, seed=None) -> None:
        super().reset(seed)
        self._node = 0
        self._started = False

    def observe(self, state: int, reward: float | None) -> None:
        if not self._started:
            self._started = True
            return
        try:
            self._node = self.solution.node_children[self._node][state]
        except KeyError:
            raise ValueError(f"transition to state {state} has zero probability under every member") from None

    def act(self, state: int) -> int:
        return self.solution.node_action[self._node]


def _belief_key(state: int, belief: np.ndarray) -> tuple:
    return (state, tuple(np.round(belief, 9).tolist()))


def solve_dr_optimal(lmdp: LatentMdp, max_nodes: int = 10**6) -> DrSolution:
    """Backward induction over reachable (step, state, posterior) nodes.

    Posteriors that agree after rounding to 1e-9 share a node. Ties between
    actions go to the lowest index.
    """
    P = lmdp.kernels  # (M, S, A, S)
    R = lmdp.rewards
    H, A = lmdp.horizon, lmdp.num_actions
    states: list[int] = [lmdp.start_state]
    beliefs: list[np.ndarray] = [np.asarray(lmdp.weights, float)]
    levels: list[list[int]] = [[0]]
    # edges[node][a] = (next_states, child_ids, predictive probs)
    edges: list[list[tuple]] = []
    for h in range(H):
        index: dict[tuple, int] = {}
        nxt: list[int] = []
        for node in levels[h]:
            s, b = states[node], beliefs[node]
            per_action = []
            for a in range(A):
                joint = b[:, None] * P[:, s, a, :]
                pred = joint.sum(axis=0)
                succ = np.flatnonzero(pred > 0.0)
                kids = []
                for s2 in succ.tolist():
                    b2 = joint[:, s2] / pred[s2]
                    key = _belief_key(s2, b2)
                    child = index.get(key)
                    if child is None:
                        child = len(states)
                        index[key] = child
                        states.append(s2)
                        beliefs.append(b2)
                        nxt.append(child)
                        if len(states) > max_nodes:
                            raise NodeLimitExceeded(len(states), max_nodes)
                    kids.append(child)
                per_action.append((succ, np.array(kids, dtype=int), pred[succ]))
            edges.append(per_action)
        levels.append(nxt)

    n = len(states)
    M = len(lmdp)
    value = np.zeros(n)
    member = np.zeros((n, M))
    action = [0] * n
    children: list[dict[int, int]] = [{} for _ in range(n)]
    for h in range(H - 1, -1, -1):
        for node in levels[h]:
            s = states[node]
            q = np.array([R[s, a] + pr @ value[kids] for a, (_, kids, pr) in enumerate(edges[node])])
            a = int(np.argmax(q >= q.max() - TIE_TOL * max(1.0, abs(q.max()))))
            succ, kids, pr = edges[node][a]
            value[node] = q[a]
            action[node] = a
            children[node] = dict(zip(succ.tolist(), kids.tolist()))
            member[node] = R[s, a] + (P[:, s, a, succ] * member[kids].T).sum(axis=1)
    return DrSolution(float(value[0]), member[0].copy(), states, action, children, n)


@dataclass
class GapEstimate:
    gap_mean: float
    ci_halfwidth: float
    episodes: int
    vstar: float
    estimator: str = "plain"
    diagnostics: list[dict] = field(default_factory=list)


def gap_monte_carlo(
    mdp_star: TabularMdp,
    policy: HistoryPolicy,
    episodes: int,
    seed,
    control_variate: bool = False,
    bias: np.ndarray | None = None,
    vstar: float | None = None,
) -> GapEstimate:
    """Monte Carlo estimate of V*(s1) - V^pi(s1) in ``mdp_star``.

    With ``control_variate`` each return is corrected by the zero-mean
    martingale sum_h (bias(s_{h+1}) - P bias(s_h, a_h)) of the real MDP, which
    leaves the estimate unbiased for any history-dependent policy.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if vstar is None:
        vstar = float(backward_induction(mdp_star).value[mdp_star.start_state])
    if control_variate and bias is None:
        bias = relative_value_iteration(mdp_star, with_diameter=False).bias
    if control_variate:
        p_bias = (mdp_star.transitions @ bias).tolist()
        bias_l = bias.tolist()
    returns = np.empty(episodes)
    diag = []
    for e, ss in enumerate(seed_sequence(seed).spawn(episodes)):
        traj = rollout_real(mdp_star, policy, ss)
        ret = traj.total_reward
        if control_variate:
            st, ac = traj.states, traj.actions
            ret -= math.fsum(bias_l[st[h + 1]] - p_bias[st[h]][ac[h]] for h in range(len(ac)))
        returns[e] = ret
        diag.append(policy.diagnostics())
    mean = float(returns.mean())
    ci = Z95 * float(returns.std(ddof=1)) / math.sqrt(episodes) if episodes > 1 else math.inf
    return GapEstimate(
        vstar - mean, ci, episodes, vstar, "martingale" if control_variate else "plain", diag
    )
