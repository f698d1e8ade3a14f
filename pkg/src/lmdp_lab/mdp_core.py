"""Exact planning and evaluation for a single tabular MDP.

Two views of the same transition kernel live here: the finite-horizon
episodic view (backward induction, forward policy evaluation) and the
infinite-horizon average-reward view (relative value iteration, diameter
via expected hitting times).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from itertools import accumulate
from pathlib import Path

import numpy as np

MDP_FORMAT = "lmdp-lab/mdp-v1"
ROW_SUM_TOL = 1e-12
TIE_TOL = 1e-12


class ValidationError(ValueError):
    """An MDP, class or config violates a structural invariant."""


class UnboundedSpanError(RuntimeError):
    """Relative value iteration could not settle on a constant gain."""

    def __init__(self, message: str, span: float, iterations: int):
        super().__init__(message)
        self.span = span
        self.iterations = iterations


@dataclass(frozen=True, eq=False)
class TabularMdp:
    transitions: np.ndarray  # (S, A, S)
    rewards: np.ndarray  # (S, A)
    horizon: int
    start_state: int = 0

    def __post_init__(self):
        P = np.array(self.transitions, dtype=float)
        R = np.array(self.rewards, dtype=float)
        P.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", R)
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "start_state", int(self.start_state))
        validate(self)

    @property
    def num_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[1]

    def with_horizon(self, horizon: int) -> "TabularMdp":
        return replace(self, horizon=horizon)

    @cached_property
    def cumulative(self) -> list[list[list[float]]]:
        """Per-row cumulative next-state probabilities, as plain lists for bisect."""
        return [[_cumulative_row(row.tolist()) for row in rows] for rows in self.transitions]

    @cached_property
    def reward_lists(self) -> list[list[float]]:
        return self.rewards.tolist()

    def to_dict(self) -> dict:
        return {
            "format": MDP_FORMAT,
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "horizon": self.horizon,
            "start_state": self.start_state,
            "transitions": self.transitions.tolist(),
            "rewards": self.rewards.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMdp":
        if doc.get("format") != MDP_FORMAT:
            raise ValidationError(f"expected format {MDP_FORMAT!r}, got {doc.get('format')!r}")
        P = np.asarray(doc["transitions"], dtype=float)
        R = np.asarray(doc["rewards"], dtype=float)
        S, A = int(doc["num_states"]), int(doc["num_actions"])
        if P.shape != (S, A, S) or R.shape != (S, A):
            raise ValidationError(
                f"shape mismatch: transitions {P.shape}, rewards {R.shape}, declared S={S} A={A}"
            )
        return cls(P, R, int(doc["horizon"]), int(doc["start_state"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "TabularMdp":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _cumulative_row(row: list[float]) -> list[float]:
    cum = list(accumulate(row))
    last = max(i for i, p in enumerate(row) if p > 0.0)
    # uniform draws close to 1 must never land on a zero-probability tail
    cum[last:] = [float("inf")] * (len(cum) - last)
    return cum


@dataclass(frozen=True, eq=False)
class PlanSolution:
    values: np.ndarray  # (H+1, S); row h is V*_{h+1}, last row zero
    q_values: np.ndarray  # (H, S, A)
    policy: np.ndarray  # (H, S)

    @property
    def value(self) -> float:
        """Optimal value from the start of the episode, at every state."""
        return self.values[0]


@dataclass(frozen=True, eq=False)
class AvgSolution:
    gain: float
    bias: np.ndarray  # (S,), min is 0
    policy: np.ndarray  # (S,)
    diameter: float  # inf when unbounded
    residual: float
    iterations: int = field(default=0)


def validate(mdp: TabularMdp) -> None:
    """Raise ValidationError naming the first violated invariant."""
    P, R = mdp.transitions, mdp.rewards
    if P.ndim != 3 or P.shape[0] != P.shape[2]:
        raise ValidationError(f"transitions must have shape (S, A, S), got {P.shape}")
    S, A = P.shape[:2]
    if S < 1 or A < 1:
        raise ValidationError("need at least one state and one action")
    if R.shape != (S, A):
        raise ValidationError(f"rewards must have shape ({S}, {A}), got {R.shape}")
    if mdp.horizon < 1:
        raise ValidationError(f"horizon must be >= 1, got {mdp.horizon}")
    if not 0 <= mdp.start_state < S:
        raise ValidationError(f"start_state {mdp.start_state} out of range for S={S}")
    bad = np.argwhere(~np.isfinite(P) | (P < 0.0) | (P > 1.0))
    if bad.size:
        s, a, t = bad[0]
        raise ValidationError(f"probability P[{s},{a},{t}]={P[s, a, t]} outside [0, 1]")
    sums = P.sum(axis=2)
    bad = np.argwhere(np.abs(sums - 1.0) > ROW_SUM_TOL)
    if bad.size:
        s, a = bad[0]
        raise ValidationError(f"row (s={s}, a={a}) is not stochastic: sums to {float(sums[s, a])!r}")
    bad = np.argwhere(~np.isfinite(R) | (R < 0.0) | (R > 1.0))
    if bad.size:
        s, a = bad[0]
        raise ValidationError(f"reward R[{s},{a}]={R[s, a]} outside [0, 1]")


def argmax_lowest(q: np.ndarray, atol: float = TIE_TOL) -> np.ndarray:
    """Row-wise argmax over the last axis; near-ties go to the lowest index."""
    best = q.max(axis=-1, keepdims=True)
    scale = np.maximum(1.0, np.abs(best))
    return np.argmax(q >= best - atol * scale, axis=-1)


def backward_induction(mdp: TabularMdp) -> PlanSolution:
    P, R, H, S = mdp.transitions, mdp.rewards, mdp.horizon, mdp.num_states
    values = np.zeros((H + 1, S))
    q_values = np.empty((H, S, mdp.num_actions))
    policy = np.empty((H, S), dtype=int)
    for h in range(H - 1, -1, -1):
        q = R + P @ values[h + 1]
        q_values[h] = q
        policy[h] = argmax_lowest(q)
        values[h] = q.max(axis=1)
    return PlanSolution(values, q_values, policy)


def _as_horizon_policy(mdp: TabularMdp, policy) -> np.ndarray:
    pi = np.asarray(policy, dtype=int)
    if pi.ndim == 1:
        pi = np.broadcast_to(pi, (mdp.horizon, mdp.num_states))
    if pi.shape != (mdp.horizon, mdp.num_states):
        raise ValidationError(f"policy must have shape (H, S) or (S,), got {pi.shape}")
    if pi.min() < 0 or pi.max() >= mdp.num_actions:
        raise ValidationError(f"action index out of range [0, {mdp.num_actions})")
    return pi


def evaluate_markov_policy(mdp: TabularMdp, policy) -> float:
    """Exact value of a deterministic Markov policy from the start state.

    ``policy`` is an (H, S) action table, or an (S,) stationary table.
    """
    pi = _as_horizon_policy(mdp, policy)
    states = np.arange(mdp.num_states)
    dist = np.zeros(mdp.num_states)
    dist[mdp.start_state] = 1.0
    total = 0.0
    for h in range(mdp.horizon):
        a = pi[h]
        total += dist @ mdp.rewards[states, a]
        dist = dist @ mdp.transitions[states, a]
    return float(total)


def _bfs_to(edges: np.ndarray, target: int) -> tuple[np.ndarray, np.ndarray]:
    """Backward breadth-first search over (S, A, S) edge flags; returns hop counts and actions."""
    S = edges.shape[0]
    dist = np.full(S, -1)
    dist[target] = 0
    policy = np.zeros(S, dtype=int)
    queue = deque([target])
    while queue:
        t = queue.popleft()
        for s in np.flatnonzero(edges[:, :, t].any(axis=1)):
            if dist[s] < 0:
                dist[s] = dist[t] + 1
                policy[s] = int(np.argmax(edges[s, :, t]))
                queue.append(s)
    return dist, policy


def hitting_times(mdp: TabularMdp, target: int) -> tuple[np.ndarray, np.ndarray]:
    """Minimum expected hitting times of ``target`` and a policy attaining them.

    Solved as a stochastic shortest path with unit cost per step and the
    target absorbing, by policy iteration from a breadth-first proper policy.
    Entries are ``inf`` for states that cannot reach the target.
    """
    P = mdp.transitions
    S = mdp.num_states
    support = P > 0.0
    # states that reach the target almost surely: prune actions that can leave
    # the candidate set until the set is stable
    good = np.ones(S, dtype=bool)
    while True:
        allowed = ~(support & ~good[None, None, :]).any(axis=2)
        dist, policy = _bfs_to(support & allowed[:, :, None], target)
        reach = dist >= 0
        if np.array_equal(reach, good):
            break
        good = reach
    times = np.full(S, np.inf)
    times[target] = 0.0
    live = np.flatnonzero(dist > 0)
    if live.size == 0:
        return times, policy
    for _ in range(10 * S * mdp.num_actions + 10):
        P_pi = P[live, policy[live]][:, live]
        T = np.linalg.solve(np.eye(live.size) - P_pi, np.ones(live.size))
        full = np.zeros(S)
        full[live] = T
        q = 1.0 + P[live] @ full
        q[~allowed[live]] = np.inf
        current = q[np.arange(live.size), policy[live]]
        best = q.min(axis=1)
        improve = best < current - 1e-12 * np.maximum(1.0, current)
        if not improve.any():
            times[live] = T
            return times, policy
        choice = np.argmax(q <= best[:, None] + 1e-12 * np.maximum(1.0, best[:, None]), axis=1)
        policy[live[improve]] = choice[improve]
    raise RuntimeError("hitting-time policy iteration did not terminate")  # pragma: no cover


def diameter(mdp: TabularMdp) -> float:
    """max over s != s' of the minimal expected time to reach s' from s; inf if unbounded."""
    worst = 0.0
    for target in range(mdp.num_states):
        times, _ = hitting_times(mdp, target)
        worst = max(worst, float(times.max()))
        if np.isinf(worst):
            return worst
    return worst


def travel_policies(mdp: TabularMdp) -> np.ndarray:
    """(S, S) table: entry [t, s] is the action of the min-hitting-time policy towards t."""
    return np.stack([hitting_times(mdp, t)[1] for t in range(mdp.num_states)])


def relative_value_iteration(
    mdp: TabularMdp,
    tol: float = 1e-10,
    max_iter: int = 10**7,
    aperiodicity: float = 0.5,
    with_diameter: bool = True,
) -> AvgSolution:
    """Optimal gain, bias and stationary policy of a communicating MDP.

    Iterates the Bellman operator of the aperiodic transform
    P' = tau * P + (1 - tau) * I, which keeps the bias and scales the gain by
    tau. Stops when the span of successive differences drops below ``tol``.
    Raises UnboundedSpanError when the per-state gains converge to distinct
    values (no constant gain exists) or the sweep cap is reached.
    """
    P, R = mdp.transitions, mdp.rewards
    tau = aperiodicity
    h = np.zeros(mdp.num_states)
    prev_diff = None
    span = np.inf
    for it in range(1, max_iter + 1):
        best = (R + P @ h).max(axis=1)
        diff = tau * (best - h)
        span = float(diff.max() - diff.min())
        if span <= tol:
            break
        if prev_diff is not None and it > 10:
            drift = float(np.abs(diff - prev_diff).max())
            if drift <= 1e-9 * span:
                raise UnboundedSpanError(
                    f"per-state gains settled at span {span / tau:.6g} after {it} sweeps; "
                    "the MDP is not communicating",
                    span / tau,
                    it,
                )
        prev_diff = diff
        h = h + diff
        h -= h.min()
    else:
        raise UnboundedSpanError(
            f"no convergence within {max_iter} sweeps (span {span / tau:.6g})", span / tau, max_iter
        )
    bias = h - h.min()
    q = R + P @ bias
    policy = argmax_lowest(q)
    adv = q.max(axis=1) - bias
    gain = float(0.5 * (adv.max() + adv.min()))
    residual = float(np.abs(adv - gain).max())
    D = diameter(mdp) if with_diameter else float("nan")
    return AvgSolution(gain, bias, policy, D, residual, it)
