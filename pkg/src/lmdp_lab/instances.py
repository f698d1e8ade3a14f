"""Generators for hard-instance families and random communicating classes."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .lmdp import LatentMdp
from .mdp_core import TabularMdp, ValidationError, diameter

FAMILIES = ("prop1", "two_state", "jao_tree", "prop5_bandit", "random_comm")


@dataclass(frozen=True)
class InstanceSpec:
    family: str
    M: int = 2
    S: int = 5
    A: int = 2
    H: int = 100
    delta: float = 0.1
    eps: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.H < 1 or self.M < 1:
            raise ValidationError("H and M must be positive")
        if self.family == "prop1" and self.M < 2:
            raise ValidationError("prop1 needs M >= 2")
        if self.family in ("two_state", "jao_tree") and not 0 < self.eps <= self.delta <= 0.5:
            raise ValidationError(f"need 0 < eps <= delta <= 1/2, got delta={self.delta} eps={self.eps}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "InstanceSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown instance keys: {sorted(unknown)}")
        return cls(**doc)

    def build(self) -> LatentMdp:
        if self.family == "prop1":
            return make_prop1(self.M, self.H)
        if self.family == "two_state":
            return LatentMdp((make_two_state(self.delta, self.eps, self.H),))
        if self.family == "jao_tree":
            return make_jao_tree(self.S, self.A, self.M, self.delta, self.eps, self.H)
        if self.family == "prop5_bandit":
            return make_prop5_bandit(self.H)
        return make_random_comm(self.S, self.A, self.M, self.delta, self.seed, self.H)


def prop1_states(M: int) -> dict:
    """Index layout of the committed-arm instance: start, then (entry, good, bad) per arm."""
    return {"start": 0, "entry": [1 + 3 * i for i in range(M)],
            "good": [2 + 3 * i for i in range(M)], "bad": [3 + 3 * i for i in range(M)]}


def make_prop1(M: int, H: int) -> LatentMdp:
    """3M+1 states; action i at the start commits to arm i, whose chain pays only in member i."""
    if M < 2:
        raise ValidationError("prop1 needs M >= 2")
    S, A = 3 * M + 1, M
    lay = prop1_states(M)
    R = np.zeros((S, A))
    for g in lay["good"]:
        R[g, :] = 1.0
    members = []
    for star in range(M):
        P = np.zeros((S, A, S))
        for i in range(M):
            P[0, i, lay["entry"][i]] = 1.0
            p = 1.0 if i == star else 0.0
            P[lay["entry"][i], :, lay["good"][i]] = p
            P[lay["entry"][i], :, lay["bad"][i]] = 1.0 - p
            P[lay["good"][i], :, lay["good"][i]] = 1.0
            P[lay["bad"][i], :, lay["bad"][i]] = 1.0
        members.append(TabularMdp(P, R, H, 0))
    return LatentMdp(tuple(members))


def make_two_state(delta: float, eps: float, H: int = 1000, start_state: int = 0) -> TabularMdp:
    """State 1 pays 1 and leaks to 0 w.p. delta; from 0, action 0 climbs w.p. delta+eps, action 1 w.p. delta."""
    if not 0 <= eps <= delta <= 0.5 or delta <= 0:
        raise ValidationError(f"need 0 <= eps <= delta <= 1/2, got delta={delta} eps={eps}")
    P = np.zeros((2, 2, 2))
    P[0, 0] = [1.0 - delta - eps, delta + eps]
    P[0, 1] = [1.0 - delta, delta]
    P[1, :] = [delta, 1.0 - delta]
    R = np.array([[0.0, 0.0], [1.0, 1.0]])
    return TabularMdp(P, R, H, start_state)


def _tree_moves(k: int, A: int) -> np.ndarray:
    """(k, A) next zero-state for each movement action; column 0 is unused (gadget action)."""
    moves = np.tile(np.arange(k)[:, None], (1, A))
    if A == 2:
        moves[:, 1] = (np.arange(k) + 1) % k
        return moves
    b = A - 2
    for j in range(k):
        moves[j, 1] = (j - 1) // b if j > 0 else 0
        for c in range(1, b + 1):
            child = b * j + c
            if child < k:
                moves[j, 1 + c] = child
    return moves


def jao_tree_diameter_bound(S: int, A: int, delta: float) -> float:
    """Upper bound on the diameter of every member: leave a paying state, walk the core, climb."""
    k = S // 2
    moves = _tree_moves(k, A)
    # all-pairs hop distances on the movement graph
    dist = np.full((k, k), np.inf)
    for j in range(k):
        dist[j, j] = 0
        frontier = [j]
        while frontier:
            nxt = []
            for u in frontier:
                for v in moves[u, 1:]:
                    if dist[j, v] == np.inf:
                        dist[j, v] = dist[j, u] + 1
                        nxt.append(int(v))
            frontier = nxt
    return 2.0 / delta + float(dist.max())


def make_jao_tree(S: int, A: int, M: int, delta: float, eps: float, H: int = 1000) -> LatentMdp:
    """S//2 two-state gadgets whose zero-reward states form the movement core.

    State 2j is gadget j's zero state, 2j+1 its paying state. At a zero state
    action 0 is the gadget action (climb w.p. delta, else stay); actions 1..A-1
    move deterministically along the core (a ring when A == 2, otherwise parent
    plus A-2 children). Member i makes action 0 of gadget i the good action.
    """
    if A < 2:
        raise ValidationError("jao_tree needs A >= 2")
    if not 0 < eps <= delta < 0.5:
        raise ValidationError(f"need 0 < eps <= delta < 1/2, got delta={delta} eps={eps}")
    k = S // 2
    if k < 1 or M > k:
        raise ValidationError(f"slot overflow: {M} members but only {k} gadget slots for S={S}")
    n = 2 * k
    moves = _tree_moves(k, A)
    R = np.zeros((n, A))
    base = np.zeros((n, A, n))
    for j in range(k):
        z, o = 2 * j, 2 * j + 1
        R[o, :] = 1.0
        base[o, :, z] = delta
        base[o, :, o] = 1.0 - delta
        base[z, 0, o] = delta
        base[z, 0, z] = 1.0 - delta
        for a in range(1, A):
            base[z, a, 2 * moves[j, a]] = 1.0
    members = []
    for i in range(M):
        P = base.copy()
        z = 2 * i
        P[z, 0, z + 1] = delta + eps
        P[z, 0, z] = 1.0 - delta - eps
        members.append(TabularMdp(P, R, H, 0))
    return LatentMdp(tuple(members))


def prop5_means(H: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean payoff of each action in each of the 4H+5 members."""
    M = 4 * H + 5
    p = 0.25 + 0.25 * np.arange(1, M) / M  # strictly inside (1/4, 1/2)
    arm1 = np.full(M, 0.5)
    arm2 = np.append(0.5 - p, 1.0)
    return arm1, arm2


def make_prop5_bandit(H: int) -> LatentMdp:
    """Two-armed Bernoulli bandit with 4H+5 hypotheses, outcome carried in the state.

    State 1 means the last pull paid; it carries reward 1 on the next step.
    Arm 0 pays w.p. 1/2 everywhere; arm 1 pays w.p. 1/2 - p_i, except in the
    last member where it always pays.
    """
    arm1, arm2 = prop5_means(H)
    R = np.array([[0.0, 0.0], [1.0, 1.0]])
    members = []
    for m1, m2 in zip(arm1, arm2):
        P = np.empty((2, 2, 2))
        P[:, 0] = [1.0 - m1, m1]
        P[:, 1] = [1.0 - m2, m2]
        members.append(TabularMdp(P, R, H, 0))
    return LatentMdp(tuple(members))


def _random_draw(rng, S, A, M, delta, H) -> LatentMdp:
    base = 0.05 / S + 0.95 * rng.dirichlet(np.ones(S), size=(S, A))
    R = rng.random((S, A))
    rows = S * A
    picks = rng.choice(rows, size=M, replace=M > rows)
    members = []
    for r in picks.tolist():
        s, a = divmod(r, A)
        row = base[s, a]
        eligible = np.flatnonzero(row <= 1.0 - delta / 2.0)
        u = int(rng.choice(eligible))
        t = min(1.0, delta / (2.0 * (1.0 - row[u])))
        P = base.copy()
        P[s, a] = (1.0 - t) * row
        P[s, a, u] += t
        P[s, a] /= P[s, a].sum()
        members.append(TabularMdp(P, R, H, 0))
    return LatentMdp(tuple(members))


def make_random_comm(S: int, A: int, M: int, delta: float, seed: int, H: int = 1000) -> LatentMdp:
    """Random class sharing a base kernel; each member shifts one row by total variation delta/2.

    Every base entry carries at least 0.05/S mass, so members are communicating.
    Draws are retried until every member has finite diameter and the class
    separation is at least 0.9 * delta.
    """
    from .policies import separation_delta

    if min(S, A, M) < 1:
        raise ValidationError("S, A, M must be >= 1")
    rng = np.random.default_rng(seed)
    for _ in range(100):
        lm = _random_draw(rng, S, A, M, delta, H)
        if any(math.isinf(diameter(m)) for m in lm.mdps):
            continue
        if M >= 2 and separation_delta(lm.mdps) < 0.9 * delta:
            continue
        return lm
    raise ValidationError(f"could not draw a verified class (S={S}, A={A}, M={M}, delta={delta}) in 100 tries")
