"""History-dependent base policies that identify the real MDP inside a known class.

* SeparatedElimination: pairwise likelihood-ratio elimination on the most
  informative state-action pair, then the survivor's average-reward policy.
* OptimisticElimination: follow the max-gain survivor, drop it once the bias
  martingale drifts past an Azuma threshold.
* GeneralOptimistic: confidence sets over the class refit only when the
  importance score of fresh data reaches 1 (low switching).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .lmdp import HistoryPolicy
from .mdp_core import AvgSolution, TabularMdp, ValidationError, relative_value_iteration, travel_policies

GAIN_TIE_TOL = 1e-9


class InformativePair(NamedTuple):
    state: int
    action: int
    distance: float


def row_distances(m1: TabularMdp, m2: TabularMdp) -> np.ndarray:
    """(S, A) table of L1 distances between next-state distributions."""
    if m1.transitions.shape != m2.transitions.shape:
        raise ValidationError("MDPs do not share state and action spaces")
    return np.abs(m1.transitions - m2.transitions).sum(axis=2)


def most_informative_pair(m1: TabularMdp, m2: TabularMdp) -> InformativePair:
    d = row_distances(m1, m2)
    # np.argmax on the flattened (s, a) table picks the lexicographically lowest maximiser
    s, a = divmod(int(np.argmax(d)), d.shape[1])
    return InformativePair(s, a, float(d[s, a]))


def separation_delta(mdps: Sequence[TabularMdp]) -> float:
    if len(mdps) < 2:
        raise ValueError("separation needs at least two members")
    return min(
        float(row_distances(mdps[i], mdps[j]).max())
        for i in range(len(mdps))
        for j in range(i + 1, len(mdps))
    )


def _argmax_gain(gains: np.ndarray, members) -> int:
    members = sorted(members)
    best = max(gains[m] for m in members)
    return next(m for m in members if gains[m] >= best - GAIN_TIE_TOL)


@dataclass(eq=False)
class ClassInfo:
    """Per-member planning data shared by every policy built on one class."""

    mdps: tuple[TabularMdp, ...]
    solutions: list[AvgSolution]
    _travel: list[np.ndarray] | None = field(default=None, repr=False)

    @classmethod
    def build(cls, mdps: Sequence[TabularMdp]) -> "ClassInfo":
        return cls(tuple(mdps), [relative_value_iteration(m) for m in mdps])

    @property
    def M(self) -> int:
        return len(self.mdps)

    @property
    def horizon(self) -> int:
        return self.mdps[0].horizon

    @property
    def gains(self) -> np.ndarray:
        return np.array([sol.gain for sol in self.solutions])

    @property
    def biases(self) -> np.ndarray:
        return np.stack([sol.bias for sol in self.solutions])

    @property
    def diameter(self) -> float:
        """Class-wide diameter bound: the largest member diameter."""
        return max(sol.diameter for sol in self.solutions)

    @property
    def travel(self) -> list[np.ndarray]:
        if self._travel is None:
            self._travel = [travel_policies(m) for m in self.mdps]
        return self._travel


def _class_info(cls_or_mdps) -> ClassInfo:
    return cls_or_mdps if isinstance(cls_or_mdps, ClassInfo) else ClassInfo.build(cls_or_mdps)


class _Traced(HistoryPolicy):
    def _log(self, **record) -> None:
        if self.trace is not None:
            self.trace.append(record)


# ---------------------------------------------------------------------------
# Separated classes


@dataclass
class SeparatedEliminationConfig:
    info: ClassInfo
    c0: float = 1.0
    n0: int | None = None  # overrides the c0 formula when set

    def __post_init__(self):
        if self.c0 <= 0:
            raise ValidationError("c0 must be positive")
        if self.info.M >= 2 and self.delta <= 0:
            raise ValidationError("class is not separated (delta = 0)")

    @property
    def delta(self) -> float:
        return separation_delta(self.info.mdps) if self.info.M >= 2 else 0.0

    def sample_count(self) -> int:
        if self.n0 is not None:
            return int(self.n0)
        S = self.info.mdps[0].num_states
        M, H = self.info.M, self.info.horizon
        n0 = self.c0 * math.log(S * M * H) ** 2 * math.log(M * H) / self.delta**4
        return max(1, math.ceil(n0))

    def travel_steps(self) -> int:
        return max(1, math.ceil(2.0 * self.info.diameter))


class SeparatedElimination(_Traced):
    def __init__(self, cfg: SeparatedEliminationConfig, seed=0):
        super().__init__(seed)
        self.cfg = cfg
        info = cfg.info
        self._kernels = [m.transitions for m in info.mdps]
        self._stationary = [sol.policy.tolist() for sol in info.solutions]
        self._travel = [t.tolist() for t in info.travel] if info.M > 1 else []
        self._pairs = {}
        self.n0 = cfg.sample_count() if info.M > 1 else 0
        self.travel_steps = cfg.travel_steps() if info.M > 1 else 0
        self.reset()

    def reset(self, seed=None) -> None:
        super().reset(seed)
        self.survivors = list(range(self.cfg.info.M))
        self.eliminations = 0
        self.stage1_steps = 0
        self._step = 0
        self._program_gen = self._program()
        next(self._program_gen)

    def act(self, state: int) -> int:
        self._step += 1
        return self._program_gen.send(state)

    def diagnostics(self) -> dict:
        return {"eliminations": self.eliminations, "switches": self.eliminations,
                "survivors": list(self.survivors), "stage1_steps": self.stage1_steps}

    def _pair(self, i: int, j: int) -> InformativePair:
        if (i, j) not in self._pairs:
            self._pairs[i, j] = most_informative_pair(self.cfg.info.mdps[i], self.cfg.info.mdps[j])
        return self._pairs[i, j]

    def _program(self):
        s = yield
        alive = self.survivors
        while len(alive) > 1:
            i1, i2 = (int(x) for x in self._rng.choice(alive, size=2, replace=False))
            s0, a0, _ = self._pair(i1, i2)
            samples: list[int] = []
            while len(samples) < self.n0:
                # round-robin over the survivors' fastest routes to s0
                for i in list(alive):
                    if s == s0:
                        break
                    route = self._travel[i][s0]
                    for _ in range(self.travel_steps):
                        self._log(step=self._step, phase="travel", surviving_count=len(alive),
                                  chosen_member=i, statistic=None, threshold=None, switched=False)
                        self.stage1_steps += 1
                        s = yield route[s]
                        if s == s0:
                            break
                if s == s0:
                    self._log(step=self._step, phase="sample", surviving_count=len(alive),
                              chosen_member=i1, statistic=len(samples), threshold=self.n0,
                              switched=False)
                    self.stage1_steps += 1
                    s = yield a0
                    samples.append(s)
            loser = i2 if self._first_more_likely(i1, i2, s0, a0, samples) else i1
            alive.remove(loser)
            self.eliminations += 1
            if self.trace is not None:
                self.trace[-1]["switched"] = True
        survivor = alive[0]
        policy = self._stationary[survivor]
        while True:
            self._log(step=self._step, phase="exploit", surviving_count=1, chosen_member=survivor,
                      statistic=None, threshold=None, switched=False)
            s = yield policy[s]

    def _first_more_likely(self, i1, i2, s0, a0, samples) -> bool:
        p1 = self._kernels[i1][s0, a0, samples]
        p2 = self._kernels[i2][s0, a0, samples]
        if (p2 == 0.0).any():
            return True
        if (p1 == 0.0).any():
            return False
        return float(np.sum(np.log(p1) - np.log(p2))) >= 0.0


def make_separated_elimination(cfg: SeparatedEliminationConfig, seed=0) -> SeparatedElimination:
    return SeparatedElimination(cfg, seed)


# ---------------------------------------------------------------------------
# Finite classes without separation


def elimination_threshold(D: float, window: int, H: int, M: int) -> float:
    """Azuma radius for ``window`` bias-martingale increments, each bounded by D."""
    return D * math.sqrt(2.0 * window * math.log(2.0 * H * M))


def deviation_statistic(avg: AvgSolution, records, kernel: np.ndarray) -> float:
    """Signed sum of P lambda(s, a) - lambda(s') over (s, a, s') records."""
    bias = avg.bias
    p_bias = kernel @ bias
    return float(sum(p_bias[s, a] - bias[s2] for s, a, s2 in records))


class OptimisticElimination(_Traced):
    def __init__(self, info: ClassInfo, seed=0):
        super().__init__(seed)
        self.info = info
        self.D = info.diameter
        if not math.isfinite(self.D):
            raise ValidationError("optimistic elimination needs every member communicating")
        self._gains = info.gains
        self._bias = [sol.bias.tolist() for sol in info.solutions]
        self._p_bias = [(m.transitions @ sol.bias).tolist() for m, sol in zip(info.mdps, info.solutions)]
        self._policy = [sol.policy.tolist() for sol in info.solutions]
        self._log_term = math.log(2.0 * info.horizon * info.M)
        self.reset()

    def reset(self, seed=None) -> None:
        super().reset(seed)
        self.survivors = list(range(self.info.M))
        self.current = _argmax_gain(self._gains, self.survivors)
        self.statistic = 0.0
        self.window = 0
        self.eliminations = 0
        self.exhausted = False
        self._last = None
        self._step = 0
        self.history: list[int] = []

    def act(self, state: int) -> int:
        a = self._policy[self.current][state]
        self._last = (state, a)
        self._step += 1
        self.history.append(self.current)
        return a

    def observe(self, state: int, reward: float | None) -> None:
        if self._last is None:
            return
        s, a = self._last
        k = self.current
        self.statistic += self._p_bias[k][s][a] - self._bias[k][state]
        self.window += 1
        threshold = self.D * math.sqrt(2.0 * self.window * self._log_term)
        switched = abs(self.statistic) > threshold
        self._log(step=self._step, phase="optimistic", surviving_count=len(self.survivors),
                  chosen_member=k, statistic=self.statistic, threshold=threshold, switched=switched)
        if switched:
            self.eliminations += 1
            if len(self.survivors) == 1:
                self.exhausted = True  # keep playing the last survivor
            else:
                self.survivors.remove(k)
                self.current = _argmax_gain(self._gains, self.survivors)
            self.statistic = 0.0
            self.window = 0

    def diagnostics(self) -> dict:
        return {"eliminations": self.eliminations, "switches": self.eliminations,
                "survivors": list(self.survivors), "exhausted": self.exhausted}


def make_optimistic_elimination(cls, seed=0) -> OptimisticElimination:
    return OptimisticElimination(_class_info(cls), seed)


# ---------------------------------------------------------------------------
# General function class, low switching


def importance_score(fresh: np.ndarray, seen: np.ndarray, alpha: float) -> float:
    """max over function pairs of ||f1 - f2||^2 on fresh data / (same on old data + alpha)."""
    if fresh.size == 0:
        return 0.0
    return float(np.max(fresh / (seen + alpha)))


class GeneralOptimistic(_Traced):
    def __init__(self, info: ClassInfo, c: float = 1.0, cover: float | None = None, seed=0):
        super().__init__(seed)
        if c <= 0:
            raise ValidationError("c must be positive")
        self.info = info
        M, H = info.M, info.horizon
        self.D = info.diameter
        if not math.isfinite(self.D):
            raise ValidationError("general optimistic needs every member communicating")
        self.alpha = 4.0 * self.D**2 + 1.0
        self.cover = float(M * M) if cover is None else float(cover)
        self.beta = c * self.D**2 * math.log(H * self.cover)
        biases = info.biases  # (L, S) with L = M
        kernels = np.stack([m.transitions for m in info.mdps])
        # f[m, l, s, a] = P_m lambda_l (s, a)
        self._f = np.einsum("msan,ln->mlsa", kernels, biases)
        self._pi, self._pj = np.triu_indices(M, k=1)
        diff = self._f[self._pi] - self._f[self._pj]  # (pairs, L, S, A)
        self._diffsq = np.ascontiguousarray(np.moveaxis(diff**2, 0, -1))  # (L, S, A, pairs)
        self._fvec = np.ascontiguousarray(np.moveaxis(self._f, 0, -1))  # (L, S, A, M)
        self._bias = biases
        self._gains = info.gains
        self._policy = [sol.policy.tolist() for sol in info.solutions]
        self.reset()

    def reset(self, seed=None) -> None:
        super().reset(seed)
        M = self.info.M
        npairs = self._pi.size
        self.confidence_set = list(range(M))
        self.current = _argmax_gain(self._gains, self.confidence_set)
        self.switches = 0
        self.empty_set = False
        self._seen = np.zeros(npairs)
        self._fresh = np.zeros(npairs)
        self._loss = np.zeros(M)
        self._fresh_loss = np.zeros(M)
        self._fresh_count = 0
        self._last = None
        self._step = 0
        self.history: list[int] = []

    def act(self, state: int) -> int:
        a = self._policy[self.current][state]
        self._last = (state, a)
        self._step += 1
        self.history.append(self.current)
        return a

    def observe(self, state: int, reward: float | None) -> None:
        if self._last is None:
            return
        s, a = self._last
        lam = self.current
        self._fresh += self._diffsq[lam, s, a]
        err = self._fvec[lam, s, a] - self._bias[lam, state]
        self._fresh_loss += err * err
        self._fresh_count += 1
        score = importance_score(self._fresh, self._seen, self.alpha)
        switched = score >= 1.0
        self._log(step=self._step, phase="optimistic", surviving_count=len(self.confidence_set),
                  chosen_member=self.current, statistic=score, threshold=1.0, switched=switched)
        if switched:
            self._refit()

    def _refit(self) -> None:
        M = self.info.M
        self._seen += self._fresh
        self._loss += self._fresh_loss
        self._fresh[:] = 0.0
        self._fresh_loss[:] = 0.0
        self._fresh_count = 0
        best = float(self._loss.min())
        m_hat = int(np.argmax(self._loss <= best + 1e-12 * max(1.0, best)))
        dist = np.zeros((M, M))
        dist[self._pi, self._pj] = self._seen
        dist[self._pj, self._pi] = self._seen
        members = [m for m in range(M) if dist[m, m_hat] <= self.beta]
        if not members:
            self.empty_set = True
            members = [m_hat]
        self.confidence_set = members
        self.m_hat = m_hat
        self.current = _argmax_gain(self._gains, members)
        self.switches += 1

    def diagnostics(self) -> dict:
        return {"eliminations": self.info.M - len(self.confidence_set), "switches": self.switches,
                "survivors": list(self.confidence_set), "empty_set": self.empty_set}


def make_general_optimistic(cls, c: float = 1.0, seed=0) -> GeneralOptimistic:
    return GeneralOptimistic(_class_info(cls), c=c, seed=seed)
