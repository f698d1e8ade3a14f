"""Complexity measures of the model class through f_M(s, a, lam) = P_M lam(s, a).

Eluder dimension and covering number are estimated on the finite table of
values; slopes of gap-vs-horizon curves are fitted in log-log space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .mdp_core import TabularMdp, ValidationError, diameter, relative_value_iteration

EXHAUSTIVE_LIMIT = 12


@dataclass(frozen=True, eq=False)
class FunctionClassF:
    """Value table of a finite function class over an enumerated domain.

    ``table[m, x]`` is member m's value at domain point x. For classes built
    from MDPs, x enumerates (s, a, l) lexicographically with l indexing the
    bias set.
    """

    table: np.ndarray
    domain: tuple = ()
    bound: float = np.inf

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        if t.ndim != 2 or t.shape[0] < 1:
            raise ValidationError(f"table must be (|F|, |X|), got shape {t.shape}")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)
        if not self.domain:
            object.__setattr__(self, "domain", tuple(range(t.shape[1])))
        if len(self.domain) != t.shape[1]:
            raise ValidationError("domain labels do not match table width")

    @property
    def size(self) -> int:
        return self.table.shape[0]

    @property
    def num_points(self) -> int:
        return self.table.shape[1]

    def pair_differences(self) -> np.ndarray:
        """(pairs, |X|) absolute differences over unordered member pairs."""
        if self.size < 2:
            return np.zeros((0, self.num_points))
        i, j = np.triu_indices(self.size, k=1)
        return np.abs(self.table[i] - self.table[j])


def build_function_class(mdps: Sequence[TabularMdp], biases: Sequence[np.ndarray] | None = None) -> FunctionClassF:
    """Tabulate P_M lam over S x A x {optimal biases of the members}."""
    if biases is None:
        biases = [relative_value_iteration(m, with_diameter=False).bias for m in mdps]
    lam = np.asarray(biases, dtype=float)  # (L, S)
    kernels = np.stack([m.transitions for m in mdps])  # (M, S, A, S)
    values = np.einsum("msan,ln->msal", kernels, lam)
    M, S, A, L = values.shape
    domain = tuple((s, a, l) for s in range(S) for a in range(A) for l in range(L))
    bound = max(diameter(m) for m in mdps)
    return FunctionClassF(values.reshape(M, -1), domain, bound)


def _greedy_run(diffs: np.ndarray, level: float) -> int:
    """Greedy sequence length where a point joins when some pair has
    ||diff||_Z < level and |diff(x)| >= level (the limit eps' -> level from below)."""
    sq = np.zeros(diffs.shape[0])
    count = 0
    for x in range(diffs.shape[1]):
        d = diffs[:, x]
        if np.any((np.sqrt(sq) < level) & (d >= level)):
            sq += d * d
            count += 1
    return count


def _levels(diffs: np.ndarray, eps: float) -> np.ndarray:
    vals = np.unique(diffs)
    return vals[vals > eps]


def eluder_dimension_greedy(f: FunctionClassF, eps: float) -> int:
    """Greedy lower bound on the eps-eluder dimension.

    A point is eps'-independent of Z when some pair f, f' has
    ||f - f'||_Z <= eps' yet |f(x) - f'(x)| > eps'; with Z empty the norm is 0.
    The definition allows any eps' >= eps, and the greedy count only changes
    when eps' crosses a pointwise spread, so each spread v > eps is tried as
    the limit eps' -> v from below. Points are scanned once in domain order:
    dependence only grows with Z, so a rejected point never becomes eligible.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    diffs = f.pair_differences()
    best = 0
    for level in _levels(diffs, eps):
        best = max(best, _greedy_run(diffs, float(level)))
    return best


def eluder_dimension_exhaustive(f: FunctionClassF, eps: float) -> int:
    """Exact eps-eluder dimension by subset dynamic programming (|X| <= 12)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    n = f.num_points
    if n > EXHAUSTIVE_LIMIT:
        raise ValueError(f"exhaustive search is limited to {EXHAUSTIVE_LIMIT} domain points, got {n}")
    diffs = f.pair_differences()
    sq = diffs * diffs
    best = 0
    for level in _levels(diffs, eps):
        reachable = {0: np.zeros(diffs.shape[0])}
        frontier = [0]
        while frontier:
            nxt = []
            for mask in frontier:
                acc = reachable[mask]
                ok = np.sqrt(acc) < level
                for x in range(n):
                    bit = 1 << x
                    if mask & bit or (mask | bit) in reachable:
                        continue
                    if np.any(ok & (diffs[:, x] >= level)):
                        reachable[mask | bit] = acc + sq[:, x]
                        nxt.append(mask | bit)
            frontier = nxt
        best = max(best, max(bin(m).count("1") for m in reachable))
    return best


def covering_number_greedy(f: FunctionClassF, alpha: float) -> int:
    """Greedy sup-norm cover of the class with centers drawn from the class.

    Ball membership only changes at pairwise distances, so the result is the
    smallest greedy cover over radii <= alpha, which keeps it monotone in alpha.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    t = f.table
    dist = np.abs(t[:, None, :] - t[None, :, :]).max(axis=2) if f.num_points else np.zeros((f.size, f.size))
    radii = np.unique(dist[dist <= alpha])
    return min(_greedy_cover(dist <= r) for r in radii)


def _greedy_cover(within: np.ndarray) -> int:
    uncovered = np.ones(within.shape[0], dtype=bool)
    count = 0
    while uncovered.any():
        gains = (within & uncovered[None, :]).sum(axis=1)
        center = int(np.argmax(gains))
        uncovered &= ~within[center]
        count += 1
    return count


class SlopeFit(NamedTuple):
    slope: float
    stderr: float
    intercept: float


def fit_loglog_slope(points: Sequence[tuple[float, float]]) -> SlopeFit:
    """Ordinary least squares of log(gap) on log(H)."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise ValueError("need at least three (H, gap) points")
    if np.any(pts <= 0) or not np.all(np.isfinite(pts)):
        raise ValueError(f"log-log fit needs positive finite values, got {pts.tolist()}")
    x, y = np.log(pts[:, 0]), np.log(pts[:, 1])
    X = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    n = len(x)
    sxx = float(((x - x.mean()) ** 2).sum())
    stderr = float(np.sqrt((resid @ resid) / (n - 2) / sxx)) if n > 2 and sxx > 0 else float("nan")
    return SlopeFit(float(coef[0]), stderr, float(coef[1]))


__all__ = [
    "FunctionClassF", "build_function_class", "eluder_dimension_greedy", "eluder_dimension_exhaustive",
    "covering_number_greedy", "fit_loglog_slope", "SlopeFit", "EXHAUSTIVE_LIMIT",
]
