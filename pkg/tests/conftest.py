import numpy as np
import pytest
from hypothesis import settings

from lmdp_lab.lmdp import LatentMdp
from lmdp_lab.mdp_core import TabularMdp

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def random_mdp(rng: np.random.Generator, S: int, A: int, H: int, floor: float = 0.0) -> TabularMdp:
    """Dense random MDP; ``floor`` mixes in a uniform kernel to make it communicating."""
    P = rng.dirichlet(np.ones(S), size=(S, A))
    P = floor / S + (1.0 - floor) * P
    P /= P.sum(axis=2, keepdims=True)
    return TabularMdp(P, rng.random((S, A)), H, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def history_policy_values(lm: LatentMdp) -> set:
    """Per-member value vectors of every deterministic history policy.

    Literal enumeration: each history chooses an action and every successor
    history chooses its own sub-policy independently. Identical value vectors
    are merged, which keeps the set small without dropping any policy's value.
    """
    P, R, H, M = lm.kernels, lm.rewards, lm.horizon, len(lm)

    def rec(s: int, reach: np.ndarray, steps: int) -> set:
        if steps == 0:
            return {tuple([0.0] * M)}
        out = set()
        for a in range(lm.num_actions):
            succ = [s2 for s2 in range(lm.num_states) if np.any(reach * P[:, s, a, s2] > 0)]
            combos = [np.full(M, R[s, a])]
            for s2 in succ:
                p = P[:, s, a, s2]
                subs = rec(s2, reach * (p > 0), steps - 1)
                combos = [c + p * np.array(v) for c in combos for v in subs]
            out |= {tuple(np.round(c, 12)) for c in combos}
        return out

    return rec(lm.start_state, np.ones(M), H)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(':'))):
            terminalreporter.write_line(line)
