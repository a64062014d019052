"""Exact distributional Bellman iteration on small finite MDPs.

Return laws are finitely supported, so the pushforward ``R + gamma * Z(S', A')``
can be enumerated atom by atom. Everything here is brute force and meant as
ground truth for tests of the learned estimators.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError, ResourceError

MERGE_ATOL = 1e-12
DEFAULT_ATOM_CAP = 10**6


@dataclass(frozen=True)
class DiscreteReturnLaw:
    atoms: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_pairs(cls, atoms, probs) -> "DiscreteReturnLaw":
        """Sort, merge atoms closer than ``MERGE_ATOL`` and validate."""
        atoms = np.asarray(atoms, dtype=float).reshape(-1)
        probs = np.asarray(probs, dtype=float).reshape(-1)
        if atoms.shape != probs.shape or atoms.size == 0:
            raise InputError("atoms and probs must be non-empty and equally long")
        if np.any(probs < 0):
            raise InputError("negative probability")
        if abs(probs.sum() - 1.0) > 1e-10:
            raise InputError(f"probabilities sum to {probs.sum()!r}")
        order = np.argsort(atoms, kind="stable")
        atoms, probs = atoms[order], probs[order]
        # start a new group wherever the gap to the previous atom exceeds the tolerance
        starts = np.concatenate(([True], np.diff(atoms) > MERGE_ATOL))
        group = np.cumsum(starts) - 1
        merged_p = np.bincount(group, weights=probs)
        merged_a = atoms[starts]
        keep = merged_p > 0
        if not keep.any():
            keep[:] = True
        return cls(merged_a[keep], merged_p[keep])

    @classmethod
    def dirac(cls, x: float) -> "DiscreteReturnLaw":
        return cls(np.array([float(x)]), np.array([1.0]))

    @property
    def mean(self) -> float:
        return float(self.atoms @ self.probs)

    def quantile_steps(self) -> Tuple[np.ndarray, np.ndarray]:
        """Breakpoints ``c_0=0 < c_1 < ... = 1`` and the atom taken on each step."""
        cum = np.concatenate(([0.0], np.cumsum(self.probs)))
        cum[-1] = 1.0
        return cum, self.atoms


def wasserstein_p(law1: DiscreteReturnLaw, law2: DiscreteReturnLaw, p: float) -> float:
    """Exact ``W_p`` from the merged quantile step functions of two discrete laws."""
    c1, a1 = law1.quantile_steps()
    c2, a2 = law2.quantile_steps()
    grid = np.union1d(c1, c2)
    widths = np.diff(grid)
    mids = grid[:-1] + widths / 2
    q1 = a1[np.clip(np.searchsorted(c1, mids, side="right") - 1, 0, len(a1) - 1)]
    q2 = a2[np.clip(np.searchsorted(c2, mids, side="right") - 1, 0, len(a2) - 1)]
    return float((widths @ np.abs(q1 - q2) ** p) ** (1.0 / p))


@dataclass
class TabularMdp:
    """Finite MDP with finite-support rewards and a fixed target policy.

    ``reward[s][a]`` is a list of ``(atom, probability)`` pairs. ``initial`` is
    the start-state distribution (uniform when omitted) and ``terminal_states``
    are absorbing states that end an episode when simulated; the Bellman
    operator itself treats them like any other state.
    """

    transition: np.ndarray
    reward: List[List[List[Tuple[float, float]]]]
    gamma: float
    target_policy: np.ndarray
    initial: Optional[np.ndarray] = None
    terminal_states: Tuple[int, ...] = ()

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.target_policy = np.asarray(self.target_policy, dtype=float)
        S, A = self.n_states, self.n_actions
        if self.transition.shape != (S, A, S):
            raise InputError(f"transition table has shape {self.transition.shape}")
        if not np.allclose(self.transition.sum(axis=2), 1.0, rtol=0, atol=1e-12):
            raise InputError("transition rows must sum to 1")
        if np.any(self.transition < 0):
            raise InputError("negative transition probability")
        if self.target_policy.shape != (S, A):
            raise InputError("target policy table must be (n_states, n_actions)")
        if not np.allclose(self.target_policy.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise InputError("policy rows must sum to 1")
        if not 0.0 <= self.gamma < 1.0:
            raise InputError("gamma must lie in [0, 1)")
        for s in range(S):
            for a in range(A):
                probs = [pr for _, pr in self.reward[s][a]]
                if abs(sum(probs) - 1.0) > 1e-12 or min(probs) < 0:
                    raise InputError(f"reward law at ({s}, {a}) is not a distribution")
        if self.initial is None:
            self.initial = np.full(S, 1.0 / S)
        self.initial = np.asarray(self.initial, dtype=float)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def reward_law(self, s: int, a: int) -> DiscreteReturnLaw:
        atoms, probs = zip(*self.reward[s][a])
        return DiscreteReturnLaw.from_pairs(atoms, probs)

    def mean_reward(self) -> np.ndarray:
        return np.array([[sum(x * p for x, p in self.reward[s][a]) for a in range(self.n_actions)]
                         for s in range(self.n_states)])

    def state_action_kernel(self, policy: Optional[np.ndarray] = None) -> np.ndarray:
        """``K[(s,a), (s',a')] = P(s'|s,a) * pi(a'|s')`` flattened to (SA, SA)."""
        pi = self.target_policy if policy is None else policy
        S, A = self.n_states, self.n_actions
        return (self.transition[:, :, :, None] * pi[None, None, :, :]).reshape(S * A, S * A)

    def q_values(self, policy: Optional[np.ndarray] = None) -> np.ndarray:
        """Exact ``Q^pi`` by solving the linear Bellman equation."""
        K = self.state_action_kernel(policy)
        r = self.mean_reward().reshape(-1)
        q = np.linalg.solve(np.eye(len(r)) - self.gamma * K, r)
        return q.reshape(self.n_states, self.n_actions)

    def occupancy(self, policy: Optional[np.ndarray] = None, tol: float = 1e-12) -> np.ndarray:
        """Discounted occupancy ``d^pi(s, a)`` by truncated power series, renormalised."""
        pi = self.target_policy if policy is None else policy
        K = self.state_action_kernel(pi)
        start = (self.initial[:, None] * pi).reshape(-1)
        if self.gamma == 0.0:
            return start.reshape(self.n_states, self.n_actions)
        horizon = math.ceil(math.log(tol) / math.log(self.gamma))
        term = start.copy()
        total = term.copy()
        for t in range(1, horizon + 1):
            term = self.gamma * (term @ K)
            total += term
        total /= total.sum()
        return total.reshape(self.n_states, self.n_actions)


ReturnLawTable = Dict[Tuple[int, int], DiscreteReturnLaw]


def dirac_table(mdp: TabularMdp, value: float = 0.0) -> ReturnLawTable:
    return {(s, a): DiscreteReturnLaw.dirac(value)
            for s in range(mdp.n_states) for a in range(mdp.n_actions)}


def apply_bellman(mdp: TabularMdp, eta: ReturnLawTable, atom_cap: int = DEFAULT_ATOM_CAP) -> ReturnLawTable:
    """One exact application of the distributional Bellman operator."""
    S, A, g = mdp.n_states, mdp.n_actions, mdp.gamma
    missing = [(s, a) for s in range(S) for a in range(A) if (s, a) not in eta]
    if missing:
        raise InputError(f"eta undefined at {missing[0]}")
    # next-state return law mixed over (s', a') does not depend on the reward, build once per (s, a)
    out = {}
    for s in range(S):
        for a in range(A):
            next_atoms, next_probs = [], []
            for s2 in range(S):
                ps = mdp.transition[s, a, s2]
                if ps == 0.0:
                    continue
                for a2 in range(A):
                    pa = mdp.target_policy[s2, a2]
                    if pa == 0.0:
                        continue
                    law = eta[(s2, a2)]
                    next_atoms.append(law.atoms)
                    next_probs.append(ps * pa * law.probs)
            z = np.concatenate(next_atoms)
            pz = np.concatenate(next_probs)
            r_atoms = np.array([x for x, _ in mdp.reward[s][a]], dtype=float)
            r_probs = np.array([p for _, p in mdp.reward[s][a]], dtype=float)
            size = r_atoms.size * z.size
            if size > atom_cap:
                raise ResourceError(f"{size} atoms at {(s, a)} exceeds cap {atom_cap}")
            atoms = (r_atoms[:, None] + g * z[None, :]).reshape(-1)
            probs = (r_probs[:, None] * pz[None, :]).reshape(-1)
            probs = probs / probs.sum()
            out[(s, a)] = DiscreteReturnLaw.from_pairs(atoms, probs)
    return out


@dataclass
class FixedPointResult:
    eta: ReturnLawTable
    iterations: int
    converged: bool
    gaps: List[float] = field(default_factory=list)


def fixed_point(mdp: TabularMdp, tol: float, max_iter: int = 1000,
                eta0: Optional[ReturnLawTable] = None,
                atom_cap: int = DEFAULT_ATOM_CAP) -> FixedPointResult:
    """Iterate :func:`apply_bellman` until the largest per-(s, a) ``W_1`` step is below ``tol``."""
    if tol <= 0:
        raise InputError("tol must be positive")
    eta = dirac_table(mdp) if eta0 is None else eta0
    gaps = []
    for it in range(1, max_iter + 1):
        new = apply_bellman(mdp, eta, atom_cap)
        gap = max(wasserstein_p(new[k], eta[k], 1) for k in new)
        gaps.append(gap)
        eta = new
        # with gamma = 0 the operator ignores its input, so one application is exact
        if gap < tol or mdp.gamma == 0.0:
            return FixedPointResult(eta, it, True, gaps)
    return FixedPointResult(eta, max_iter, False, gaps)


def wbar_p(mdp: TabularMdp, nu, eta1: ReturnLawTable, eta2: ReturnLawTable, p: int) -> float:
    """``(sum_{s,a} nu(s,a) * W_p(eta1, eta2)^(2p))^(1/(2p))``."""
    nu = np.asarray(nu, dtype=float).reshape(mdp.n_states, mdp.n_actions)
    if abs(nu.sum() - 1.0) > 1e-9:
        raise InputError("nu must sum to 1")
    if p < 1:
        raise InputError("p must be >= 1")
    total = 0.0
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            if nu[s, a] > 0:
                total += nu[s, a] * wasserstein_p(eta1[(s, a)], eta2[(s, a)], p) ** (2 * p)
    return total ** (1.0 / (2 * p))


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int, gamma: float,
               reward_atoms: int = 2) -> TabularMdp:
    """Random MDP with Dirichlet rows and small discrete reward laws."""
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    pi = rng.dirichlet(np.ones(n_actions), size=n_states)
    reward = [[list(zip(rng.normal(size=reward_atoms).tolist(),
                        rng.dirichlet(np.ones(reward_atoms)).tolist()))
               for _ in range(n_actions)] for _ in range(n_states)]
    # dirichlet rows can miss 1 by an ulp; renormalise to keep the invariants tight
    P /= P.sum(axis=2, keepdims=True)
    pi /= pi.sum(axis=1, keepdims=True)
    reward = [[_renorm(law) for law in row] for row in reward]
    return TabularMdp(P, reward, gamma, pi, initial=rng.dirichlet(np.ones(n_states)))


def _renorm(law: Sequence[Tuple[float, float]]):
    tot = sum(p for _, p in law)
    return [(x, p / tot) for x, p in law]


def random_law_table(rng: np.random.Generator, mdp: TabularMdp, max_atoms: int = 3) -> ReturnLawTable:
    table = {}
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            k = int(rng.integers(1, max_atoms + 1))
            table[(s, a)] = DiscreteReturnLaw.from_pairs(rng.normal(scale=3.0, size=k),
                                                         rng.dirichlet(np.ones(k)))
    return table
