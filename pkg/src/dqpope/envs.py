"""Environments, policies, offline data collection and Monte-Carlo ground truth.

Environments are immutable and vectorised: ``reset`` and ``step`` work on a
batch of states so rollouts and occupancy sampling run as numpy loops over
time rather than over episodes.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigError, InputError
from .tabular import TabularMdp

REWARD_CLIP = 1e6


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass(frozen=True)
class TransitionArrays:
    """Column view of a dataset, the form every estimator trains on."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self):
        return len(self.actions)

    def subset(self, idx) -> "TransitionArrays":
        return TransitionArrays(self.states[idx], self.actions[idx], self.rewards[idx],
                                self.next_states[idx], self.terminals[idx])


def as_arrays(data) -> TransitionArrays:
    if isinstance(data, TransitionArrays):
        return data
    data = list(data)
    if not data:
        raise InputError("empty dataset")
    return TransitionArrays(
        np.array([t.state for t in data], dtype=float),
        np.array([t.action for t in data], dtype=int),
        np.array([t.reward for t in data], dtype=float),
        np.array([t.next_state for t in data], dtype=float),
        np.array([t.terminal for t in data], dtype=bool),
    )


def to_transitions(arrs: TransitionArrays) -> List[Transition]:
    return [Transition(arrs.states[i].copy(), int(arrs.actions[i]), float(arrs.rewards[i]),
                       arrs.next_states[i].copy(), bool(arrs.terminals[i])) for i in range(len(arrs))]


@dataclass(frozen=True)
class ReturnDistribution:
    """Empirical return law held as a sorted sample."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float).reshape(-1)
        if s.size == 0:
            raise InputError("return distribution needs at least one sample")
        if np.any(np.diff(s) < 0):
            raise InputError("samples must be sorted; use ReturnDistribution.from_samples")
        object.__setattr__(self, "samples", s)

    @classmethod
    def from_samples(cls, samples) -> "ReturnDistribution":
        return cls(np.sort(np.asarray(samples, dtype=float).reshape(-1)))

    def __len__(self):
        return self.samples.size

    @property
    def mean(self) -> float:
        return float(self.samples.mean())

    def quantile(self, taus) -> np.ndarray:
        """Linearly interpolated empirical quantiles."""
        return np.quantile(self.samples, np.asarray(taus, dtype=float))


# ---------------------------------------------------------------------------
# reward noise


def sample_student_t(df: float, rng: np.random.Generator, size=None):
    """Student-t draw(s) built as ``N(0,1) / sqrt(chi2(df) / df)``; ``df=inf`` gives N(0,1)."""
    if not df > 0:
        raise ConfigError(f"degrees of freedom must be positive, got {df!r}")
    z = rng.standard_normal(size)
    if math.isinf(df):
        return z
    return z / np.sqrt(rng.chisquare(df, size) / df)


@dataclass(frozen=True)
class RewardNoise:
    distribution: str = "normal"
    df: Optional[float] = None
    sigma: float = 1.0

    def __post_init__(self):
        if self.distribution == "student-t":
            if self.df is None or not self.df > 0:
                raise ConfigError(f"student-t noise needs df > 0, got {self.df!r}")
        elif self.distribution == "normal":
            if self.sigma < 0:
                raise ConfigError("sigma must be non-negative")
        else:
            raise ConfigError(f"unknown noise distribution {self.distribution!r}")

    def sample(self, rng: np.random.Generator, size=None):
        if self.distribution == "student-t":
            return sample_student_t(self.df, rng, size)
        return self.sigma * rng.standard_normal(size)

    @property
    def label(self) -> str:
        if self.distribution == "student-t":
            df = self.df
            return f"t({int(df)})" if float(df).is_integer() else f"t({df})"
        return f"N(0,{self.sigma ** 2:g})"


def parse_noise(spec) -> RewardNoise:
    """Accepts ``"t(2)"``, ``"N(0,1)"`` or a mapping with RewardNoise fields."""
    if isinstance(spec, RewardNoise):
        return spec
    if isinstance(spec, dict):
        return RewardNoise(**spec)
    text = str(spec).strip().replace(" ", "")
    if text.startswith("t(") and text.endswith(")"):
        return RewardNoise("student-t", df=float(text[2:-1]))
    if text.startswith("N(") and text.endswith(")"):
        mean, var = (float(v) for v in text[2:-1].split(","))
        if mean != 0.0:
            raise ConfigError("noise mean must be 0; use base_value to shift rewards")
        return RewardNoise("normal", sigma=math.sqrt(var))
    raise ConfigError(f"cannot parse reward noise {spec!r}")


# ---------------------------------------------------------------------------
# environments


class Environment:
    """Batched episodic environment. Subclasses are immutable."""

    name = "env"
    state_dim: int
    n_actions: int
    gamma: float
    horizon_cap: int

    def reset(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def step(self, states: np.ndarray, actions: np.ndarray, rng: np.random.Generator
             ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns ``(next_states, rewards, terminals)``."""
        raise NotImplementedError


@dataclass(frozen=True)
class ToyEnv(Environment):
    """One-step episode: start at ``x0``, move to terminal ``x1`` with a noisy reward."""

    noise: RewardNoise = field(default_factory=RewardNoise)
    base_value: float = 0.0
    gamma: float = 0.9
    horizon_cap: int = 1
    name = "toy-two-state"
    state_dim = 1
    n_actions = 1

    def __post_init__(self):
        _check_gamma(self.gamma)

    def reset(self, rng, n):
        return np.zeros((n, 1))

    def step(self, states, actions, rng):
        n = len(states)
        return np.ones((n, 1)), self.base_value + self.noise.sample(rng, n), np.ones(n, dtype=bool)


@dataclass(frozen=True)
class CartPoleEnv(Environment):
    """Classic cart-pole with Euler integration; +1 reward for each step taken."""

    gamma: float = 0.99
    horizon_cap: int = 500
    gravity: float = 9.8
    masscart: float = 1.0
    masspole: float = 0.1
    half_length: float = 0.5
    force_mag: float = 10.0
    dt: float = 0.02
    angle_limit: float = 0.2095
    position_limit: float = 2.4
    name = "cartpole"
    state_dim = 4
    n_actions = 2

    def __post_init__(self):
        _check_gamma(self.gamma)

    def reset(self, rng, n):
        return rng.uniform(-0.05, 0.05, size=(n, 4))

    def step(self, states, actions, rng):
        x, x_dot, theta, theta_dot = states.T
        force = np.where(np.asarray(actions) == 1, self.force_mag, -self.force_mag)
        total_mass = self.masscart + self.masspole
        pml = self.masspole * self.half_length
        cos, sin = np.cos(theta), np.sin(theta)
        temp = (force + pml * theta_dot ** 2 * sin) / total_mass
        theta_acc = (self.gravity * sin - cos * temp) / (
            self.half_length * (4.0 / 3.0 - self.masspole * cos ** 2 / total_mass))
        x_acc = temp - pml * theta_acc * cos / total_mass
        nxt = np.stack([
            x + self.dt * x_dot,
            x_dot + self.dt * x_acc,
            theta + self.dt * theta_dot,
            theta_dot + self.dt * theta_acc,
        ], axis=1)
        terminal = (np.abs(nxt[:, 0]) > self.position_limit) | (np.abs(nxt[:, 2]) > self.angle_limit)
        return nxt, np.ones(len(states)), terminal


@dataclass(frozen=True)
class TabularEnv(Environment):
    """Simulator for a :class:`TabularMdp`; the state vector is ``[index]``."""

    mdp: TabularMdp = None
    horizon_cap: int = 1000
    name = "tabular"
    state_dim = 1

    def __post_init__(self):
        if self.mdp is None:
            raise ConfigError("tabular environment needs an mdp")
        _check_gamma(self.mdp.gamma)

    @property
    def n_actions(self):
        return self.mdp.n_actions

    @property
    def gamma(self):
        return self.mdp.gamma

    def reset(self, rng, n):
        return _categorical(rng, np.broadcast_to(self.mdp.initial, (n, self.mdp.n_states)))[:, None].astype(float)

    def step(self, states, actions, rng):
        s = states[:, 0].astype(int)
        a = np.asarray(actions, dtype=int)
        s2 = _categorical(rng, self.mdp.transition[s, a])
        rewards = np.empty(len(s))
        for (si, ai) in sorted(set(zip(s.tolist(), a.tolist()))):
            mask = (s == si) & (a == ai)
            atoms, probs = zip(*self.mdp.reward[si][ai])
            idx = _categorical(rng, np.broadcast_to(np.array(probs), (int(mask.sum()), len(probs))))
            rewards[mask] = np.asarray(atoms)[idx]
        terminal = np.isin(s2, self.mdp.terminal_states)
        return s2[:, None].astype(float), rewards, terminal


def _check_gamma(gamma):
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"gamma must lie in (0, 1), got {gamma!r}")


def _categorical(rng, probs: np.ndarray) -> np.ndarray:
    u = rng.random(len(probs))
    idx = (u[:, None] >= np.cumsum(probs, axis=1)).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def make_toy_env(noise="N(0,1)", base_value: float = 0.0, gamma: float = 0.9) -> ToyEnv:
    return ToyEnv(parse_noise(noise), base_value, gamma)


def make_cartpole_env(gamma: float = 0.99, horizon_cap: int = 500) -> CartPoleEnv:
    return CartPoleEnv(gamma=gamma, horizon_cap=horizon_cap)


# ---------------------------------------------------------------------------
# policies

POLICY_KINDS = ("uniform-random", "fixed-action", "mixture", "heuristic-cartpole", "tabular-stochastic")


@dataclass(frozen=True)
class PolicySpec:
    """Stochastic policy over a discrete action set.

    ``params`` by kind:

    * ``fixed-action``: ``action``
    * ``mixture``: ``components`` (PolicySpecs) and ``weights``
    * ``tabular-stochastic``: ``table`` of shape (n_states, n_actions)
    """

    kind: str
    n_actions: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"unknown policy kind {self.kind!r}")
        if self.kind == "fixed-action" and not 0 <= self.params.get("action", -1) < self.n_actions:
            raise ConfigError("fixed-action policy needs 0 <= action < n_actions")
        if self.kind == "heuristic-cartpole" and self.n_actions != 2:
            raise ConfigError("cart-pole heuristic has two actions")
        if self.kind == "mixture":
            w = np.asarray(self.params["weights"], dtype=float)
            comps = self.params["components"]
            if len(w) != len(comps) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ConfigError("mixture weights must be non-negative and sum to 1")
            if any(c.n_actions != self.n_actions for c in comps):
                raise ConfigError("mixture components disagree on n_actions")
        if self.kind == "tabular-stochastic":
            table = np.asarray(self.params["table"], dtype=float)
            if table.ndim != 2 or table.shape[1] != self.n_actions or np.any(table < 0) \
                    or not np.allclose(table.sum(axis=1), 1.0, rtol=0, atol=1e-9):
                raise ConfigError("policy table rows must be distributions over actions")

    def probs(self, states) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        n = len(states)
        if self.kind == "uniform-random":
            return np.full((n, self.n_actions), 1.0 / self.n_actions)
        if self.kind == "fixed-action":
            out = np.zeros((n, self.n_actions))
            out[:, self.params["action"]] = 1.0
            return out
        if self.kind == "heuristic-cartpole":
            return np.eye(2)[heuristic_cartpole_action(states)]
        if self.kind == "tabular-stochastic":
            return np.asarray(self.params["table"], dtype=float)[states[:, 0].astype(int)]
        return sum(w * c.probs(states) for w, c in zip(self.params["weights"], self.params["components"]))

    def sample(self, states, rng: np.random.Generator) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if self.kind == "heuristic-cartpole":
            return heuristic_cartpole_action(states)
        if self.kind == "fixed-action":
            return np.full(len(states), self.params["action"], dtype=int)
        return _categorical(rng, self.probs(states))


def heuristic_cartpole_action(states: np.ndarray) -> np.ndarray:
    """Push toward the side the pole is falling: ``sign(angle + 0.5 * angular_velocity)``."""
    return (states[:, 2] + 0.5 * states[:, 3] > 0).astype(int)


def uniform_policy(n_actions: int) -> PolicySpec:
    return PolicySpec("uniform-random", n_actions)


def mixture_policy(target: PolicySpec, weight: float) -> PolicySpec:
    """``weight`` of ``target``, the remainder uniformly random."""
    if weight >= 1.0:
        return target
    return PolicySpec("mixture", target.n_actions, {
        "components": (target, uniform_policy(target.n_actions)),
        "weights": (weight, 1.0 - weight),
    })


def tabular_policy(table) -> PolicySpec:
    table = np.asarray(table, dtype=float)
    return PolicySpec("tabular-stochastic", table.shape[1], {"table": table})


# ---------------------------------------------------------------------------
# data collection and ground truth


def collect_dataset(env: Environment, behavior: PolicySpec, n: int, rng: np.random.Generator,
                    as_list: bool = True):
    """Draw ``n`` transitions with ``(s, a)`` from the behaviour policy's discounted occupancy.

    Each draw restarts an episode, samples a time index ``t ~ Geometric(1 - gamma)``
    on ``{0, 1, ...}`` and records the transition taken at step ``t``. Draws whose
    episode ends (or hits the horizon cap) before ``t`` are discarded and redrawn.
    """
    if n < 1:
        raise InputError("n must be >= 1")
    chunks = []
    have = 0
    accept = 1.0
    while have < n:
        need = n - have
        m = int(min(max(64, 1.3 * need / max(accept, 1e-3)), 200_000))
        t_idx = rng.geometric(1.0 - env.gamma, size=m) - 1
        states = env.reset(rng, m)
        alive = t_idx < env.horizon_cap
        rec = []
        for t in range(int(t_idx[alive].max(initial=-1)) + 1):
            active = np.flatnonzero(alive)
            if active.size == 0:
                break
            s = states[active]
            a = behavior.sample(s, rng)
            s2, r, term = env.step(s, a, rng)
            hit = t_idx[active] == t
            if hit.any():
                rec.append((active[hit], s[hit], a[hit], r[hit], s2[hit], term[hit]))
            states[active] = s2
            alive[active[hit | term]] = False
        got = 0
        if rec:
            # keep draw order so the dataset is a plain i.i.d. sequence
            order = np.argsort(np.concatenate([r_[0] for r_ in rec]), kind="stable")
            batch = TransitionArrays(*(np.concatenate([r_[k] for r_ in rec])[order] for k in range(1, 6)))
            chunks.append(batch)
            got = len(batch)
            have += got
        accept = max(got / m, 1e-3)
    out = TransitionArrays(*(np.concatenate([getattr(c, f) for c in chunks])[:n]
                             for f in ("states", "actions", "rewards", "next_states", "terminals")))
    return to_transitions(out) if as_list else out


def rollout_episodes(env: Environment, policy: PolicySpec, n_episodes: int, rng: np.random.Generator):
    """Full episodes as lists of Transitions, truncated at ``horizon_cap``."""
    states = env.reset(rng, n_episodes)
    episodes = [[] for _ in range(n_episodes)]
    alive = np.ones(n_episodes, dtype=bool)
    for _ in range(env.horizon_cap):
        active = np.flatnonzero(alive)
        if active.size == 0:
            break
        s = states[active]
        a = policy.sample(s, rng)
        s2, r, term = env.step(s, a, rng)
        for j, i in enumerate(active.tolist()):
            episodes[i].append(Transition(s[j], int(a[j]), float(r[j]), s2[j], bool(term[j])))
        states[active] = s2
        alive[active[term]] = False
    return episodes


def discounted_returns(env: Environment, policy: PolicySpec, n: int, rng: np.random.Generator,
                       initial_states: Optional[np.ndarray] = None) -> np.ndarray:
    states = env.reset(rng, n) if initial_states is None else np.array(initial_states, dtype=float)
    total = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    disc = 1.0
    for _ in range(env.horizon_cap):
        active = np.flatnonzero(alive)
        if active.size == 0:
            break
        s = states[active]
        s2, r, term = env.step(s, policy.sample(s, rng), rng)
        total[active] += disc * r
        states[active] = s2
        alive[active[term]] = False
        disc *= env.gamma
    return total


def mc_return_distribution(env: Environment, target: PolicySpec, n_rollouts: int,
                           rng: np.random.Generator) -> ReturnDistribution:
    """Sorted discounted returns of ``n_rollouts`` episodes from the initial-state distribution."""
    if n_rollouts < 1:
        raise InputError("n_rollouts must be >= 1")
    return ReturnDistribution.from_samples(discounted_returns(env, target, n_rollouts, rng))


# ---------------------------------------------------------------------------
# dataset CSV


def save_dataset_csv(path, data) -> None:
    arrs = as_arrays(data)
    d = arrs.states.shape[1]
    header = [f"s{i}" for i in range(d)] + ["action", "reward"] + [f"next_s{i}" for i in range(d)] + ["terminal"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(arrs)):
            w.writerow([repr(float(v)) for v in arrs.states[i]] + [int(arrs.actions[i]), repr(float(arrs.rewards[i]))]
                       + [repr(float(v)) for v in arrs.next_states[i]] + [int(arrs.terminals[i])])


def load_dataset_csv(path) -> List[Transition]:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = sum(1 for h in header if h.startswith("s") and not h.startswith("next"))
    out = []
    for row in body:
        vals = row
        out.append(Transition(
            np.array(vals[:d], dtype=float), int(vals[d]), float(vals[d + 1]),
            np.array(vals[d + 2:2 * d + 2], dtype=float), vals[2 * d + 2] == "1",
        ))
    return out


def clip_rewards(rewards: np.ndarray, bound: float = REWARD_CLIP) -> np.ndarray:
    return np.clip(rewards, -bound, bound)
