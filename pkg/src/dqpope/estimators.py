"""Offline policy-evaluation estimators.

All network-based estimators share one fitted-iteration loop (:func:`_fit`):
at each step a minibatch of transitions is turned into regression targets
using a frozen *target* copy of the network, the online network takes one
Adam step, and the target copy is refreshed according to the config. They
differ only in the per-batch loss:

* DQPOPE  -- quantile process regression, ``tau`` is a network input and the
  target net is used as an inverse-CDF generator.
* DQOPE   -- fixed quantile levels, one output head per level, pseudo-sample
  targets built from the target heads.
* DOPE    -- fitted Q evaluation with squared loss.
* CateOPE -- categorical distribution on fixed atoms with a projected target.

WIS and DR are trajectory-based and need no training.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Tuple

import numpy as np

from .envs import PolicySpec, ReturnDistribution, TransitionArrays, as_arrays, clip_rewards
from .errors import ConfigError, DegenerateRatioError, InputError, TrainingDivergedError
from .metrics import open_uniform, pinball, pinball_grad
from .neural import AdamState, QuantileNet, adam_step, make_net, soft_update

log = logging.getLogger(__name__)

TARGET_UPDATES = ("iteration", "hard", "soft")
MINIBATCH_MODES = ("epoch", "resample")


@dataclass(frozen=True)
class DqpopeConfig:
    """Training hyper-parameters shared by every network-based estimator.

    One *iteration* is ``epochs_per_iteration`` passes over the iteration's data
    (or ``steps_per_iteration`` minibatches when set). With
    ``target_update="iteration"`` the target network is frozen for a whole
    iteration, which is the literal fitted-iteration scheme; ``"hard"`` copies
    every ``target_update_every`` steps and ``"soft"`` blends by ``soft_rho``
    after every step.
    """

    gamma: float = 0.9
    iterations: int = 1
    epochs_per_iteration: int = 1
    steps_per_iteration: Optional[int] = None
    batch_size: int = 32
    learning_rate: float = 0.002
    hidden: Tuple[int, ...] = (12, 12)
    embedding_mode: str = "concat"
    cosine_order: int = 64
    output_clip: Optional[float] = None
    data_split: bool = False
    m_target_samples: int = 1
    m_quantile_levels: int = 1
    target_update: str = "iteration"
    target_update_every: int = 15
    soft_rho: float = 0.005
    minibatch: str = "epoch"
    clip_rewards: bool = False
    divergence_threshold: float = 1e6
    init: str = "he-uniform"

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.m_target_samples < 1 or self.m_quantile_levels < 1:
            raise ConfigError("m_target_samples and m_quantile_levels must be >= 1")
        if self.batch_size < 1 or self.epochs_per_iteration < 1:
            raise ConfigError("batch_size and epochs_per_iteration must be >= 1")
        if self.steps_per_iteration is not None and self.steps_per_iteration < 1:
            raise ConfigError("steps_per_iteration must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.target_update not in TARGET_UPDATES:
            raise ConfigError(f"target_update must be one of {TARGET_UPDATES}")
        if self.minibatch not in MINIBATCH_MODES:
            raise ConfigError(f"minibatch must be one of {MINIBATCH_MODES}")
        if self.target_update == "hard" and self.target_update_every < 1:
            raise ConfigError("target_update_every must be >= 1")
        if not 0.0 <= self.soft_rho <= 1.0:
            raise ConfigError("soft_rho must lie in [0, 1]")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def with_(self, **kw) -> "DqpopeConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# shared training loop


@dataclass
class _Batch:
    states: np.ndarray
    actions: np.ndarray
    taus: Optional[np.ndarray]
    upstream: np.ndarray
    loss: float


LossFn = Callable[[QuantileNet, QuantileNet, TransitionArrays, np.random.Generator], _Batch]


def _shards(data: TransitionArrays, cfg: DqpopeConfig) -> List[TransitionArrays]:
    if not cfg.data_split:
        return [data] * cfg.iterations
    n = len(data)
    if n % cfg.iterations:
        raise ConfigError(f"data_split needs iterations ({cfg.iterations}) to divide N ({n})")
    size = n // cfg.iterations
    return [data.subset(slice(t * size, (t + 1) * size)) for t in range(cfg.iterations)]


def _minibatches(n: int, cfg: DqpopeConfig, rng: np.random.Generator):
    b = min(cfg.batch_size, n)
    if cfg.minibatch == "resample" or cfg.steps_per_iteration is not None:
        steps = cfg.steps_per_iteration or cfg.epochs_per_iteration * -(-n // b)
        if cfg.minibatch == "resample":
            for _ in range(steps):
                yield rng.integers(0, n, size=b)
            return
        # fixed step budget with shuffled passes, reshuffling whenever a pass runs out
        perm, pos = rng.permutation(n), 0
        for _ in range(steps):
            if pos + b > n:
                perm, pos = rng.permutation(n), 0
            yield perm[pos:pos + b]
            pos += b
        return
    for _ in range(cfg.epochs_per_iteration):
        perm = rng.permutation(n)
        for start in range(0, n, b):
            yield perm[start:start + b]


def _fit(data, cfg: DqpopeConfig, rng: np.random.Generator, net: QuantileNet, loss_fn: LossFn,
         history: Optional[list] = None) -> QuantileNet:
    data = as_arrays(data)
    if len(data) == 0:
        raise InputError("empty dataset")
    if cfg.clip_rewards:
        clipped = clip_rewards(data.rewards)
        n_clipped = int(np.sum(clipped != data.rewards))
        if n_clipped:
            log.info("clipped %d rewards to +-1e6", n_clipped)
        data = replace(data, rewards=clipped)
    target = net.copy()
    opt = AdamState(lr=cfg.learning_rate)
    step = 0
    for t, shard in enumerate(_shards(data, cfg)):
        for idx in _minibatches(len(shard), cfg, rng):
            batch = loss_fn(net, target, shard.subset(idx), rng)
            if not np.isfinite(batch.loss) or batch.loss > cfg.divergence_threshold:
                raise TrainingDivergedError(
                    f"loss {batch.loss!r} at iteration {t}, step {step}", step=step, loss=batch.loss)
            if history is not None:
                history.append(batch.loss)
            grads = net.backward(batch.states, batch.actions, batch.taus, batch.upstream)
            adam_step(net, grads, opt)
            step += 1
            if cfg.target_update == "hard" and step % cfg.target_update_every == 0:
                soft_update(target, net, 1.0)
            elif cfg.target_update == "soft":
                soft_update(target, net, cfg.soft_rho)
        if cfg.target_update == "iteration":
            soft_update(target, net, 1.0)
    return net


def _continuation(batch: TransitionArrays, cfg: DqpopeConfig) -> np.ndarray:
    return cfg.gamma * (~batch.terminals).astype(float)


# ---------------------------------------------------------------------------
# DQPOPE


def dqpope_loss(net, target, batch, target_policy: PolicySpec, cfg: DqpopeConfig, rng) -> _Batch:
    """Multi-sample quantile process loss; ``m = m' = 1`` is the single-draw form.

    Random draws happen in a fixed order: quantile levels, next actions,
    generator levels.
    """
    B = len(batch)
    m, mq = cfg.m_target_samples, cfg.m_quantile_levels
    taus = open_uniform(rng, (B, mq))
    next_actions = target_policy.sample(batch.next_states, rng)
    u = open_uniform(rng, (B, m))
    z_next = target.forward(np.repeat(batch.next_states, m, axis=0), np.repeat(next_actions, m),
                            u.reshape(-1)).reshape(B, m)
    y = batch.rewards[:, None] + _continuation(batch, cfg)[:, None] * z_next
    states = np.repeat(batch.states, mq, axis=0)
    actions = np.repeat(batch.actions, mq)
    pred = net.forward(states, actions, taus.reshape(-1)).reshape(B, mq)
    diff = y[:, :, None] - pred[:, None, :]
    tau_b = taus[:, None, :]
    loss = float(np.mean(pinball(diff, tau_b)))
    upstream = -pinball_grad(diff, tau_b).sum(axis=1) / (B * m * mq)
    return _Batch(states, actions, taus.reshape(-1), upstream.reshape(-1), loss)


def make_quantile_net(env_dims: Tuple[int, int], cfg: DqpopeConfig, rng) -> QuantileNet:
    state_dim, n_actions = env_dims
    return make_net(state_dim, n_actions, cfg.hidden, rng, cfg.embedding_mode,
                    cosine_order=cfg.cosine_order, output_clip=cfg.output_clip, init=cfg.init)


def dqpope_train(dataset, target: PolicySpec, cfg: DqpopeConfig, rng: np.random.Generator,
                 net: Optional[QuantileNet] = None, history: Optional[list] = None) -> QuantileNet:
    """Fit the quantile process ``f(s, a, tau)`` of the target policy's return."""
    data = as_arrays(dataset)
    if cfg.embedding_mode == "none":
        raise ConfigError("DQPOPE needs a quantile-level embedding")
    if net is None:
        net = make_quantile_net((data.states.shape[1], target.n_actions), cfg, rng)
    return _fit(data, cfg, rng, net,
                lambda n, t, b, r: dqpope_loss(n, t, b, target, cfg, r), history)


# ---------------------------------------------------------------------------
# DOPE


def dope_train(dataset, target: PolicySpec, cfg: DqpopeConfig, rng: np.random.Generator,
               history: Optional[list] = None) -> QuantileNet:
    """Fitted Q evaluation with squared loss; returns a Q network (no level input)."""
    data = as_arrays(dataset)
    net = make_net(data.states.shape[1], target.n_actions, cfg.hidden, rng, "none", init=cfg.init)

    def loss_fn(net, tgt, batch, rng):
        next_actions = target.sample(batch.next_states, rng)
        y = batch.rewards + _continuation(batch, cfg) * tgt.forward(batch.next_states, next_actions)
        err = net.forward(batch.states, batch.actions) - y
        return _Batch(batch.states, batch.actions, None, 2.0 * err / len(batch), float(np.mean(err ** 2)))

    return _fit(data, cfg, rng, net, loss_fn, history)


def q_value(net: QuantileNet, states, actions) -> np.ndarray:
    return net.forward(states, actions)


# ---------------------------------------------------------------------------
# DQOPE


@dataclass
class DiscreteQuantileModel:
    net: QuantileNet
    levels: np.ndarray

    def quantiles(self, states, actions) -> np.ndarray:
        """(B, m) quantile estimates at the fixed levels."""
        out = self.net.forward(states, actions)
        return out.reshape(len(np.atleast_1d(actions)), -1)

    def value(self, states, actions) -> np.ndarray:
        return self.quantiles(states, actions).mean(axis=1)


def _check_levels(levels) -> np.ndarray:
    levels = np.asarray(levels, dtype=float).reshape(-1)
    if levels.size == 0 or np.any(levels <= 0) or np.any(levels >= 1) or np.any(np.diff(levels) <= 0):
        raise InputError("levels must be strictly increasing in (0, 1)")
    return levels


def dqope_train(dataset, target: PolicySpec, levels, cfg: DqpopeConfig, rng: np.random.Generator,
                history: Optional[list] = None) -> DiscreteQuantileModel:
    """Fixed-level quantile regression with pseudo-sample targets (QR-DQN style)."""
    levels = _check_levels(levels)
    data = as_arrays(dataset)
    m = levels.size
    net = make_net(data.states.shape[1], target.n_actions, cfg.hidden, rng, "none", output_width=m, init=cfg.init)

    def loss_fn(net, tgt, batch, rng):
        B = len(batch)
        next_actions = target.sample(batch.next_states, rng)
        z_next = tgt.forward(batch.next_states, next_actions).reshape(B, m)
        y = batch.rewards[:, None] + _continuation(batch, cfg)[:, None] * z_next
        pred = net.forward(batch.states, batch.actions).reshape(B, m)
        diff = y[:, :, None] - pred[:, None, :]
        loss = float(np.sum(pinball(diff, levels[None, None, :])) / (B * m * m))
        upstream = -pinball_grad(diff, levels[None, None, :]).sum(axis=1) / (B * m * m)
        return _Batch(batch.states, batch.actions, None, upstream, loss)

    return DiscreteQuantileModel(_fit(data, cfg, rng, net, loss_fn, history), levels)


# ---------------------------------------------------------------------------
# CateOPE


@dataclass(frozen=True)
class AtomsConfig:
    n_atoms: int = 51
    v_min: float = -10.0
    v_max: float = 10.0

    def __post_init__(self):
        if self.n_atoms < 2 or not self.v_max > self.v_min:
            raise ConfigError("need n_atoms >= 2 and v_max > v_min")

    @property
    def atoms(self) -> np.ndarray:
        return np.linspace(self.v_min, self.v_max, self.n_atoms)


def cateope_project(reward, gamma, next_probs, atoms, v_min, v_max) -> np.ndarray:
    """Project ``reward + gamma * Z`` back onto the fixed atoms by linear interpolation.

    Vectorised over a leading batch axis when ``reward`` is an array and
    ``next_probs`` is (B, K).
    """
    atoms = np.asarray(atoms, dtype=float)
    p = np.asarray(next_probs, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    r = np.broadcast_to(np.asarray(reward, dtype=float).reshape(-1, 1), (p.shape[0], 1))
    g = np.broadcast_to(np.asarray(gamma, dtype=float).reshape(-1, 1), (p.shape[0], 1))
    K = atoms.size
    dz = (v_max - v_min) / (K - 1)
    z_hat = np.clip(r + g * atoms[None, :], v_min, v_max)
    b = (z_hat - v_min) / dz
    lo = np.floor(b).astype(int)
    hi = np.ceil(b).astype(int)
    # guard float spill past the top atom
    lo = np.clip(lo, 0, K - 1)
    hi = np.clip(hi, 0, K - 1)
    same = lo == hi
    w_lo = np.where(same, 1.0, hi - b)
    w_hi = np.where(same, 0.0, b - lo)
    out = np.zeros_like(p)
    rows = np.broadcast_to(np.arange(p.shape[0])[:, None], lo.shape)
    np.add.at(out, (rows, lo), p * w_lo)
    np.add.at(out, (rows, hi), p * w_hi)
    return out[0] if single else out


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class CategoricalModel:
    net: QuantileNet
    atoms: np.ndarray
    v_min: float
    v_max: float

    def probs(self, states, actions) -> np.ndarray:
        return _softmax(self.net.forward(states, actions).reshape(len(np.atleast_1d(actions)), -1))

    def value(self, states, actions) -> np.ndarray:
        return self.probs(states, actions) @ self.atoms


def cateope_train(dataset, target: PolicySpec, atoms_cfg: AtomsConfig, cfg: DqpopeConfig,
                  rng: np.random.Generator, history: Optional[list] = None) -> CategoricalModel:
    """Categorical return distribution trained by cross-entropy to projected targets."""
    data = as_arrays(dataset)
    atoms = atoms_cfg.atoms
    net = make_net(data.states.shape[1], target.n_actions, cfg.hidden, rng, "none",
                   output_width=atoms_cfg.n_atoms, init=cfg.init)

    def loss_fn(net, tgt, batch, rng):
        B = len(batch)
        next_actions = target.sample(batch.next_states, rng)
        next_p = _softmax(tgt.forward(batch.next_states, next_actions).reshape(B, -1))
        # terminal: gamma=0 collapses every atom onto the reward
        m = cateope_project(batch.rewards, _continuation(batch, cfg), next_p,
                            atoms, atoms_cfg.v_min, atoms_cfg.v_max)
        logits = net.forward(batch.states, batch.actions).reshape(B, -1)
        p = _softmax(logits)
        loss = float(-np.sum(m * np.log(np.maximum(p, 1e-300))) / B)
        return _Batch(batch.states, batch.actions, None, (p - m) / B, loss)

    return CategoricalModel(_fit(data, cfg, rng, net, loss_fn, history), atoms,
                            atoms_cfg.v_min, atoms_cfg.v_max)


# ---------------------------------------------------------------------------
# importance sampling


def _episode_ratios(episode, target: PolicySpec, behavior: PolicySpec) -> np.ndarray:
    states = np.array([tr.state for tr in episode], dtype=float)
    actions = np.array([tr.action for tr in episode], dtype=int)
    idx = np.arange(len(episode))
    pb = behavior.probs(states)[idx, actions]
    if np.any(pb <= 0):
        raise DegenerateRatioError("behavior policy gives zero probability to an observed action")
    return target.probs(states)[idx, actions] / pb


def wis_estimate(trajectories, target: PolicySpec, behavior: PolicySpec, gamma: float) -> float:
    """Per-step weighted importance sampling.

    Each reward is weighted by its cumulative ratio divided by the mean
    cumulative ratio at that step across episodes; finished episodes hold
    their last cumulative ratio in that mean.
    """
    episodes = [ep for ep in trajectories if len(ep)]
    if not episodes:
        raise InputError("no trajectories")
    horizon = max(len(ep) for ep in episodes)
    cum = np.empty((len(episodes), horizon))
    rewards = np.zeros((len(episodes), horizon))
    mask = np.zeros((len(episodes), horizon), dtype=bool)
    for i, ep in enumerate(episodes):
        c = np.cumprod(_episode_ratios(ep, target, behavior))
        cum[i, :len(ep)] = c
        cum[i, len(ep):] = c[-1]
        rewards[i, :len(ep)] = [tr.reward for tr in ep]
        mask[i, :len(ep)] = True
    omega = cum.mean(axis=0)
    disc = gamma ** np.arange(horizon)
    with np.errstate(invalid="ignore", divide="ignore"):
        weights = np.where(mask, cum / omega, 0.0)
    weights = np.nan_to_num(weights)
    return float(np.sum(weights * disc * rewards) / len(episodes))


def dr_estimate(trajectories, target: PolicySpec, behavior: PolicySpec,
                q_fn: Callable[[np.ndarray], np.ndarray], gamma: float) -> float:
    """Doubly robust estimate, backward recursion per episode.

    ``q_fn`` maps a (B, d) state array to (B, n_actions) action values.
    """
    episodes = [ep for ep in trajectories if len(ep)]
    if not episodes:
        raise InputError("no trajectories")
    total = 0.0
    for ep in episodes:
        rho = _episode_ratios(ep, target, behavior)
        states = np.array([tr.state for tr in ep], dtype=float)
        q = np.asarray(q_fn(states), dtype=float)
        v_hat = np.sum(target.probs(states) * q, axis=1)
        q_taken = q[np.arange(len(ep)), [tr.action for tr in ep]]
        v = 0.0
        for t in range(len(ep) - 1, -1, -1):
            v = v_hat[t] + rho[t] * (ep[t].reward + gamma * v - q_taken[t])
        total += v
    return total / len(episodes)


def per_step_is_estimate(trajectories, target: PolicySpec, behavior: PolicySpec, gamma: float) -> float:
    """Unnormalised per-step importance sampling."""
    vals = []
    for ep in trajectories:
        c = np.cumprod(_episode_ratios(ep, target, behavior))
        r = np.array([tr.reward for tr in ep])
        vals.append(float(np.sum(c * gamma ** np.arange(len(ep)) * r)))
    return float(np.mean(vals))


def q_fn_from_net(net: QuantileNet) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a Q network as ``states -> (B, n_actions)`` for :func:`dr_estimate`."""
    def q_fn(states):
        states = np.atleast_2d(states)
        cols = [net.forward(states, np.full(len(states), a)) for a in range(net.n_actions)]
        return np.stack(cols, axis=1)
    return q_fn


# ---------------------------------------------------------------------------
# evaluation helpers


def initial_draws(env, target: PolicySpec, k: int, rng: np.random.Generator):
    """``k`` pairs ``(s0, a0)`` with ``s0 ~ rho`` and ``a0 ~ pi(.|s0)``."""
    states = env.reset(rng, k)
    actions = target.sample(states, rng)
    return list(zip(states, actions.tolist()))


def mixture_samples(net: QuantileNet, draws, n_per_draw: int, rng: np.random.Generator) -> ReturnDistribution:
    """Samples from the estimated return law averaged over initial ``(s, a)`` draws."""
    states = np.repeat(np.array([s for s, _ in draws], dtype=float), n_per_draw, axis=0)
    actions = np.repeat(np.array([a for _, a in draws], dtype=int), n_per_draw)
    u = open_uniform(rng, len(actions))
    return ReturnDistribution.from_samples(net.forward(states, actions, u))


def dump_quantile_curve(path, net_or_model, state, action: int, taus) -> None:
    """CSV of ``tau,value`` for one (s, a), usable for any fitted estimator."""
    taus = np.asarray(taus, dtype=float)
    values = quantile_curve(net_or_model, state, action, taus)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "value"])
        for t, v in zip(taus, values):
            w.writerow([f"{t:.9g}", f"{v:.9g}"])


def quantile_curve(model, state, action: int, taus) -> np.ndarray:
    taus = np.asarray(taus, dtype=float)
    s = np.repeat(np.asarray(state, dtype=float)[None, :], taus.size, axis=0)
    a = np.full(taus.size, action)
    if isinstance(model, QuantileNet):
        if model.embedding_mode == "none":
            return np.full(taus.size, model.value_at(state, action))
        return model.forward(s, a, taus)
    if isinstance(model, DiscreteQuantileModel):
        q = np.sort(model.quantiles(s[:1], a[:1])[0])
        # step function through the fixed levels
        idx = np.minimum((taus * q.size).astype(int), q.size - 1)
        return q[idx]
    if isinstance(model, CategoricalModel):
        p = model.probs(s[:1], a[:1])[0]
        cdf = np.cumsum(p)
        idx = np.minimum(np.searchsorted(cdf, taus, side="left"), p.size - 1)
        return model.atoms[idx]
    raise InputError(f"cannot build a quantile curve for {type(model).__name__}")
