"""Config-driven experiment runners.

A config is a YAML mapping; every key is checked against a known set so a
typo fails loudly instead of silently falling back to a default. Each
replicate draws its randomness from a ``SeedSequence`` whose entropy is
``base_seed + r`` and whose spawn key names the cell it belongs to, so the
result of one replicate never depends on which other replicates ran or in
what order.
"""
from __future__ import annotations

import csv
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import yaml

from .envs import (Environment, PolicySpec, ReturnDistribution, TabularEnv, ToyEnv,
                   collect_dataset, make_cartpole_env, make_toy_env, mc_return_distribution,
                   mixture_policy, parse_noise, tabular_policy)
from .errors import ConfigError
from .estimators import (AtomsConfig, DqpopeConfig,
                         cateope_train, dope_train, dqope_train, dqpope_train, initial_draws,
                         mixture_samples, quantile_curve)
from .metrics import (ks_statistic, midpoint_levels, mse_over_replicates, open_uniform,
                      sample_from_net, value_from_quantiles, w1_empirical)
from .neural import QuantileNet
from .tabular import TabularMdp, apply_bellman, random_law_table, random_mdp, wbar_p

log = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "DQPOPE_OUTPUT_DIR"
EXPERIMENT_KINDS = ("toy-mse-table", "complexity-sweep", "tabular-contraction", "quantile-fit-sanity")
ENV_KINDS = ("toy-two-state", "cartpole", "tabular")
ESTIMATORS = ("dqpope", "dope", "dqope", "cateope")
LEVEL_MODES = ("random", "grid")
TOY_NOISES = ("t(2)", "t(4)", "t(6)", "t(8)", "t(10)", "N(0,1)")
MIXTURE_RATES = (1.0, 0.8, 0.6, 0.4)

_TRAIN_KEYS = {f.name for f in fields(DqpopeConfig)} - {"gamma"}
_ESTIMATOR_KEYS = {
    "dqpope": _TRAIN_KEYS,
    "dope": _TRAIN_KEYS,
    "dqope": _TRAIN_KEYS | {"n_levels"},
    "cateope": _TRAIN_KEYS | {"n_atoms", "v_min", "v_max"},
}
_ENV_KEYS = {
    "toy-two-state": {"kind", "gamma", "reward_noise", "base_value"},
    "cartpole": {"kind", "gamma", "horizon_cap"},
    "tabular": {"kind", "gamma", "horizon_cap", "transition", "reward", "target_policy", "initial",
                "terminal_states", "random"},
}
_TOP_KEYS = {
    "experiment", "env", "estimators", "replicates", "base_seed", "sample_sizes", "K_values",
    "output_dir", "level_mode", "noise_settings", "mixture_rates", "oracle_rollouts",
    "mixture_draws", "workers", "gammas", "p_values", "trials", "ks_samples",
}

# architecture and optimiser defaults by environment, applied before per-estimator overrides
_ENV_TRAIN_DEFAULTS = {
    "toy-two-state": {},
    "cartpole": {"hidden": (64, 64, 64), "learning_rate": 0.0005, "batch_size": 64,
                 "target_update": "hard", "target_update_every": 15, "epochs_per_iteration": 60},
    "tabular": {"hidden": (64, 64), "learning_rate": 0.001, "batch_size": 64,
                "target_update": "hard", "target_update_every": 15, "epochs_per_iteration": 20},
}


# ---------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class EnvSpec:
    kind: str
    gamma: float
    horizon_cap: int
    reward_noise: Optional[str] = None
    base_value: float = 0.0
    tabular: Optional[dict] = None

    def build(self, noise=None) -> Environment:
        if self.kind == "toy-two-state":
            return make_toy_env(noise if noise is not None else (self.reward_noise or "N(0,1)"),
                                self.base_value, self.gamma)
        if self.kind == "cartpole":
            return make_cartpole_env(self.gamma, self.horizon_cap)
        return TabularEnv(self._mdp(), self.horizon_cap)

    def _mdp(self) -> TabularMdp:
        t = self.tabular
        if "random" in t:
            r = t["random"]
            rng = np.random.default_rng(int(r.get("seed", 0)))
            return random_mdp(rng, int(r["n_states"]), int(r["n_actions"]), self.gamma)
        reward = [[[tuple(pair) for pair in law] for law in row] for row in t["reward"]]
        return TabularMdp(np.asarray(t["transition"], dtype=float), reward, self.gamma,
                          np.asarray(t["target_policy"], dtype=float),
                          None if t.get("initial") is None else np.asarray(t["initial"], dtype=float),
                          tuple(t.get("terminal_states", ())))

    def target_policy(self, env: Environment) -> PolicySpec:
        if self.kind == "toy-two-state":
            return PolicySpec("fixed-action", 1, {"action": 0})
        if self.kind == "cartpole":
            return PolicySpec("heuristic-cartpole", 2)
        return tabular_policy(env.mdp.target_policy)


@dataclass(frozen=True)
class EstimatorSpec:
    name: str
    train: DqpopeConfig
    n_levels: int = 32
    atoms: AtomsConfig = field(default_factory=AtomsConfig)

    @property
    def label(self) -> str:
        return {"dqpope": "DQPOPE", "dope": "DOPE", "dqope": f"DQOPE(K={self.n_levels})",
                "cateope": "CateOPE"}[self.name]


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    env: EnvSpec
    estimators: tuple
    replicates: int = 1
    base_seed: int = 0
    sample_sizes: tuple = (3200,)
    K_values: tuple = (4, 8, 16, 32)
    output_dir: str = "results"
    level_mode: str = "random"
    noise_settings: tuple = TOY_NOISES
    mixture_rates: tuple = MIXTURE_RATES
    oracle_rollouts: int = 1000
    mixture_draws: int = 1000
    workers: int = 1
    gammas: tuple = (0.5, 0.9)
    p_values: tuple = (1, 2)
    trials: int = 200
    ks_samples: int = 5000

    def output_path(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV) or self.output_dir)

    def estimator(self, name: str) -> EstimatorSpec:
        for est in self.estimators:
            if est.name == name:
                return est
        raise ConfigError(f"experiment {self.experiment} needs a {name!r} estimator entry")


def _unknown(keys, allowed, where):
    extra = sorted(set(keys) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")


def _parse_env(raw) -> EnvSpec:
    if not isinstance(raw, dict) or "kind" not in raw:
        raise ConfigError("env must be a mapping with a 'kind'")
    kind = raw["kind"]
    if kind not in ENV_KINDS:
        raise ConfigError(f"unknown env kind {kind!r}; expected one of {ENV_KINDS}")
    _unknown(raw, _ENV_KEYS[kind], f"env ({kind})")
    gamma = float(raw.get("gamma", 0.99 if kind == "cartpole" else 0.9))
    if not 0.0 < gamma < 1.0:
        raise ConfigError("env gamma must lie in (0, 1)")
    cap = int(raw.get("horizon_cap", 500 if kind == "cartpole" else 1 if kind == "toy-two-state" else 1000))
    if cap < 1:
        raise ConfigError("horizon_cap must be >= 1")
    noise = raw.get("reward_noise")
    if noise is not None:
        parse_noise(noise)
        noise = str(noise)
    tab = None
    if kind == "tabular":
        tab = {k: raw[k] for k in ("transition", "reward", "target_policy", "initial",
                                   "terminal_states", "random") if k in raw}
        if "random" not in tab and not {"transition", "reward", "target_policy"} <= set(tab):
            raise ConfigError("tabular env needs either 'random' or transition/reward/target_policy")
        if "random" in tab:
            _unknown(tab["random"], {"n_states", "n_actions", "seed"}, "env.random")
    spec = EnvSpec(kind, gamma, cap, noise, float(raw.get("base_value", 0.0)), tab)
    if kind == "tabular":
        spec._mdp()  # validate tables now rather than inside a worker
    return spec


def _parse_estimator(raw, env: EnvSpec) -> EstimatorSpec:
    if isinstance(raw, str):
        raw = {"name": raw}
    if not isinstance(raw, dict) or "name" not in raw:
        raise ConfigError("each estimator needs a 'name'")
    name = raw["name"]
    if name not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {name!r}; expected one of {ESTIMATORS}")
    body = {k: v for k, v in raw.items() if k != "name"}
    _unknown(body, _ESTIMATOR_KEYS[name], f"estimator {name}")
    train = dict(_ENV_TRAIN_DEFAULTS[env.kind])
    train.update({k: v for k, v in body.items() if k in _TRAIN_KEYS})
    if "hidden" in train:
        train["hidden"] = tuple(int(h) for h in train["hidden"])
    try:
        cfg = DqpopeConfig(gamma=env.gamma, **train)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    atoms = AtomsConfig(int(body.get("n_atoms", 51)), float(body.get("v_min", -10.0)),
                        float(body.get("v_max", 10.0)))
    n_levels = int(body.get("n_levels", 32))
    if n_levels < 1:
        raise ConfigError("n_levels must be >= 1")
    return EstimatorSpec(name, cfg, n_levels, atoms)


def _int_tuple(values, name, minimum=1) -> tuple:
    out = tuple(int(v) for v in values)
    if not out or min(out) < minimum:
        raise ConfigError(f"{name} must be a non-empty list of integers >= {minimum}")
    return out


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    _unknown(raw, _TOP_KEYS, "config")
    kind = raw.get("experiment")
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"experiment must be one of {EXPERIMENT_KINDS}, got {kind!r}")
    # the contraction suite generates its own MDPs and ignores env
    env = _parse_env(raw.get("env", {"kind": "toy-two-state"}))
    ests = raw.get("estimators", ["dqpope"] if kind != "toy-mse-table" else ["dope", "dqpope"])
    if not isinstance(ests, list) or not ests:
        raise ConfigError("estimators must be a non-empty list")
    estimators = tuple(_parse_estimator(e, env) for e in ests)
    names = [e.label for e in estimators]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate estimator entries")
    level_mode = raw.get("level_mode", "random")
    if level_mode not in LEVEL_MODES:
        raise ConfigError(f"level_mode must be one of {LEVEL_MODES}")
    rates = tuple(float(r) for r in raw.get("mixture_rates", MIXTURE_RATES))
    if not rates or any(not 0.0 <= r <= 1.0 for r in rates):
        raise ConfigError("mixture_rates must lie in [0, 1]")
    gammas = tuple(float(g) for g in raw.get("gammas", (0.5, 0.9)))
    if not gammas or any(not 0.0 < g < 1.0 for g in gammas):
        raise ConfigError("gammas must lie in (0, 1)")
    noises = tuple(str(n) for n in raw.get("noise_settings", TOY_NOISES))
    for n in noises:
        parse_noise(n)
    base_seed = int(raw.get("base_seed", 0))
    if not -2 ** 63 <= base_seed < 2 ** 64:
        raise ConfigError("base_seed must fit in 64 bits")
    cfg = ExperimentConfig(
        experiment=kind,
        env=env,
        estimators=estimators,
        replicates=_int_tuple([raw.get("replicates", 1)], "replicates")[0],
        base_seed=base_seed,
        sample_sizes=_int_tuple(raw.get("sample_sizes", [3200]), "sample_sizes"),
        K_values=_int_tuple(raw.get("K_values", [4, 8, 16, 32]), "K_values"),
        output_dir=str(raw.get("output_dir", "results")),
        level_mode=level_mode,
        noise_settings=noises,
        mixture_rates=rates,
        oracle_rollouts=_int_tuple([raw.get("oracle_rollouts", 1000)], "oracle_rollouts")[0],
        mixture_draws=_int_tuple([raw.get("mixture_draws", 1000)], "mixture_draws")[0],
        workers=_int_tuple([raw.get("workers", 1)], "workers")[0],
        gammas=gammas,
        p_values=_int_tuple(raw.get("p_values", [1, 2]), "p_values"),
        trials=_int_tuple([raw.get("trials", 200)], "trials")[0],
        ks_samples=_int_tuple([raw.get("ks_samples", 5000)], "ks_samples")[0],
    )
    if kind == "toy-mse-table" and env.kind != "toy-two-state":
        raise ConfigError("toy-mse-table needs env kind toy-two-state")
    if kind == "complexity-sweep":
        if env.kind not in ("cartpole", "tabular"):
            raise ConfigError("complexity-sweep needs env kind cartpole or tabular")
        cfg.estimator("dqpope")
    if kind == "quantile-fit-sanity":
        if env.kind != "toy-two-state":
            raise ConfigError("quantile-fit-sanity needs env kind toy-two-state")
        cfg.estimator("dqpope")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_config(raw)


# ---------------------------------------------------------------------------
# seeding, CSV, work pool


def _key(label) -> int:
    return zlib.crc32(str(label).encode())


def replicate_rng(cfg: ExperimentConfig, r: int, *key) -> np.random.Generator:
    """Generator for replicate ``r`` of the cell named by ``key``."""
    seq = np.random.SeedSequence((cfg.base_seed + r) % 2 ** 64, spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(seq)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _pool_map(fn: Callable, tasks: list, workers: int) -> list:
    """Map with results joined in task order, whatever order they finish in."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


# ---------------------------------------------------------------------------
# toy MSE table


_DATA, _TRAIN, _EVAL = 0, 1, 2


def _levels(cfg: ExperimentConfig, k: int, rng) -> np.ndarray:
    return open_uniform(rng, k) if cfg.level_mode == "random" else midpoint_levels(k)


def _value_of(model, env, target, cfg: ExperimentConfig, rng) -> float:
    draws = initial_draws(env, target, cfg.mixture_draws if not isinstance(env, ToyEnv) else 1, rng)
    states = np.array([s for s, _ in draws])
    actions = np.array([a for _, a in draws])
    if isinstance(model, QuantileNet):
        return float(np.mean(model.forward(states, actions)))
    return float(np.mean(model.value(states, actions)))


def _train(est: EstimatorSpec, data, target, rng):
    if est.name == "dqpope":
        return dqpope_train(data, target, est.train, rng)
    if est.name == "dope":
        return dope_train(data, target, est.train, rng)
    if est.name == "dqope":
        return dqope_train(data, target, midpoint_levels(est.n_levels), est.train, rng)
    return cateope_train(data, target, est.atoms, est.train, rng)


def toy_replicate(task) -> Dict[str, float]:
    """One replicate of one noise setting: every estimator sees the same dataset."""
    cfg, noise, r = task
    env = cfg.env.build(noise)
    target = cfg.env.target_policy(env)
    nk = _key(noise)
    data = collect_dataset(env, target, cfg.sample_sizes[0], replicate_rng(cfg, r, nk, _DATA), as_list=False)
    out = {}
    for j, est in enumerate(cfg.estimators):
        model = _train(est, data, target, replicate_rng(cfg, r, nk, _TRAIN, _key(est.label)))
        eval_rng = replicate_rng(cfg, r, nk, _EVAL, _key(est.label))
        if est.name == "dqpope":
            for k in cfg.K_values:
                draws = initial_draws(env, target, k, eval_rng)
                out[f"DQPOPE(K={k})"] = value_from_quantiles(model, draws, _levels(cfg, k, eval_rng))
        else:
            out[est.label] = _value_of(model, env, target, cfg, eval_rng)
    return out


def toy_columns(cfg: ExperimentConfig) -> List[str]:
    cols = []
    for est in cfg.estimators:
        cols.extend([f"DQPOPE(K={k})" for k in cfg.K_values] if est.name == "dqpope" else [est.label])
    return cols


@dataclass
class ToyTable:
    columns: List[str]
    noises: List[str]
    estimates: Dict[str, np.ndarray]  # keyed "noise|column", one entry per replicate
    truth: float

    def mse(self, noise: str, column: str) -> float:
        return mse_over_replicates(self.estimates[f"{noise}|{column}"], self.truth)

    def sd(self, noise: str, column: str) -> float:
        err2 = (self.estimates[f"{noise}|{column}"] - self.truth) ** 2
        return float(np.std(err2, ddof=1)) if err2.size > 1 else 0.0


def run_toy_mse_table(cfg: ExperimentConfig, write: bool = True) -> ToyTable:
    """MSE (x 1e3) and sd of squared error for every noise setting and estimator column."""
    if cfg.experiment != "toy-mse-table" or cfg.env.kind != "toy-two-state":
        raise ConfigError("run_toy_mse_table needs a toy-mse-table config on the toy env")
    for noise in cfg.noise_settings:
        n = parse_noise(noise)
        if n.distribution == "student-t" and n.df <= 1:
            raise ConfigError(f"{noise}: the policy value is undefined for df <= 1")
    tasks = [(cfg, noise, r) for noise in cfg.noise_settings for r in range(cfg.replicates)]
    results = _pool_map(toy_replicate, tasks, cfg.workers)
    cols = toy_columns(cfg)
    est = {}
    for noise in cfg.noise_settings:
        for col in cols:
            est[f"{noise}|{col}"] = np.array([res[col] for (_, nz, _), res in zip(tasks, results) if nz == noise])
    table = ToyTable(cols, list(cfg.noise_settings), est, cfg.env.base_value)
    if write:
        out = cfg.output_path()
        write_csv(out / "toy_mse_table.csv", ["noise", "estimator", "mse_x1e3", "sd_x1e3"],
                  [(nz, c, 1e3 * table.mse(nz, c), 1e3 * table.sd(nz, c)) for nz in table.noises for c in cols])
        write_csv(out / "toy_replicates.csv", ["noise", "estimator", "replicate", "estimate"],
                  [(nz, c, r, est[f"{nz}|{c}"][r]) for nz in table.noises for c in cols
                   for r in range(cfg.replicates)])
    return table


# ---------------------------------------------------------------------------
# complexity sweep


def _oracle(cfg: ExperimentConfig, env, target) -> ReturnDistribution:
    return mc_return_distribution(env, target, cfg.oracle_rollouts, replicate_rng(cfg, 0, _key("oracle")))


def run_oracle(cfg: ExperimentConfig, write: bool = True) -> ReturnDistribution:
    """Monte-Carlo return distribution of the target policy from the initial state law."""
    env = cfg.env.build()
    ref = _oracle(cfg, env, cfg.env.target_policy(env))
    if write:
        write_csv(cfg.output_path() / "oracle.csv", ["return"], [(x,) for x in ref.samples])
    return ref


def sweep_cell(task):
    cfg, rate, n, r, ref = task
    env = cfg.env.build()
    target = cfg.env.target_policy(env)
    key = (_key(f"{rate:.6f}"), n)
    data = collect_dataset(env, mixture_policy(target, rate), n, replicate_rng(cfg, r, *key, _DATA),
                           as_list=False)
    net = dqpope_train(data, target, cfg.estimator("dqpope").train, replicate_rng(cfg, r, *key, _TRAIN))
    rng = replicate_rng(cfg, r, *key, _EVAL)
    est = mixture_samples(net, initial_draws(env, target, cfg.mixture_draws, rng), 1, rng)
    return w1_empirical(est, ref), est


@dataclass
class SweepResult:
    rows: List[tuple]  # (mixture_rate, sample_size, seed, w1)
    reference: ReturnDistribution

    def mean_w1(self, rate: float, n: int) -> float:
        vals = [w for m, s, _, w in self.rows if m == rate and s == n]
        return float(np.mean(vals))


def run_complexity_sweep(cfg: ExperimentConfig, write: bool = True) -> SweepResult:
    """W_1 between DQPOPE's initial-state mixture law and the MC oracle over (mixture, N, seed)."""
    if cfg.env.kind not in ("cartpole", "tabular"):
        raise ConfigError("complexity-sweep needs env kind cartpole or tabular")
    cfg.estimator("dqpope")
    env = cfg.env.build()
    ref = _oracle(cfg, env, cfg.env.target_policy(env))
    tasks = [(cfg, rate, n, r, ref) for rate in cfg.mixture_rates for n in cfg.sample_sizes
             for r in range(cfg.replicates)]
    results = _pool_map(sweep_cell, tasks, cfg.workers)
    rows = [(rate, n, r, w) for (_, rate, n, r, _), (w, _) in zip(tasks, results)]
    out = SweepResult(rows, ref)
    if write:
        path = cfg.output_path()
        write_csv(path / "complexity_sweep.csv", ["mixture_rate", "sample_size", "seed", "w1"], rows)
        n_max = max(cfg.sample_sizes)
        for (_, rate, n, r, _), (_, est) in zip(tasks, results):
            if n == n_max and r == 0:
                emit_quantile_curve(path / f"quantile_curve_mix{rate:g}.csv", est, ref)
    return out


# ---------------------------------------------------------------------------
# quantile curves and the single-(s, a) sanity run


def emit_quantile_curve(path, model, reference: ReturnDistribution, state=None, action: int = 0,
                        n_levels: int = 99) -> Path:
    """CSV ``tau,estimated,ground_truth`` on the midpoint grid.

    ``model`` is either a fitted estimator, evaluated at ``(state, action)``, or
    a :class:`ReturnDistribution` of estimated samples.
    """
    taus = midpoint_levels(n_levels)
    if isinstance(model, ReturnDistribution):
        est = model.quantile(taus)
    else:
        est = quantile_curve(model, np.zeros(1) if state is None else state, action, taus)
    truth = reference.quantile(taus)
    return write_csv(path, ["tau", "estimated", "ground_truth"], zip(taus, est, truth))


@dataclass
class SanityResult:
    ks: List[float]
    inversions: List[float]


def sanity_replicate(task):
    cfg, r = task
    env = cfg.env.build()
    target = cfg.env.target_policy(env)
    data = collect_dataset(env, target, cfg.sample_sizes[0], replicate_rng(cfg, r, _DATA), as_list=False)
    net = dqpope_train(data, target, cfg.estimator("dqpope").train, replicate_rng(cfg, r, _TRAIN))
    rng = replicate_rng(cfg, r, _EVAL)
    state = env.reset(rng, 1)[0]
    fitted = sample_from_net(net, state, 0, cfg.ks_samples, rng)
    fresh = mc_return_distribution(env, target, cfg.ks_samples, rng)
    curve = quantile_curve(net, state, 0, midpoint_levels(99))
    return net, state, ks_statistic(fitted, fresh), float(np.mean(np.diff(curve) < 0)), fresh


def run_quantile_fit_sanity(cfg: ExperimentConfig, write: bool = True) -> SanityResult:
    """Train on a single (s, a) with a known reward law and compare by KS."""
    results = _pool_map(sanity_replicate, [(cfg, r) for r in range(cfg.replicates)], cfg.workers)
    out = SanityResult([k for _, _, k, _, _ in results], [i for _, _, _, i, _ in results])
    if write:
        path = cfg.output_path()
        write_csv(path / "quantile_fit_sanity.csv", ["replicate", "ks_statistic", "inversion_rate"],
                  [(r, k, i) for r, (k, i) in enumerate(zip(out.ks, out.inversions))])
        net, state, _, _, fresh = results[0]
        emit_quantile_curve(path / "quantile_curve.csv", net, fresh, state, 0)
    return out


# ---------------------------------------------------------------------------
# contraction suite


def contraction_trial(mdp: TabularMdp, eta1, eta2, p: int):
    """``(Wbar(eta1, eta2), Wbar(T eta1, T eta2))`` under ``d^pi``.

    Returns ``None`` when the pair coincides and the ratio is undefined.
    """
    nu = mdp.occupancy()
    before = wbar_p(mdp, nu, eta1, eta2, p)
    if before == 0.0:
        return None
    return before, wbar_p(mdp, nu, apply_bellman(mdp, eta1), apply_bellman(mdp, eta2), p)


@dataclass
class ContractionRow:
    gamma: float
    p: int
    trials: int
    skipped: int
    max_ratio: float
    bound: float
    passed: bool


def run_contraction_suite(cfg: ExperimentConfig, write: bool = True) -> List[ContractionRow]:
    """Random tabular trials of the contraction bound ``gamma^(1 - 1/(2p))``."""
    rows = []
    for gamma in cfg.gammas:
        for p in cfg.p_values:
            bound = gamma ** (1.0 - 1.0 / (2 * p))
            worst, skipped, ok = 0.0, 0, True
            for t in range(cfg.trials):
                rng = replicate_rng(cfg, t, _key(f"{gamma:.6f}"), p)
                mdp = random_mdp(rng, int(rng.integers(1, 5)), int(rng.integers(1, 4)), gamma)
                pair = contraction_trial(mdp, random_law_table(rng, mdp), random_law_table(rng, mdp), p)
                if pair is None:
                    skipped += 1
                    log.info("trial %d (gamma=%g, p=%d): identical laws, skipped", t, gamma, p)
                    continue
                before, after = pair
                ok &= after <= bound * before + 1e-9
                worst = max(worst, after / before)
            rows.append(ContractionRow(gamma, p, cfg.trials, skipped, worst, bound, bool(ok)))
    if write:
        write_csv(cfg.output_path() / "contraction.csv",
                  ["gamma", "p", "trials", "skipped", "max_ratio", "bound", "passed"],
                  [(r.gamma, r.p, r.trials, r.skipped, r.max_ratio, r.bound, r.passed) for r in rows])
    return rows


RUNNERS = {
    "toy-mse-table": run_toy_mse_table,
    "complexity-sweep": run_complexity_sweep,
    "tabular-contraction": run_contraction_suite,
    "quantile-fit-sanity": run_quantile_fit_sanity,
}


def run_experiment(cfg: ExperimentConfig):
    return RUNNERS[cfg.experiment](cfg)
