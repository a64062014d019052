"""Fully-connected ReLU networks with explicit backpropagation and Adam.

One network class covers every estimator in the package:

* ``concat`` -- the quantile level is appended to ``(state, one_hot(action))``.
* ``cosine`` -- the level is embedded as ``relu(cos(i*pi*tau) @ H + b)`` and
  multiplied element-wise into the first hidden layer (implicit-quantile style).
* ``none``   -- the level is ignored; used for value, fixed-quantile and
  categorical heads, which only differ in output width.

Parameters live in a flat ``dict`` of float64 arrays so optimisers and target
updates can treat them uniformly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from .errors import InputError

EMBEDDING_MODES = ("concat", "cosine", "none")
INITS = ("he-uniform", "lecun-uniform")

Params = Dict[str, np.ndarray]


def _relu(x):
    return np.maximum(x, 0.0)


@dataclass
class QuantileNet:
    """ReLU network ``f(s, a, tau)`` with optional output clamp.

    ``layer_widths`` runs from the encoded input width to the output width.
    The input width is ``state_dim + n_actions`` plus one extra column in
    ``concat`` mode.
    """

    layer_widths: list
    state_dim: int
    n_actions: int
    embedding_mode: str = "concat"
    cosine_order: int = 64
    output_clip: Optional[float] = None
    params: Params = field(default_factory=dict)

    def __post_init__(self):
        if self.embedding_mode not in EMBEDDING_MODES:
            raise InputError(f"unknown embedding mode {self.embedding_mode!r}")
        expected = self.state_dim + self.n_actions + (self.embedding_mode == "concat")
        if self.layer_widths[0] != expected:
            raise InputError(
                f"input width {self.layer_widths[0]} != {expected} for mode {self.embedding_mode}"
            )
        if self.embedding_mode == "cosine" and len(self.layer_widths) < 3:
            raise InputError("cosine mode needs at least one hidden layer")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def output_width(self) -> int:
        return self.layer_widths[-1]

    def copy(self) -> "QuantileNet":
        return QuantileNet(
            list(self.layer_widths), self.state_dim, self.n_actions, self.embedding_mode,
            self.cosine_order, self.output_clip, {k: v.copy() for k, v in self.params.items()},
        )

    def same_architecture(self, other: "QuantileNet") -> bool:
        return (
            list(self.layer_widths) == list(other.layer_widths)
            and self.embedding_mode == other.embedding_mode
            and self.cosine_order == other.cosine_order
            and self.state_dim == other.state_dim
            and self.n_actions == other.n_actions
        )

    # -- forward / backward ------------------------------------------------

    def _encode(self, states, actions, taus):
        states = np.asarray(states, dtype=float).reshape(-1, self.state_dim)
        actions = np.asarray(actions, dtype=int).reshape(-1)
        if actions.size and (actions.min() < 0 or actions.max() >= self.n_actions):
            raise InputError("action id out of range")
        one_hot = np.zeros((len(actions), self.n_actions))
        one_hot[np.arange(len(actions)), actions] = 1.0
        cols = [states, one_hot]
        tau = None
        if self.embedding_mode != "none":
            tau = np.asarray(taus, dtype=float).reshape(-1)
            if tau.size and not (np.all(tau > 0.0) and np.all(tau < 1.0)):
                raise InputError("quantile level must lie in (0, 1)")
            if self.embedding_mode == "concat":
                cols.append(tau[:, None])
        return np.concatenate(cols, axis=1), tau

    def _forward(self, states, actions, taus):
        x, tau = self._encode(states, actions, taus)
        cache = {"inputs": [], "pre": []}
        h = x
        for i in range(self.n_layers):
            cache["inputs"].append(h)
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            cache["pre"].append(z)
            if i == self.n_layers - 1:
                h = z
                break
            h = _relu(z)
            if i == 0 and self.embedding_mode == "cosine":
                feats = np.cos(np.pi * np.outer(tau, np.arange(1, self.cosine_order + 1)))
                zphi = feats @ self.params["H"] + self.params["bh"]
                phi = _relu(zphi)
                cache.update(cos=feats, zphi=zphi, phi=phi, psi=h)
                h = h * phi
        raw = h
        cache["raw"] = raw
        if self.output_clip is not None:
            f = self.output_clip
            h = np.clip(raw, -f, f)
        return h, cache

    def forward(self, states, actions, taus=None) -> np.ndarray:
        """Batched evaluation; returns shape (B,) for scalar heads, (B, out) otherwise."""
        out, _ = self._forward(states, actions, taus)
        return out[:, 0] if self.output_width == 1 else out

    def value_at(self, state, action: int, tau: Optional[float] = None) -> float:
        return float(self.forward([state], [action], None if tau is None else [tau])[0])

    def backward(self, states, actions, taus, upstream) -> Params:
        """Gradients of ``sum(upstream * forward)`` with respect to every parameter."""
        out, cache = self._forward(states, actions, taus)
        g = np.asarray(upstream, dtype=float).reshape(out.shape)
        if self.output_clip is not None:
            g = g * (np.abs(cache["raw"]) <= self.output_clip)
        grads: Params = {}
        dz = g
        for i in reversed(range(self.n_layers)):
            h_in = cache["inputs"][i]
            grads[f"W{i}"] = h_in.T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            if i == 0:
                break
            dh = dz @ self.params[f"W{i}"].T
            if i == 1 and self.embedding_mode == "cosine":
                dpsi = dh * cache["phi"]
                dzphi = dh * cache["psi"] * (cache["zphi"] > 0)
                grads["H"] = cache["cos"].T @ dzphi
                grads["bh"] = dzphi.sum(axis=0)
                dh = dpsi
            dz = dh * (cache["pre"][i - 1] > 0)
        return grads

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "state_dim": self.state_dim,
            "n_actions": self.n_actions,
            "embedding_mode": self.embedding_mode,
            "cosine_order": self.cosine_order,
            "output_clip": self.output_clip,
            "params": {k: v.tolist() for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QuantileNet":
        params = {k: np.asarray(v, dtype=float) for k, v in data["params"].items()}
        net = cls(
            list(data["layer_widths"]), data["state_dim"], data["n_actions"],
            data["embedding_mode"], data["cosine_order"], data["output_clip"], params,
        )
        for name, shape in _param_shapes(net).items():
            if params.get(name) is None or params[name].shape != shape:
                raise InputError(f"parameter {name} missing or mis-shaped")
        return net

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "QuantileNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _param_shapes(net: QuantileNet) -> Dict[str, tuple]:
    w = net.layer_widths
    shapes = {}
    for i in range(net.n_layers):
        shapes[f"W{i}"] = (w[i], w[i + 1])
        shapes[f"b{i}"] = (w[i + 1],)
    if net.embedding_mode == "cosine":
        shapes["H"] = (net.cosine_order, w[1])
        shapes["bh"] = (w[1],)
    return shapes


def make_net(
    state_dim: int,
    n_actions: int,
    hidden: Sequence[int],
    rng: np.random.Generator,
    embedding_mode: str = "concat",
    output_width: int = 1,
    cosine_order: int = 64,
    output_clip: Optional[float] = None,
    init: str = "he-uniform",
) -> QuantileNet:
    """Build a network with freshly initialised parameters.

    ``he-uniform``: weights ~ U(+-sqrt(6 / fan_in)), zero biases.
    ``lecun-uniform``: weights and biases ~ U(+-1 / sqrt(fan_in)), the usual
    default of deep-learning frameworks for linear layers.
    """
    if init not in INITS:
        raise InputError(f"unknown init {init!r}")
    in_width = state_dim + n_actions + (embedding_mode == "concat")
    widths = [in_width, *hidden, output_width]
    net = QuantileNet(widths, state_dim, n_actions, embedding_mode, cosine_order, output_clip)
    shapes = _param_shapes(net)
    fan_in = {}
    for name, shape in shapes.items():
        if not name.startswith("b"):
            fan_in[name] = shape[0]
    for name, shape in shapes.items():
        weight = "W" + name[1:] if name.startswith("b") and name != "bh" else ("H" if name == "bh" else name)
        if init == "he-uniform":
            bound = 0.0 if name.startswith("b") else np.sqrt(6.0 / fan_in[weight])
        else:
            bound = 1.0 / np.sqrt(fan_in[weight])
        net.params[name] = rng.uniform(-bound, bound, size=shape) if bound else np.zeros(shape)
    return net


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(net: QuantileNet, grads: Params, opt: AdamState):
    """Bias-corrected Adam update, applied in place. Returns ``(net, opt)``."""
    if set(grads) != set(net.params):
        raise RuntimeError("gradient keys do not match network parameters")
    opt.step += 1
    c1 = 1.0 - opt.beta1 ** opt.step
    c2 = 1.0 - opt.beta2 ** opt.step
    for name, g in grads.items():
        p = net.params[name]
        if g.shape != p.shape:
            raise RuntimeError(f"gradient shape mismatch for {name}: {g.shape} vs {p.shape}")
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return net, opt


def soft_update(target: QuantileNet, online: QuantileNet, rho: float) -> QuantileNet:
    """``target <- (1 - rho) * target + rho * online``, in place."""
    if not 0.0 <= rho <= 1.0:
        raise InputError("rho must lie in [0, 1]")
    if not target.same_architecture(online):
        raise RuntimeError("soft_update between different architectures")
    for name, p in target.params.items():
        if rho == 1.0:
            p[...] = online.params[name]
        elif rho > 0.0:
            p *= 1.0 - rho
            p += rho * online.params[name]
    return target


def gradient_check(net: QuantileNet, states, actions, taus, upstream, rng: np.random.Generator,
                   n_params: int = 50, h: float = 1e-5) -> float:
    """Largest relative error between :meth:`QuantileNet.backward` and central differences.

    Checks ``n_params`` randomly chosen scalar parameters. The relative error is
    ``|a - n| / max(|a| + |n|, 1e-8)``; the floor keeps
    parameters behind inactive units (both gradients zero up to rounding) from
    reporting spurious failures.
    """
    upstream = np.asarray(upstream, dtype=float)
    grads = net.backward(states, actions, taus, upstream)

    def objective():
        out, _ = net._forward(states, actions, taus)
        return float(np.sum(upstream.reshape(out.shape) * out))

    names = sorted(net.params)
    sizes = np.array([net.params[k].size for k in names])
    worst = 0.0
    for _ in range(n_params):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        p = net.params[name].reshape(-1)
        i = int(rng.integers(p.size))
        old = p[i]
        p[i] = old + h
        up = objective()
        p[i] = old - h
        down = objective()
        p[i] = old
        numeric = (up - down) / (2 * h)
        analytic = grads[name].reshape(-1)[i]
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-8))
    return worst
