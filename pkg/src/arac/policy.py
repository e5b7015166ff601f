"""Normalizing-flow policies: Gaussian noise, state embedding, radial chain.

An action is produced as ``a = chain(mu(s) + sigma(s) * a0)`` with
``a0 ~ N(0, I)``.  Sampling is reparameterized, and ``log_prob`` inverts
the chain so densities can be evaluated at arbitrary actions, which is what
KL estimates against another policy need.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import numerics as nx
from .flows import (FlowChain, RadialFlowParams, chain_forward, chain_forward_values,
                    chain_inverse, chain_inverse_layers, chain_inverse_values,
                    chain_inverse_vjp)
from .nets import MLP

LOG_2PI = math.log(2.0 * math.pi)
SNAPSHOT_FORMAT = "arac.policy/1"


class NfPolicy:
    """Mean network, noise scale (fixed or state-conditional) and flow chain.

    ``sigma_mode="fixed"`` shares one scalar ``sigma`` across dimensions;
    ``"learned"`` adds a network emitting ``log sigma(s)`` per dimension,
    initialised around ``log(sigma)``.
    """

    def __init__(self, state_dim: int, action_dim: int, n_flows: int = 3,
                 hidden: int = 256, sigma_mode: str = "fixed", sigma: float = 0.6,
                 rng: np.random.Generator | None = None, mean_scale: float = 0.1,
                 flow_center_scale: float = 1.0, flow_beta_scale: float = 0.1):
        if sigma_mode not in ("fixed", "learned"):
            raise ValueError(f"unknown sigma_mode {sigma_mode!r}")
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        rng = np.random.default_rng(0) if rng is None else rng
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.hidden = hidden
        self.sigma_mode = sigma_mode
        self.sigma = float(sigma)
        self.mean_net = MLP([state_dim, hidden, action_dim], rng, out_scale=mean_scale,
                            name="mean")
        self.log_sigma_net = None
        if sigma_mode == "learned":
            self.log_sigma_net = MLP([state_dim, hidden, action_dim], rng, out_scale=0.01,
                                     name="log_sigma")
            self.log_sigma_net.params[-1].value[...] = math.log(sigma)
        self.chain = FlowChain.init(n_flows, action_dim, rng, center_scale=flow_center_scale,
                                    beta_scale=flow_beta_scale)

    # parameter groups ---------------------------------------------------------

    @property
    def n_flows(self) -> int:
        return len(self.chain)

    def base_params(self) -> list:
        """Parameters of the state embedding (mean and noise scale)."""
        out = list(self.mean_net.params)
        if self.log_sigma_net is not None:
            out += self.log_sigma_net.params
        return out

    def flow_params(self) -> list:
        return self.chain.params()

    def params(self) -> list:
        return self.base_params() + self.flow_params()

    # densities ----------------------------------------------------------------

    def embed(self, states, detach_base: bool = False):
        """``(mu, log_sigma)``; ``log_sigma`` is a scalar tensor when fixed."""
        states = _states(states)
        mu = self.mean_net(states)
        if self.log_sigma_net is None:
            log_sigma = nx.constant(math.log(self.sigma))
        else:
            log_sigma = self.log_sigma_net(states)
        if detach_base:
            mu, log_sigma = nx.stop_gradient(mu), nx.stop_gradient(log_sigma)
        return mu, log_sigma

    def _sum_log_sigma(self, log_sigma, n):
        if log_sigma.value.ndim == 0:
            return log_sigma * float(self.action_dim)
        return nx.sum(log_sigma, axis=1)

    def sample(self, states, rng: np.random.Generator | None = None, noise=None,
               detach_base: bool = False):
        """Reparameterized ``(actions, log_prob)`` for a batch of states.

        ``noise`` (shape ``(n, d)``) replaces the draw from ``rng``.  With
        ``detach_base`` only the flow layers see gradients.
        """
        states = _states(states)
        n = states.shape[0]
        if noise is None:
            noise = rng.standard_normal((n, self.action_dim))
        noise = np.asarray(noise, dtype=np.float64).reshape(n, self.action_dim)
        mu, log_sigma = self.embed(states, detach_base)
        z = mu + nx.constant(noise) * nx.exp(log_sigma)
        actions, logdet = chain_forward(self.chain, z)
        base = -0.5 * np.sum(noise * noise, axis=1) - 0.5 * self.action_dim * LOG_2PI
        log_prob = nx.constant(base) - self._sum_log_sigma(log_sigma, n) - logdet
        return actions, log_prob

    def log_prob(self, states, actions, detach_base: bool = False) -> nx.Tensor:
        """Exact log-density of ``actions`` (tensor or array, shape ``(n, d)``)."""
        states = _states(states)
        n = states.shape[0]
        actions = actions if isinstance(actions, nx.Tensor) else nx.constant(
            np.asarray(actions, dtype=np.float64).reshape(n, self.action_dim))
        if getattr(self, "_const", False) and not states.requires_grad:
            return self._frozen_log_prob(states.value, actions)
        z, logdet_inv = chain_inverse(self.chain, actions)
        mu, log_sigma = self.embed(states, detach_base)
        if log_sigma.value.ndim == 0:
            a0 = (z - mu) * float(math.exp(-log_sigma.item()))
        else:
            a0 = (z - mu) * nx.exp(-log_sigma)
        base = -0.5 * nx.sum(nx.square(a0), axis=1) - 0.5 * self.action_dim * LOG_2PI
        return base - self._sum_log_sigma(log_sigma, n) + logdet_inv

    def _frozen_log_prob(self, states: np.ndarray, actions: nx.Tensor) -> nx.Tensor:
        """One fused node; only the actions can receive gradients."""
        z, logdet_inv, layers = chain_inverse_layers(self.chain, actions.value)
        mu, log_sigma = self._embed_values(states)
        inv_sigma = np.exp(-log_sigma)
        a0 = (z - mu) * inv_sigma
        base = -0.5 * np.sum(a0 * a0, axis=1) - 0.5 * self.action_dim * LOG_2PI
        value = base - log_sigma.sum(axis=1) + logdet_inv

        def adj(g):
            g_z = -g[:, None] * a0 * inv_sigma
            return (chain_inverse_vjp(layers, g_z, g),)
        return nx.custom(value, (actions,), adj)

    def deterministic_action(self, states) -> nx.Tensor:
        """Flow image of the mean (noise set to zero)."""
        mu, _ = self.embed(states)
        return chain_forward(self.chain, mu)[0]

    # fast, graph-free acting --------------------------------------------------

    def frozen(self) -> "NfPolicy":
        """A view with constant parameters sharing this policy's arrays."""
        view = object.__new__(NfPolicy)
        view.__dict__.update(self.__dict__)
        view.mean_net = _const_mlp(self.mean_net)
        view.log_sigma_net = None if self.log_sigma_net is None else _const_mlp(self.log_sigma_net)
        view.chain = self.chain.frozen()
        view._const = True
        return view

    def _embed_values(self, states: np.ndarray):
        mu = self.mean_net.forward_numpy(states)
        if self.log_sigma_net is None:
            return mu, np.full_like(mu, math.log(self.sigma))
        return mu, self.log_sigma_net.forward_numpy(states)

    def sample_values(self, states, rng: np.random.Generator, noise=None) -> tuple:
        """Plain-array ``(actions, log_prob)``; same numbers as :meth:`sample`."""
        states = np.asarray(states, dtype=np.float64).reshape(-1, self.state_dim)
        n = states.shape[0]
        if noise is None:
            noise = rng.standard_normal((n, self.action_dim))
        mu, log_sigma = self._embed_values(states)
        z = mu + noise * np.exp(log_sigma)
        a, logdet = chain_forward_values(self.chain, z, with_logdet=True)
        base = -0.5 * np.sum(noise * noise, axis=1) - 0.5 * self.action_dim * LOG_2PI
        return a, base - log_sigma.sum(axis=1) - logdet

    def log_prob_values(self, states, actions) -> np.ndarray:
        """Plain-array :meth:`log_prob`."""
        states = np.asarray(states, dtype=np.float64).reshape(-1, self.state_dim)
        actions = np.asarray(actions, dtype=np.float64).reshape(-1, self.action_dim)
        z, logdet_inv = chain_inverse_values(self.chain, actions)
        mu, log_sigma = self._embed_values(states)
        a0 = (z - mu) * np.exp(-log_sigma)
        base = -0.5 * np.sum(a0 * a0, axis=1) - 0.5 * self.action_dim * LOG_2PI
        return base - log_sigma.sum(axis=1) + logdet_inv

    def act(self, state, rng: np.random.Generator | None = None, with_noise: bool = True):
        """One action (numpy) for one state; ``with_noise=False`` uses zero noise."""
        state = np.asarray(state, dtype=np.float64).reshape(1, self.state_dim)
        z = self.mean_net.forward_numpy(state)
        if with_noise:
            noise = rng.standard_normal((1, self.action_dim))
            if self.log_sigma_net is None:
                z = z + noise * self.sigma
            else:
                z = z + noise * np.exp(self.log_sigma_net.forward_numpy(state))
        return chain_forward_values(self.chain, z)[0]

    # persistence --------------------------------------------------------------

    def snapshot(self) -> "PolicySnapshot":
        return PolicySnapshot.from_policy(self)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p.value).tobytes())
        return h.hexdigest()


class _ConstMLP(MLP):
    def __init__(self, src: MLP):  # noqa: D401 - no re-init of weights
        self.sizes = src.sizes
        self.params = [nx.constant(p.value) for p in src.params]


def _const_mlp(mlp: MLP) -> MLP:
    return _ConstMLP(mlp)


def _states(states) -> nx.Tensor:
    if isinstance(states, nx.Tensor):
        return states
    arr = np.asarray(states, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    return nx.constant(arr)


@dataclass(frozen=True, eq=False)
class PolicySnapshot:
    """Immutable copy of every policy parameter plus the architecture."""

    state_dim: int
    action_dim: int
    hidden: int
    sigma_mode: str
    sigma: float
    mean_net: tuple
    log_sigma_net: tuple | None
    flows: tuple

    @classmethod
    def from_policy(cls, policy: NfPolicy) -> "PolicySnapshot":
        def freeze(arrays):
            out = []
            for a in arrays:
                a = np.array(a, dtype=np.float64)
                a.setflags(write=False)
                out.append(a)
            return tuple(out)
        return cls(
            state_dim=policy.state_dim, action_dim=policy.action_dim, hidden=policy.hidden,
            sigma_mode=policy.sigma_mode, sigma=policy.sigma,
            mean_net=freeze(policy.mean_net.get_flat()),
            log_sigma_net=None if policy.log_sigma_net is None
            else freeze(policy.log_sigma_net.get_flat()),
            flows=tuple(freeze(p.value for p in layer.params()) for layer in policy.chain.layers),
        )

    @cached_property
    def policy(self) -> NfPolicy:
        """Constant-parameter policy built once per snapshot."""
        frozen = self.to_policy().frozen()
        frozen.chain.pin()
        return frozen

    def to_policy(self) -> NfPolicy:
        policy = NfPolicy(self.state_dim, self.action_dim, n_flows=len(self.flows),
                          hidden=self.hidden, sigma_mode=self.sigma_mode, sigma=self.sigma)
        policy.mean_net.set_flat(self.mean_net)
        if self.log_sigma_net is not None:
            policy.log_sigma_net.set_flat(self.log_sigma_net)
        for layer, values in zip(policy.chain.layers, self.flows):
            for p, v in zip(layer.params(), values):
                p.value[...] = v
        return policy

    def to_dict(self) -> dict:
        return {
            "format": SNAPSHOT_FORMAT,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "hidden": self.hidden,
            "n_flows": len(self.flows),
            "sigma_mode": self.sigma_mode,
            "sigma": self.sigma,
            "mean_net": [_encode(a) for a in self.mean_net],
            "log_sigma_net": None if self.log_sigma_net is None
            else [_encode(a) for a in self.log_sigma_net],
            "flows": [[_encode(a) for a in layer] for layer in self.flows],
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "PolicySnapshot":
        if blob.get("format") != SNAPSHOT_FORMAT:
            raise ValueError(f"not a policy snapshot: format={blob.get('format')!r}")

        def arrays(items):
            out = []
            for item in items:
                a = _decode(item)
                a.setflags(write=False)
                out.append(a)
            return tuple(out)
        flows = tuple(arrays(layer) for layer in blob["flows"])
        if len(flows) != blob["n_flows"]:
            raise ValueError("flow count does not match n_flows")
        return cls(
            state_dim=int(blob["state_dim"]), action_dim=int(blob["action_dim"]),
            hidden=int(blob["hidden"]), sigma_mode=blob["sigma_mode"],
            sigma=float(blob["sigma"]), mean_net=arrays(blob["mean_net"]),
            log_sigma_net=None if blob["log_sigma_net"] is None
            else arrays(blob["log_sigma_net"]),
            flows=flows,
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "PolicySnapshot":
        return cls.from_dict(json.loads(text))


def _encode(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}


def _decode(item: dict) -> np.ndarray:
    data = np.asarray(item["data"], dtype=np.float64)
    shape = tuple(item["shape"])
    if int(np.prod(shape)) != data.size:
        raise ValueError(f"shape {shape} does not match {data.size} values")
    return data.reshape(shape)


__all__ = ["NfPolicy", "PolicySnapshot", "RadialFlowParams", "LOG_2PI"]
