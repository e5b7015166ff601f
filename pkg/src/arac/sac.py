"""Soft actor-critic pieces: replay buffer, critic/value nets, losses, Adam."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .nets import MLP
from .policy import NfPolicy


class NonFiniteGradient(FloatingPointError):
    """Raised instead of applying an update with NaN/inf gradients."""


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


class Batch(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self):
        return self.s.shape[0]


class ReplayBuffer:
    """FIFO ring of transitions; storage grows on demand up to ``capacity``."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.state_dim = state_dim
        self.action_dim = action_dim
        self._alloc = 0
        self._s = self._a = self._r = self._s2 = self._d = None
        self._grow(min(self.capacity, 1024))
        self._next = 0
        self._size = 0
        self.total_added = 0

    def _grow(self, n):
        def resize(old, shape):
            new = np.zeros(shape)
            if old is not None:
                new[: old.shape[0]] = old
            return new
        self._s = resize(self._s, (n, self.state_dim))
        self._a = resize(self._a, (n, self.action_dim))
        self._r = resize(self._r, (n,))
        self._s2 = resize(self._s2, (n, self.state_dim))
        self._d = resize(self._d, (n,))
        self._alloc = n

    def __len__(self):
        return self._size

    def add(self, s, a, r, s_next, done) -> None:
        if self._size < self.capacity and self._next >= self._alloc:
            self._grow(min(self.capacity, 2 * self._alloc))
        i = self._next
        self._s[i] = s
        self._a[i] = a
        self._r[i] = r
        self._s2[i] = s_next
        self._d[i] = float(done)
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        self.total_added += 1

    def push(self, t: Transition) -> None:
        self.add(t.s, t.a, t.r, t.s_next, t.done)

    def oldest(self) -> Transition:
        i = self._next if self._size == self.capacity else 0
        return self[i]

    def __getitem__(self, i) -> Transition:
        return Transition(self._s[i].copy(), self._a[i].copy(), float(self._r[i]),
                          self._s2[i].copy(), bool(self._d[i]))

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform minibatch, no repeats inside one batch."""
        if self._size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        k = min(batch_size, self._size)
        idx = rng.choice(self._size, size=k, replace=False)
        return Batch(self._s[idx], self._a[idx], self._r[idx], self._s2[idx], self._d[idx])


class Critic:
    """``Q(s, a)``: tanh MLP on the concatenated state and action."""

    def __init__(self, state_dim, action_dim, hidden=(256, 256), rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.net = MLP([state_dim + action_dim, *hidden, 1], rng, name="q")

    @property
    def params(self):
        return self.net.params

    def __call__(self, states, actions, frozen=False) -> nx.Tensor:
        states = states if isinstance(states, nx.Tensor) else nx.constant(states)
        actions = actions if isinstance(actions, nx.Tensor) else nx.constant(actions)
        x = nx.concat([states, actions], axis=1)
        out = self.net(x, self.net.frozen() if frozen else None)
        return nx.sum(out, axis=1)


class ValueNet:
    """``V(s)``: tanh MLP on the state."""

    def __init__(self, state_dim, hidden=(256, 256), rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.net = MLP([state_dim, *hidden, 1], rng, name="v")

    @property
    def params(self):
        return self.net.params

    def __call__(self, states, frozen=False) -> nx.Tensor:
        states = states if isinstance(states, nx.Tensor) else nx.constant(states)
        out = self.net(states, self.net.frozen() if frozen else None)
        return nx.sum(out, axis=1)

    def clone(self) -> "ValueNet":
        return copy.deepcopy(self)


def _check_batch(states):
    if np.asarray(states.value if isinstance(states, nx.Tensor) else states).shape[0] == 0:
        raise ValueError("empty batch")


def _repeat(states: np.ndarray, k: int) -> np.ndarray:
    return states if k == 1 else np.repeat(states, k, axis=0)


def policy_loss_sac(policy: NfPolicy, states, critic: Critic, alpha: float,
                    rng: np.random.Generator | None = None, noise=None,
                    n_samples: int = 1) -> nx.Tensor:
    """``mean[alpha * log pi(a|s) - Q(s, a)]`` with ``a`` reparameterized.

    The critic enters as a constant; only policy parameters get gradients.
    """
    _check_batch(states)
    states = _repeat(np.asarray(states, dtype=np.float64), n_samples)
    actions, log_prob = policy.sample(states, rng, noise=noise)
    q = critic(states, actions, frozen=True)
    return nx.mean(alpha * log_prob - q)


def critic_loss(critic: Critic, v_target: ValueNet, batch: Batch, gamma: float) -> nx.Tensor:
    """MSE between ``Q(s, a)`` and ``r + gamma * (1 - done) * V_target(s')``."""
    _check_batch(batch.s)
    target = batch.r + gamma * (1.0 - batch.done) * v_target.net.forward_numpy(batch.s_next)[:, 0]
    return nx.mean(nx.square(critic(batch.s, batch.a) - nx.constant(target)))


def value_target(policy: NfPolicy, critic: Critic, states, alpha: float,
                 rng: np.random.Generator | None = None, noise=None) -> np.ndarray:
    """One-sample estimate of ``E_a[Q(s, a) - alpha * log pi(a|s)]``."""
    actions, log_prob = policy.sample_values(states, rng, noise=noise)
    q = critic.net.forward_numpy(np.concatenate([states, actions], axis=1))[:, 0]
    return q - alpha * log_prob


def value_loss(value_net: ValueNet, policy: NfPolicy, critic: Critic, states, alpha: float,
               rng: np.random.Generator | None = None, noise=None) -> nx.Tensor:
    """``0.5 * mean[(V(s) - target)^2]`` with the target held constant."""
    _check_batch(states)
    states = np.asarray(states, dtype=np.float64)
    target = value_target(policy, critic, states, alpha, rng, noise)
    return 0.5 * nx.mean(nx.square(value_net(states) - nx.constant(target)))


class Adam:
    """Adam over a fixed list of parameter tensors (updated in place).

    The parameters are re-seated as views into one flat buffer so a step is
    a handful of vector operations; build one optimizer per parameter set.
    """

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        sizes = [p.value.size for p in self.params]
        self.flat = np.concatenate([p.value.ravel() for p in self.params]) if sizes else np.zeros(0)
        offset = 0
        for p, n in zip(self.params, sizes):
            p.value = self.flat[offset:offset + n].reshape(p.value.shape)
            offset += n
        self.m = np.zeros_like(self.flat)
        self.v = np.zeros_like(self.flat)

    def step(self, grads) -> None:
        g = np.concatenate([np.ravel(x) for x in grads]) if grads else np.zeros(0)
        if g.shape != self.flat.shape:
            raise ValueError("gradient count/shape does not match the parameters")
        if not np.isfinite(g).all():
            raise NonFiniteGradient("non-finite gradient; update skipped")
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        m, v = self.m, self.v
        m *= self.b1
        m += (1.0 - self.b1) * g
        v *= self.b2
        v += (1.0 - self.b2) * (g * g)
        self.flat -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def minimize(self, loss: nx.Tensor) -> float:
        """Backprop ``loss`` into this optimizer's parameters and step."""
        self.step(nx.backward(loss, self.params))
        return loss.item()


def optimizer_step(params, grads, state: Adam | None = None, lr=3e-4) -> Adam:
    """Functional wrapper: one Adam step, returning the (possibly new) state."""
    if state is None:
        state = Adam(params, lr=lr)
    state.step(grads)
    return state


def polyak_update(target_params, source_params, tau: float) -> None:
    """``target <- (1 - tau) * target + tau * source`` in place."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    for t, s in zip(target_params, source_params):
        t.value *= 1.0 - tau
        t.value += tau * s.value
