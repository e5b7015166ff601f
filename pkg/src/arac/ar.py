"""Attraction-repulsion between a policy and archived policies.

The AR term is ``-(1/n) * sum_j beta_j * KL(pi || pi_j)`` over ``n``
archived policies, with ``beta_j`` derived from their fitness.  KL is
estimated by Monte Carlo on reparameterized samples of ``pi``; inside the
AR term the base embedding of ``pi`` (mean and noise scale) is detached so
only the flow layers are pushed around.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .policy import NfPolicy, PolicySnapshot
from .sac import Critic, policy_loss_sac

log = logging.getLogger(__name__)

PROACTIVE = "proactive"
REACTIVE = "reactive"


@dataclass(frozen=True)
class ArStrategy:
    kind: str = PROACTIVE
    lambda_ar: float = 1.0
    n_kl_samples: int = 1
    n_archive_samples: int = 5
    proactive_signed: bool = False

    def __post_init__(self):
        if self.kind not in (PROACTIVE, REACTIVE):
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.lambda_ar < 0:
            raise ValueError("lambda_ar must be >= 0")
        if self.n_kl_samples < 1 or self.n_archive_samples < 1:
            raise ValueError("sample counts must be positive")

    def beta(self, f: float, stats: "FitnessStats") -> float:
        if self.kind == PROACTIVE:
            return beta_proactive(f, stats, signed=self.proactive_signed)
        return beta_reactive(f, stats)


@dataclass(frozen=True)
class FitnessStats:
    f_min: float
    f_max: float

    def __post_init__(self):
        if self.f_min > self.f_max:
            raise ValueError("f_min > f_max")

    @classmethod
    def of(cls, fitnesses: Sequence[float]) -> "FitnessStats":
        return cls(float(min(fitnesses)), float(max(fitnesses)))

    def relative(self, f: float) -> float | None:
        span = self.f_max - self.f_min
        if span == 0.0:
            return None
        return (f - self.f_min) / span


def beta_proactive(f: float, stats: FitnessStats, signed: bool = False) -> float:
    """``-2 * (rel - 1)``: 2 at ``f_min``, 0 at ``f_max``.

    ``signed=True`` switches to ``-(2 * rel - 1)``, which runs from +1
    (repel the worst) to -1 (attract the best).
    """
    rel = stats.relative(f)
    if rel is None:
        return 0.0
    # written so the endpoints come out as +0.0, never -0.0
    if signed:
        return 1.0 - 2.0 * rel
    return 2.0 * (1.0 - rel)


def beta_reactive(f: float, stats: FitnessStats) -> float:
    """``1 - rel``: repulsion from low-fitness policies only."""
    rel = stats.relative(f)
    if rel is None:
        return 0.0
    return 1.0 - rel


def _as_policy(p) -> NfPolicy:
    if isinstance(p, PolicySnapshot):
        return p.policy
    return p


def _tile(states, k):
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 1:
        states = states[None, :]
    return states if k == 1 else np.repeat(states, k, axis=0)


def kl_mc(pi: NfPolicy, pi_prime, states, n_kl_samples: int = 1,
          rng: np.random.Generator | None = None, noise=None,
          detach_base: bool = False) -> nx.Tensor:
    """Monte Carlo ``KL(pi || pi_prime)`` averaged over states and samples.

    Gradients flow through the samples of ``pi`` and its log-density;
    ``pi_prime`` is evaluated as a constant.
    """
    other = _as_policy(pi_prime)
    if isinstance(other, NfPolicy) and other is pi:
        other = pi.frozen()
    tiled = _tile(states, n_kl_samples)
    if tiled.shape[0] == 0:
        raise ValueError("empty state batch")
    actions, log_p = pi.sample(tiled, rng, noise=noise, detach_base=detach_base)
    log_q = other.frozen().log_prob(tiled, actions)
    return nx.mean(log_p - log_q)


def kl_mc_stats(pi: NfPolicy, pi_prime, states, n_kl_samples: int,
                rng: np.random.Generator) -> tuple:
    """``(estimate, standard error)`` of the Monte Carlo KL, as floats."""
    other = _as_policy(pi_prime)
    tiled = _tile(states, n_kl_samples)
    actions, log_p = pi.sample_values(tiled, rng)
    terms = log_p - other.log_prob_values(tiled, actions)
    stderr = float(terms.std(ddof=1) / math.sqrt(terms.size)) if terms.size > 1 else math.inf
    return float(terms.mean()), stderr


def archive_betas(archive_sample, strategy: ArStrategy) -> list:
    stats = FitnessStats.of([f for _, f in archive_sample])
    return [strategy.beta(f, stats) for _, f in archive_sample]


def ar_loss(pi: NfPolicy, archive_sample, states, strategy: ArStrategy,
            rng: np.random.Generator | None = None, noise=None,
            return_kl: bool = False):
    """``-(1/n) * sum_j beta_j * KL(pi || pi_j)`` on flow parameters only.

    One batch of samples from ``pi`` is shared by every archived policy.
    With ``return_kl`` the mean (unweighted) KL estimate is returned too.
    """
    if not archive_sample:
        log.debug("ar_loss: empty archive sample, AR is a no-op")
        zero = nx.constant(0.0)
        return (zero, math.nan) if return_kl else zero
    betas = archive_betas(archive_sample, strategy)
    tiled = _tile(states, strategy.n_kl_samples)
    actions, log_p = pi.sample(tiled, rng, noise=noise, detach_base=True)
    mean_log_p = nx.mean(log_p)
    n = len(archive_sample)
    # repeated draws of one entry share the same samples of pi: merge them
    groups = {}
    for (snap, _), beta in zip(archive_sample, betas):
        key = id(snap)
        if key in groups:
            groups[key][1] += beta
            groups[key][2] += 1
        else:
            groups[key] = [snap, beta, 1]
    loss = nx.constant(0.0)
    kl_sum = 0.0
    for snap, beta, count in groups.values():
        if beta == 0.0 and not return_kl:
            continue
        kl = mean_log_p - nx.mean(_as_policy(snap).log_prob(tiled, actions))
        kl_sum += count * kl.item()
        if beta != 0.0:
            loss = loss - (beta / n) * kl
    if return_kl:
        return loss, kl_sum / n
    return loss


def combined_policy_loss(pi: NfPolicy, states, critic: Critic, alpha: float,
                         archive_sample, strategy: ArStrategy,
                         rng: np.random.Generator | None = None,
                         sac_noise=None, ar_noise=None, return_parts: bool = False):
    """SAC policy loss plus ``lambda_ar`` times the AR loss."""
    sac = policy_loss_sac(pi, states, critic, alpha, rng, noise=sac_noise)
    if strategy.lambda_ar == 0.0 or not archive_sample:
        return (sac, sac, nx.constant(0.0), math.nan) if return_parts else sac
    ar, kl = ar_loss(pi, archive_sample, states, strategy, rng, noise=ar_noise,
                     return_kl=True)
    total = sac + strategy.lambda_ar * ar
    return (total, sac, ar, kl) if return_parts else total


def mean_pairwise_kl(policies, states, actions=None, n_samples: int = 500,
                     rng: np.random.Generator | None = None) -> float:
    """Average Monte Carlo ``KL(pi_i || pi_j)`` over ordered pairs ``i != j``
    and over ``states``.

    ``actions[i][k]`` may hold pre-drawn samples of policy ``i`` at state
    ``k`` (shape ``(n, d)``); otherwise ``n_samples`` are drawn from ``rng``.
    """
    policies = [_as_policy(p) for p in policies]
    if len(policies) < 2:
        raise ValueError("need at least two policies")
    states = np.asarray(states, dtype=np.float64)
    total, count = 0.0, 0
    for k, state in enumerate(states):
        for i, pi in enumerate(policies):
            if actions is None:
                a = pi.sample_values(np.repeat(state[None, :], n_samples, axis=0), rng)[0]
            else:
                a = np.asarray(actions[i][k], dtype=np.float64)
            s = np.repeat(state[None, :], a.shape[0], axis=0)
            log_p = pi.log_prob_values(s, a)
            for j, other in enumerate(policies):
                if j != i:
                    total += float(np.mean(log_p - other.log_prob_values(s, a)))
                    count += 1
    return total / count
