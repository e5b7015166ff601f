"""Imitate a target density while being pushed away from a repulsive one.

A single flow policy on the plane (constant state) minimises
``KL(pi || target) - beta_t * KL(pi || repulsive) + l1_weight * |flow params|``
with ``beta_t = beta0 / (t + 1)``.  Densities are rasterised on a square
grid at regular intervals so the shapes can be compared across flow counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .ar import kl_mc, kl_mc_stats
from .policy import NfPolicy
from .sac import Adam, NonFiniteGradient

TARGET_MEAN = (3.0, 3.0)
REPULSIVE_MEAN = (-2.0, -2.0)
DIDACTIC_SIGMA = 0.7
EXTENT = (-6.0, 6.0)


def gaussian_policy(mean, sigma: float, state_dim: int = 1) -> NfPolicy:
    """A frozen-style zero-flow policy whose density is ``N(mean, sigma^2 I)``
    for every state."""
    mean = np.asarray(mean, dtype=np.float64)
    pi = NfPolicy(state_dim, mean.size, n_flows=0, hidden=1, sigma=sigma,
                  rng=np.random.default_rng(0))
    w_out, b_out = pi.mean_net.params[-2], pi.mean_net.params[-1]
    w_out.value[...] = 0.0
    b_out.value[...] = mean
    return pi.frozen()


def beta_schedule(t: int, beta0: float = 10.0) -> float:
    return beta0 / (t + 1)


@dataclass
class DidacticResult:
    policy: NfPolicy
    extent: tuple
    resolution: int
    snapshot_steps: list = field(default_factory=list)
    densities: list = field(default_factory=list)
    kl_target: list = field(default_factory=list)
    kl_repulsive: list = field(default_factory=list)
    skipped_steps: int = 0

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(self.extent[0], self.extent[1], self.resolution)

    @property
    def cell_area(self) -> float:
        h = (self.extent[1] - self.extent[0]) / (self.resolution - 1)
        return h * h

    def mass_within(self, center, radius: float, snapshot: int = -1) -> float:
        """Grid-integrated probability inside a disc."""
        x = self.axis
        xx, yy = np.meshgrid(x, x, indexing="ij")
        inside = (xx - center[0]) ** 2 + (yy - center[1]) ** 2 <= radius * radius
        return float(np.sum(self.densities[snapshot][inside]) * self.cell_area)

    def to_dict(self) -> dict:
        return {
            "extent": list(self.extent),
            "resolution": self.resolution,
            "axis": self.axis.tolist(),
            "snapshot_steps": list(self.snapshot_steps),
            "densities": [d.tolist() for d in self.densities],
            "kl_target": list(self.kl_target),
            "kl_repulsive": list(self.kl_repulsive),
            "final_kl_target": self.kl_target[-1] if self.kl_target else None,
            "final_kl_repulsive": self.kl_repulsive[-1] if self.kl_repulsive else None,
            "n_flows": self.policy.n_flows,
        }


def density_grid(policy: NfPolicy, extent=EXTENT, resolution: int = 101) -> np.ndarray:
    """``pi(a | s=0)`` on a ``resolution x resolution`` grid, ``[i, j] = (x_i, y_j)``."""
    x = np.linspace(extent[0], extent[1], resolution)
    xx, yy = np.meshgrid(x, x, indexing="ij")
    points = np.stack([xx.ravel(), yy.ravel()], axis=1)
    states = np.zeros((points.shape[0], policy.state_dim))
    log_p = policy.frozen().log_prob(states, points).value
    return np.exp(log_p).reshape(resolution, resolution)


def didactic_ar_task(target: NfPolicy | None = None, repulsive: NfPolicy | None = None,
                     n_flows: int = 3, steps: int = 1500, seed: int = 0,
                     batch: int = 128, lr: float = 1e-2, l1_weight: float = 2.0,
                     beta0: float = 10.0, log_every: int = 100, resolution: int = 101,
                     extent=EXTENT, sigma_mode: str = "learned", hidden: int = 8,
                     kl_eval_samples: int = 4000) -> DidacticResult:
    """Train one policy against fixed target/repulsive densities.

    Every parameter (mean, noise scale, flows) receives gradients from both
    KL terms.  A density grid and KL estimates are recorded at step 0, every
    ``log_every`` steps and after the last step.
    """
    if n_flows < 0:
        raise ValueError("n_flows must be >= 0")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    target = gaussian_policy(TARGET_MEAN, DIDACTIC_SIGMA) if target is None else target
    repulsive = gaussian_policy(REPULSIVE_MEAN, DIDACTIC_SIGMA) if repulsive is None else repulsive
    init_seq, train_seq, eval_seq = np.random.SeedSequence(seed).spawn(3)
    pi = NfPolicy(1, 2, n_flows=n_flows, hidden=hidden, sigma_mode=sigma_mode,
                  sigma=1.0, rng=np.random.default_rng(init_seq))
    rng = np.random.default_rng(train_seq)
    eval_rng = np.random.default_rng(eval_seq)
    opt = Adam(pi.params(), lr=lr)
    states = np.zeros((batch, 1))
    eval_states = np.zeros((kl_eval_samples, 1))
    result = DidacticResult(pi, tuple(extent), resolution)

    def record(t):
        result.snapshot_steps.append(t)
        result.densities.append(density_grid(pi, extent, resolution))
        result.kl_target.append(kl_mc_stats(pi, target, eval_states, 1, eval_rng)[0])
        result.kl_repulsive.append(kl_mc_stats(pi, repulsive, eval_states, 1, eval_rng)[0])

    record(0)
    for t in range(steps):
        noise = rng.standard_normal((batch, 2))
        attract = kl_mc(pi, target, states, noise=noise)
        repel = kl_mc(pi, repulsive, states, noise=noise)
        loss = attract - beta_schedule(t, beta0) * repel
        if l1_weight and n_flows:
            loss = loss + l1_weight * pi.chain.l1()
        try:
            opt.minimize(loss)
        except NonFiniteGradient:
            result.skipped_steps += 1
        if (t + 1) % log_every == 0 or t + 1 == steps:
            record(t + 1)
    return result


def kl_finite(result: DidacticResult) -> bool:
    return all(math.isfinite(v) for v in result.kl_target + result.kl_repulsive)
