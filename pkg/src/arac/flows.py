"""Radial flow layers with closed-form inverse and log-determinant.

One layer maps ``z -> z + b * (z - z0) / (a + |z - z0|)`` with
``a = softplus(alpha_raw) > 0`` and ``b = softplus(beta_raw) - a > -a``,
which keeps every layer invertible.  All functions take batches of shape
``(n, d)``; single ``(d,)`` vectors are accepted and returned unbatched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx


def softplus_inverse(y: float) -> float:
    """``x`` such that ``softplus(x) == y`` (``y > 0``)."""
    if y <= 0:
        raise nx.DomainError("softplus is strictly positive")
    return float(y + np.log(-np.expm1(-y)))


@dataclass
class RadialFlowParams:
    alpha_raw: nx.Tensor
    beta_raw: nx.Tensor
    z0: nx.Tensor
    # (alpha, beta_hat) pinned for immutable copies, see FlowChain.pin
    pinned: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.z0.shape[0]

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, center_scale: float = 1.0,
             beta_scale: float = 0.1) -> "RadialFlowParams":
        """A layer close to the identity with a random contraction center."""
        a = rng.uniform(-0.5, 0.5)
        b = a + rng.normal(0.0, beta_scale)
        z0 = rng.normal(0.0, center_scale, size=dim)
        return cls(nx.parameter(a, "alpha_raw"), nx.parameter(b, "beta_raw"),
                   nx.parameter(z0, "z0"))

    @classmethod
    def from_effective(cls, alpha: float, beta_hat: float, z0, trainable=True):
        if beta_hat <= -alpha:
            raise ValueError("beta_hat must exceed -alpha")
        make = nx.parameter if trainable else nx.tensor
        return cls(make(softplus_inverse(alpha)),
                   make(softplus_inverse(beta_hat + alpha)),
                   make(np.asarray(z0, dtype=np.float64)))

    def params(self) -> list:
        return [self.alpha_raw, self.beta_raw, self.z0]

    def frozen(self) -> "RadialFlowParams":
        return RadialFlowParams(*(nx.constant(p.value) for p in self.params()))

    def effective(self) -> tuple:
        """``(alpha, beta_hat)`` as tensors."""
        alpha = nx.softplus(self.alpha_raw)
        return alpha, nx.softplus(self.beta_raw) - alpha

    def effective_values(self) -> tuple:
        if self.pinned is not None:
            return self.pinned
        alpha = float(np.logaddexp(0.0, self.alpha_raw.value))
        return alpha, float(np.logaddexp(0.0, self.beta_raw.value)) - alpha


def _as_batch(z):
    z = z if isinstance(z, nx.Tensor) else nx.constant(z)
    if z.value.ndim == 1:
        return nx.expand(z, (1, z.shape[0])), True
    if z.value.ndim != 2:
        raise nx.ShapeError(f"expected (d,) or (n, d), got {z.shape}")
    return z, False


def _unbatch(y, logdet, single):
    if single:
        return y[0], logdet[0]
    return y, logdet


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


class _Layer:
    """Shared forward quantities of one radial layer on a batch.

    ``x = z - z0`` is the pre-image offset and ``r = |x|``; everything the
    adjoints need is derived from ``(alpha, beta_hat, x, r)``.
    """

    def __init__(self, alpha, beta_hat, x):
        self.alpha, self.beta_hat, self.x = alpha, beta_hat, x
        self.d = x.shape[1]
        self.r = np.sqrt((x * x).sum(axis=1, keepdims=True))
        self.h = h = 1.0 / (alpha + self.r)
        self.u1 = 1.0 + beta_hat * h
        # 1 + beta h + beta h'(r) r simplifies to 1 + beta alpha h^2
        self.u2 = 1.0 + (beta_hat * alpha) * h * h
        self._u = None

    @property
    def u(self):
        """Unit offset direction (zero rows where ``r = 0``)."""
        if self._u is None:
            r = self.r
            self._u = self.x / (r + (r == 0.0))
        return self._u

    @property
    def y_offset(self):
        return self.u1 * self.x

    @property
    def logdet(self):
        if self.d > 1:
            return np.log(self.u2 * self.u1 ** (self.d - 1)).ravel()
        return np.log(self.u2).ravel()

    def logdet_partials(self):
        """``(dL/dr, dL/dalpha, dL/dbeta_hat)`` per row, shape (n, 1)."""
        a, b, h, u1, u2 = self.alpha, self.beta_hat, self.h, self.u1, self.u2
        h2 = h * h
        k = self.d - 1
        d_r = k * (-b * h2) / u1 - 2.0 * b * a * h2 * h / u2
        d_a = k * (-b * h2) / u1 + b * h2 * (1.0 - 2.0 * a * h) / u2
        d_b = k * h / u1 + a * h2 / u2
        return d_r, d_a, d_b

    def jacobian_solve(self, g):
        """``J^{-1} g`` for ``J = u1 I + (u2 - u1) u u^T`` (symmetric)."""
        u = self.u
        proj = (g * u).sum(axis=1, keepdims=True)
        return g / self.u1 + (1.0 / self.u2 - 1.0 / self.u1) * proj * u

    def jacobian_t(self, g):
        u = self.u
        proj = (g * u).sum(axis=1, keepdims=True)
        return g * self.u1 + (self.u2 - self.u1) * proj * u


def _raw_grads(layer_params, g_alpha, g_beta):
    """Map gradients w.r.t. ``(alpha, beta_hat)`` onto the raw parameters."""
    a_raw = layer_params.alpha_raw.value
    b_raw = layer_params.beta_raw.value
    return (np.asarray((g_alpha - g_beta) * _sigmoid(a_raw)),
            np.asarray(g_beta * _sigmoid(b_raw)))


def _check_input(params, z, where):
    n, d = z.shape
    if d != params.dim:
        raise nx.ShapeError(f"flow dim {params.dim} != input dim {d}")
    if not np.all(np.isfinite(z.value)):
        raise nx.DomainError(f"{where}: non-finite input")


def radial_forward(params: RadialFlowParams, z):
    """``(y, logdet)`` for one layer: ``y = z + beta_hat h(r) (z - z0)``."""
    z, single = _as_batch(z)
    _check_input(params, z, "radial_forward")
    alpha, beta_hat = params.effective_values()
    z0 = params.z0.value
    lay = _Layer(alpha, beta_hat, z.value - z0)
    parents = (z, params.alpha_raw, params.beta_raw, params.z0)

    def adj_y(g):
        gz = lay.jacobian_t(g)
        hgx = lay.h * (g * lay.x).sum(axis=1, keepdims=True)
        g_beta = hgx.sum()
        g_alpha = -beta_hat * (lay.h * hgx).sum()
        ga, gb = _raw_grads(params, g_alpha, g_beta)
        return gz, ga, gb, (g - gz).sum(axis=0)

    def adj_logdet(g):
        d_r, d_a, d_b = lay.logdet_partials()
        g = g[:, None]
        gz = g * d_r * lay.u
        ga, gb = _raw_grads(params, (g * d_a).sum(), (g * d_b).sum())
        return gz, ga, gb, -gz.sum(axis=0)

    y = nx.custom(z0 + lay.y_offset, parents, adj_y)
    logdet = nx.custom(lay.logdet, parents, adj_logdet)
    return _unbatch(y, logdet, single)


def _inverse_ratio(alpha, beta_hat, big_r):
    """``r / R`` where ``r`` is the positive root of
    ``r^2 + (alpha + beta_hat - R) r - R alpha = 0``, cancellation-free.

    When ``alpha + beta_hat - R < 0`` we have ``R > alpha + beta_hat > 0``,
    so neither branch ever divides by zero.
    """
    lin = (alpha + beta_hat) - big_r
    disc = np.sqrt(lin * lin + (4.0 * alpha) * big_r)
    stable = lin >= 0.0
    num = np.where(stable, 2.0 * alpha, disc - lin)
    den = np.where(stable, lin + disc, 2.0 * big_r)
    return num / den


def radial_inverse(params: RadialFlowParams, y):
    """``(z, logdet_inv)`` with ``radial_forward(z) == y``.

    Gradients come from the implicit function theorem: with ``J`` the
    forward Jacobian at ``z``, ``dz = J^{-1} (dy - df/dtheta dtheta)``.
    """
    y, single = _as_batch(y)
    _check_input(params, y, "radial_inverse")
    alpha, beta_hat = params.effective_values()
    z0 = params.z0.value
    diff = y.value - z0
    big_r = np.sqrt((diff * diff).sum(axis=1, keepdims=True))
    x = _inverse_ratio(alpha, beta_hat, big_r) * diff
    lay = _Layer(alpha, beta_hat, x)
    parents = (y, params.alpha_raw, params.beta_raw, params.z0)

    def through_x(gx, g_alpha, g_beta, g_z0):
        # gx is the cotangent on x = z - z0; g_z0 any direct z0 cotangent
        w = lay.jacobian_solve(gx)
        hwx = lay.h * (w * lay.x).sum(axis=1, keepdims=True)
        g_alpha = g_alpha + beta_hat * (lay.h * hwx).sum()
        g_beta = g_beta - hwx.sum()
        ga, gb = _raw_grads(params, g_alpha, g_beta)
        return w, ga, gb, (g_z0 - w).sum(axis=0)

    def adj_z(g):
        return through_x(g, 0.0, 0.0, g)

    def adj_logdet(g):
        d_r, d_a, d_b = lay.logdet_partials()
        g = -g[:, None]
        return through_x(g * d_r * lay.u, (g * d_a).sum(), (g * d_b).sum(), 0.0)

    z = nx.custom(z0 + x, parents, adj_z)
    logdet = nx.custom(-lay.logdet, parents, adj_logdet)
    return _unbatch(z, logdet, single)


@dataclass
class FlowChain:
    layers: list = field(default_factory=list)

    @classmethod
    def init(cls, n_layers: int, dim: int, rng: np.random.Generator, **kw) -> "FlowChain":
        return cls([RadialFlowParams.init(dim, rng, **kw) for _ in range(n_layers)])

    def __len__(self):
        return len(self.layers)

    def params(self) -> list:
        return [p for layer in self.layers for p in layer.params()]

    def frozen(self) -> "FlowChain":
        return FlowChain([layer.frozen() for layer in self.layers])

    def pin(self) -> "FlowChain":
        """Cache effective parameters; only for chains that never change."""
        for layer in self.layers:
            layer.pinned = None
            layer.pinned = layer.effective_values()
        return self

    def l1(self) -> nx.Tensor:
        """Sum of absolute raw parameter values (zero raw params = identity)."""
        total = nx.constant(0.0)
        for p in self.params():
            total = total + nx.sum(nx.abs(p))
        return total


def chain_forward(chain: FlowChain, z):
    """``(y, logdet)`` through every layer, as one fused graph node.

    Same numbers as composing :func:`radial_forward`; the adjoint walks the
    layers once instead of building two nodes per layer.
    """
    z, single = _as_batch(z)
    if not chain.layers:
        return _unbatch(z, nx.constant(np.zeros(z.shape[0])), single)
    _check_input(chain.layers[0], z, "chain_forward")
    n, d = z.shape
    cur = z.value
    total = np.zeros(n)
    saved = []
    for layer in chain.layers:
        alpha, beta_hat = layer.effective_values()
        z0 = layer.z0.value
        lay = _Layer(alpha, beta_hat, cur - z0)
        total += lay.logdet
        cur = z0 + lay.y_offset
        saved.append((layer, lay))
    joint_value = np.empty((n, d + 1))
    joint_value[:, :d] = cur
    joint_value[:, d] = total

    def adj(g):
        g_y, g_ld = g[:, :d], g[:, d:]
        grads = []
        for layer, lay in reversed(saved):
            hgx = lay.h * (g_y * lay.x).sum(axis=1, keepdims=True)
            d_r, d_a, d_b = lay.logdet_partials()
            g_beta = float(hgx.sum()) + float((g_ld * d_b).sum())
            g_alpha = -lay.beta_hat * float((lay.h * hgx).sum()) + float((g_ld * d_a).sum())
            gz = lay.jacobian_t(g_y) + g_ld * d_r * lay.u
            grads.append((_sigmoid_f(layer.alpha_raw.value) * (g_alpha - g_beta),
                          _sigmoid_f(layer.beta_raw.value) * g_beta,
                          (g_y - gz).sum(axis=0)))
            g_y = gz
        grads.reverse()
        return (g_y, *(g for layer_grads in grads for g in layer_grads))

    joint = nx.custom(joint_value, (z, *chain.params()), adj)
    if not joint.requires_grad:
        return _unbatch(nx.constant(cur), nx.constant(total), single)
    y = nx.custom(cur, (joint,), lambda g: (np.concatenate([g, np.zeros((n, 1))], axis=1),))
    logdet = nx.custom(total, (joint,),
                       lambda g: (np.concatenate([np.zeros((n, d)), g[:, None]], axis=1),))
    return _unbatch(y, logdet, single)


def _sigmoid_f(v) -> float:
    v = float(v)
    return 0.5 * (1.0 + math.tanh(0.5 * v))


def chain_inverse(chain: FlowChain, a):
    a, single = _as_batch(a)
    total = nx.constant(np.zeros(a.shape[0]))
    for layer in reversed(chain.layers):
        a, ld = radial_inverse(layer, a)
        total = total + ld
    return _unbatch(a, total, single)


def chain_forward_values(chain: FlowChain, z: np.ndarray, with_logdet: bool = False):
    """Graph-free forward pass on plain arrays of shape ``(n, d)``; with
    ``with_logdet`` returns ``(y, logdet)``."""
    z = np.array(z, dtype=np.float64)
    total = np.zeros(z.shape[0]) if with_logdet else None
    for layer in chain.layers:
        alpha, beta_hat = layer.effective_values()
        lay = _Layer(alpha, beta_hat, z - layer.z0.value)
        if with_logdet:
            total += lay.logdet
        z = layer.z0.value + lay.y_offset
    return (z, total) if with_logdet else z


def chain_inverse_values(chain: FlowChain, a: np.ndarray) -> tuple:
    """Graph-free ``(z, logdet_inv)`` for arrays of shape ``(n, d)``."""
    z, total, _ = chain_inverse_layers(chain, a)
    return z, total


def chain_inverse_layers(chain: FlowChain, a: np.ndarray) -> tuple:
    """Like :func:`chain_inverse_values`, also returning the per-layer
    quantities (innermost first) that :func:`chain_inverse_vjp` needs."""
    a = np.array(a, dtype=np.float64)
    total = np.zeros(a.shape[0])
    layers = []
    for layer in reversed(chain.layers):
        alpha, beta_hat = layer.effective_values()
        diff = a - layer.z0.value
        big_r = np.sqrt((diff * diff).sum(axis=1, keepdims=True))
        x = _inverse_ratio(alpha, beta_hat, big_r) * diff
        lay = _Layer(alpha, beta_hat, x)
        total -= lay.logdet
        layers.append(lay)
        a = layer.z0.value + x
    layers.reverse()
    return a, total, layers


def chain_inverse_vjp(layers, g_z: np.ndarray, g_logdet: np.ndarray) -> np.ndarray:
    """Cotangent on the actions given cotangents on ``(z, logdet_inv)``;
    flow parameters are treated as constants."""
    g = g_z
    g_ld = g_logdet[:, None]
    for lay in layers:
        d_r = lay.logdet_partials()[0]
        g = lay.jacobian_solve(g - g_ld * d_r * lay.u)
    return g
