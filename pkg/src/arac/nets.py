"""Fully connected networks built on :mod:`arac.numerics`."""

from __future__ import annotations

import numpy as np

from . import numerics as nx


class MLP:
    """tanh hidden layers, linear output.

    Weights are uniform in ``±1/sqrt(fan_in)``; ``out_scale`` shrinks the
    last layer at init so fresh policies start near the origin.
    """

    def __init__(self, sizes, rng: np.random.Generator, out_scale: float = 1.0,
                 name: str = "mlp"):
        self.sizes = list(sizes)
        self.params = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            if i == len(self.sizes) - 2:
                bound *= out_scale
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=(fan_out,))
            self.params.append(nx.parameter(w, name=f"{name}.w{i}"))
            self.params.append(nx.parameter(b, name=f"{name}.b{i}"))

    def __call__(self, x, params=None) -> nx.Tensor:
        """Forward pass as a single graph node (hand-written backward)."""
        params = self.params if params is None else params
        x = x if isinstance(x, nx.Tensor) else nx.constant(x)
        if x.value.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise nx.ShapeError(f"MLP expects (n, {self.sizes[0]}) input, got {x.shape}")
        n_layers = len(params) // 2
        weights = [p.value for p in params[0::2]]
        acts = [x.value]
        h = x.value
        for i in range(n_layers):
            h = h @ weights[i] + params[2 * i + 1].value
            if i < n_layers - 1:
                h = np.tanh(h)
                acts.append(h)
        want_params = any(p.requires_grad for p in params)
        want_x = x.requires_grad

        def adj(g):
            grads = [None] * len(params)
            for i in reversed(range(n_layers)):
                if i < n_layers - 1:
                    g = g * (1.0 - acts[i + 1] * acts[i + 1])
                if want_params:
                    grads[2 * i] = acts[i].T @ g
                    grads[2 * i + 1] = g.sum(axis=0)
                if i > 0 or want_x:
                    g = g @ weights[i].T
            return (g if want_x else None, *grads)
        return nx.custom(h, (x, *params), adj)

    def frozen(self):
        """Constant views of the parameters; no gradient reaches them."""
        return [nx.constant(p.value) for p in self.params]

    def forward_numpy(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            h = h @ self.params[2 * i].value + self.params[2 * i + 1].value
            if i < n_layers - 1:
                h = np.tanh(h)
        return h

    def get_flat(self) -> list:
        return [p.value.copy() for p in self.params]

    def set_flat(self, arrays) -> None:
        for p, a in zip(self.params, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != p.shape:
                raise ValueError(f"{p.name}: shape {a.shape} != {p.shape}")
            p.value[...] = a
