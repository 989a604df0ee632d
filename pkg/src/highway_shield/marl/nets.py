"""Small ReLU MLPs over a flat parameter vector, with manual backprop and Adam."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np


class MlpNet:
    """Fully connected net: ReLU on hidden layers, linear output.

    Parameters live in one flat vector laid out layer by layer as
    ``W (fan_in x fan_out)`` followed by ``b (fan_out)``.
    """

    def __init__(self, sizes: Sequence[int]):
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        self.sizes = tuple(int(s) for s in sizes)
        self.layers: List[Tuple[int, int, int]] = []  # (offset, fan_in, fan_out)
        offset = 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.layers.append((offset, fan_in, fan_out))
            offset += (fan_in + 1) * fan_out
        self.n_params = offset

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def init(self, rng: np.random.Generator, out_scale: float = 0.01) -> np.ndarray:
        """He-normal hidden weights, small output weights, zero biases."""
        params = np.zeros(self.n_params)
        last = len(self.layers) - 1
        for k, (off, fan_in, fan_out) in enumerate(self.layers):
            std = out_scale / np.sqrt(fan_in) if k == last else np.sqrt(2.0 / fan_in)
            params[off : off + fan_in * fan_out] = rng.normal(0.0, std, fan_in * fan_out)
        return params

    def unpack(self, params: np.ndarray):
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        out = []
        for off, fan_in, fan_out in self.layers:
            w = params[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
            b = params[off + fan_in * fan_out : off + (fan_in + 1) * fan_out]
            out.append((w, b))
        return out

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input has {x.shape[-1]} features, net expects {self.in_dim}")
        return x

    def forward(self, params: np.ndarray, x: np.ndarray) -> np.ndarray:
        x = self._check_input(x)
        h = x
        layers = self.unpack(params)
        for k, (w, b) in enumerate(layers):
            h = h @ w + b
            if k < len(layers) - 1:
                h = np.maximum(h, 0.0)
        return h

    def forward_cache(self, params: np.ndarray, x: np.ndarray):
        """Forward pass over a batch ``(B, in_dim)`` keeping activations for backprop."""
        x = self._check_input(x)
        if x.ndim != 2:
            raise ValueError("forward_cache expects a 2-D batch")
        acts = [x]
        h = x
        layers = self.unpack(params)
        for k, (w, b) in enumerate(layers):
            h = h @ w + b
            if k < len(layers) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, params: np.ndarray, acts, grad_out: np.ndarray) -> np.ndarray:
        """Gradient of ``sum(grad_out * output)`` with respect to the flat parameters."""
        grad = np.zeros(self.n_params)
        layers = self.unpack(params)
        g = grad_out
        for k in range(len(layers) - 1, -1, -1):
            off, fan_in, fan_out = self.layers[k]
            w, _ = layers[k]
            if k < len(layers) - 1:
                g = g * (acts[k + 1] > 0)
            grad[off : off + fan_in * fan_out] = (acts[k].T @ g).ravel()
            grad[off + fan_in * fan_out : off + (fan_in + 1) * fan_out] = g.sum(axis=0)
            g = g @ w.T
        return grad


@dataclass
class Adam:
    n_params: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        self.m = np.zeros(self.n_params)
        self.v = np.zeros(self.n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {"m": self.m.tolist(), "v": self.v.tolist(), "t": self.t}

    def load_state_dict(self, d: dict) -> None:
        self.m = np.asarray(d["m"], dtype=float)
        self.v = np.asarray(d["v"], dtype=float)
        self.t = int(d["t"])


def clip_grad(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if max_norm > 0 and norm > max_norm:
        return grad * (max_norm / norm)
    return grad
