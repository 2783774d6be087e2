"""Two-layer tanh network on a flat parameter vector, with manual backprop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MLPShape:
    in_dim: int
    hidden: int
    out_dim: int

    @property
    def n_params(self) -> int:
        return (self.in_dim + 1) * self.hidden + (self.hidden + 1) * self.out_dim

    def unpack(self, theta: np.ndarray):
        i, h, o = self.in_dim, self.hidden, self.out_dim
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        w1 = theta[: h * i].reshape(h, i)
        b1 = theta[h * i: h * i + h]
        off = h * i + h
        w2 = theta[off: off + o * h].reshape(o, h)
        b2 = theta[off + o * h:]
        return w1, b1, w2, b2

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """Hidden layer uniform in +-1/sqrt(fan_in); output layer zero."""
        bound = 1.0 / np.sqrt(self.in_dim)
        theta = np.zeros(self.n_params)
        n_hidden = (self.in_dim + 1) * self.hidden
        theta[:n_hidden] = rng.uniform(-bound, bound, size=n_hidden)
        return theta


def forward(shape: MLPShape, theta: np.ndarray, x: np.ndarray):
    """Returns ``(out, hidden_activations)`` for a batch ``x`` of shape (n, in_dim)."""
    if x.shape[-1] != shape.in_dim:
        raise ValueError(f"input dimension {x.shape[-1]} does not match network input {shape.in_dim}")
    w1, b1, w2, b2 = shape.unpack(theta)
    hid = np.tanh(x @ w1.T + b1)
    return hid @ w2.T + b2, hid


def backward(shape: MLPShape, theta: np.ndarray, x: np.ndarray, hid: np.ndarray,
             dout: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(dout * out)`` with respect to ``theta``."""
    _, _, w2, _ = shape.unpack(theta)
    dhid = (dout @ w2) * (1.0 - hid * hid)
    return np.concatenate([
        (dhid.T @ x).ravel(), dhid.sum(0), (dout.T @ hid).ravel(), dout.sum(0)])
