"""Adadelta: per-parameter step sizes from running RMS of gradients and updates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError, ShapeMismatch


@dataclass(frozen=True)
class AdadeltaState:
    sq_grad: tuple[np.ndarray, ...]
    sq_update: tuple[np.ndarray, ...]
    rho: float = 0.95
    eps: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise DataError(f"rho must lie in (0, 1), got {self.rho}")
        if not self.eps > 0:
            raise DataError(f"eps must be positive, got {self.eps}")

    @classmethod
    def zeros_like(cls, params, rho: float = 0.95, eps: float = 1e-6) -> "AdadeltaState":
        z = tuple(np.zeros_like(p) for p in params)
        return cls(z, tuple(np.zeros_like(p) for p in params), rho, eps)


def adadelta_step(params, grads, state: AdadeltaState):
    """One update over flat lists of arrays; returns ``(new_params, new_state)``.

    E[g^2] <- rho E[g^2] + (1 - rho) g^2
    delta  <- -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
    E[dx^2] <- rho E[dx^2] + (1 - rho) delta^2
    """
    if not (len(params) == len(grads) == len(state.sq_grad)):
        raise ShapeMismatch("params, grads and optimizer state differ in length")
    rho, eps = state.rho, state.eps
    new_p, new_g2, new_d2 = [], [], []
    for p, g, g2, d2 in zip(params, grads, state.sq_grad, state.sq_update):
        if p.shape != g.shape or p.shape != g2.shape:
            raise ShapeMismatch(f"shape mismatch {p.shape} vs {g.shape} vs {g2.shape}")
        t = p.dtype.type
        g2 = t(rho) * g2 + t(1 - rho) * g * g
        delta = -np.sqrt(d2 + t(eps)) / np.sqrt(g2 + t(eps)) * g
        d2 = t(rho) * d2 + t(1 - rho) * delta * delta
        new_p.append(p + delta)
        new_g2.append(g2)
        new_d2.append(d2)
    return new_p, AdadeltaState(tuple(new_g2), tuple(new_d2), rho, eps)
