"""Adam and the learning-rate schedules for training and online refinement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TRAIN_LR = 2e-4
TRAIN_HALVING_EPOCHS = 30
ONLINE_LR = 2e-6


class RejectedStepError(FloatingPointError):
    """Raised when a gradient contains non-finite entries; parameters are left untouched."""


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """Return updated parameters; ``state`` is advanced in place.

    ``params`` and ``grads`` are flat vectors of equal length.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    bad = ~np.isfinite(grads)
    if bad.any():
        raise RejectedStepError(f"non-finite gradient at {int(bad.sum())} entries (first index {int(np.argmax(bad))})")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def lr_schedule(phase: str, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if phase == "train":
        return TRAIN_LR * 0.5 ** (epoch // TRAIN_HALVING_EPOCHS)
    if phase == "online":
        return ONLINE_LR
    raise ValueError(f"unknown phase {phase!r}; expected 'train' or 'online'")
