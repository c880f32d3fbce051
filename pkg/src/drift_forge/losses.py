"""Training and test-time objectives on relative-pose sequences.

All functions accept plain arrays or tape tensors. Sequences are laid out as
(..., steps, components); reductions follow one rule throughout: absolute
errors are averaged over steps and components, Pearson terms are computed per
component along the step axis and averaged over components.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import pose as P
from .simulator import Scan, compose_strided, frame_indices, resample_scan, reverse_steps

SIGMA_GUARD = 1e-8
DEFAULT_WEIGHTS = (1.0, 1.0, 1.0)


class DegenerateLossWarning(RuntimeWarning):
    """A loss term fell back to its neutral value (constant sequence or too few IMUs)."""


def _centered(x):
    return x - ad.expand_dims(ad.mean(x, axis=-2), -2)


def pearson_terms(a, b, eps: float = SIGMA_GUARD):
    """Per-component ``1 - corr(a_c, b_c)`` along axis -2.

    Components where either side has SD below ``eps`` take the neutral value 1
    and are reported in the returned boolean mask.
    """
    n = ad.value_of(a).shape[-2]
    if n < 2:
        raise ValueError("Pearson loss needs at least 2 samples")
    am, bm = _centered(a), _centered(b)
    va = ad.tsum(am * am, axis=-2) / n
    vb = ad.tsum(bm * bm, axis=-2) / n
    degenerate = (ad.value_of(va) < eps * eps) | (ad.value_of(vb) < eps * eps)
    cov = ad.tsum(am * bm, axis=-2) / n
    sd = ad.sqrt(ad.where(degenerate, 1.0, va)) * ad.sqrt(ad.where(degenerate, 1.0, vb))
    return ad.where(degenerate, 1.0, 1.0 - cov / sd), degenerate


def pearson_loss(a, b):
    terms, degenerate = pearson_terms(a, b)
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} constant component(s) in Pearson loss", DegenerateLossWarning, stacklevel=2)
    return ad.mean(terms)


def mae(a, b):
    return ad.mean(ad.absolute(a - b))


def supervised_loss(est, target):
    """Mean absolute error plus Pearson correlation loss between estimate and ground truth."""
    if ad.value_of(est).shape != np.shape(ad.value_of(target)):
        raise ValueError(f"shape mismatch: {ad.value_of(est).shape} vs {np.shape(ad.value_of(target))}")
    return mae(est, target) + pearson_loss(est, target)


def derive_accel(theta):
    """Mean-zeroed second differences of frame centers implied by relative poses.

    ``theta`` (..., N-1, 6) -> (..., N-2, 3); entry ``k`` lives at interior frame
    ``k+1`` and is expressed in that frame.
    """
    if ad.value_of(theta).shape[-2] < 2:
        raise ValueError("need at least 2 steps (N >= 3)")
    raw = P.translation_of_inverse_params(theta[..., :-1, :]) + theta[..., 1:, :3]
    return _centered(raw)


def single_imu_loss(per_imu, imu_accel, imu_dphi):
    """Sum over IMUs of acceleration Pearson loss plus angle MAE.

    ``per_imu`` (M, N-1, 6) estimates; ``imu_accel`` and ``imu_dphi`` (M, N-1, 3)
    are the calibrated IMU streams (see :func:`drift_forge.estimator.imu_features`).
    """
    if ad.value_of(per_imu).shape[-2] < 3:
        raise ValueError("single-IMU loss needs N >= 4")
    acc_hat = derive_accel(per_imu)
    acc = np.asarray(imu_accel)[:, 1:]
    acc = acc - acc.mean(axis=1, keepdims=True)
    terms, degenerate = pearson_terms(acc_hat, acc)
    if degenerate.any():
        warnings.warn("constant acceleration component in single-IMU loss", DegenerateLossWarning, stacklevel=2)
    m = ad.value_of(per_imu).shape[0]
    pearson = ad.tsum(ad.mean(terms, axis=-1))
    angle = ad.tsum(ad.mean(ad.absolute(per_imu[..., 3:] - imu_dphi), axis=(1, 2)))
    return pearson + angle


def multi_imu_loss(per_imu):
    """Sum over IMU pairs j<k of Pearson loss between derived accelerations plus angle MAE."""
    m = ad.value_of(per_imu).shape[0]
    if m < 2:
        warnings.warn("multi-IMU loss needs M >= 2; returning 0", DegenerateLossWarning, stacklevel=2)
        return ad.Tensor(0.0) if ad.is_tensor(per_imu) else 0.0
    acc_hat = derive_accel(per_imu)
    pairs = list(itertools.combinations(range(m), 2))
    j = [p[0] for p in pairs]
    k = [p[1] for p in pairs]
    terms, _ = pearson_terms(acc_hat[j], acc_hat[k])
    pearson = ad.tsum(ad.mean(terms, axis=-1))
    angle = ad.tsum(ad.mean(ad.absolute(per_imu[j][..., 3:] - per_imu[k][..., 3:]), axis=(1, 2)))
    return pearson + angle


# --- interval sampling and flipping ---------------------------------------------------


@dataclass(frozen=True)
class TauSpec:
    """Interval sampling (every ``stride``-th frame from ``offset``) and optional time reversal."""

    stride: int = 1
    flip: bool = False
    offset: int = 0
    seed: int = 0
    length: int | None = None

    def __post_init__(self):
        if self.stride < 1 or self.offset < 0:
            raise ValueError("stride must be >= 1 and offset >= 0")

    @property
    def is_identity(self) -> bool:
        return self.stride == 1 and not self.flip and self.offset == 0 and self.length is None

    def n_frames(self, n_frames: int, min_frames: int = 3) -> int:
        return len(frame_indices(n_frames, self.stride, self.offset, self.length, min_frames))


def sample_tau(rng: np.random.Generator, n_frames: int, max_stride: int = 3, min_frames: int = 3) -> TauSpec:
    """Random stride in 1..max_stride, fair-coin flip and a random phase offset within the stride."""
    strides = [s for s in range(1, max_stride + 1) if (n_frames - 1) // s + 1 >= min_frames]
    if not strides:
        raise ValueError(f"a {n_frames}-frame scan cannot yield a {min_frames}-frame sub-sequence")
    stride = int(rng.choice(strides))
    flip = bool(rng.random() < 0.5)
    offsets = [o for o in range(stride) if len(range(o, n_frames, stride)) >= min_frames]
    offset = int(rng.choice(offsets))
    return TauSpec(stride=stride, flip=flip, offset=offset, seed=int(rng.integers(2**31)))


def h_tau(theta, tau: TauSpec):
    """Relative poses of the sub-sequence selected by ``tau`` from an (…, N-1, 6) chain."""
    n_frames = ad.value_of(theta).shape[-2] + 1
    k = tau.n_frames(n_frames, min_frames=2) - 1
    out = compose_strided(theta, tau.stride, tau.offset, k)
    return reverse_steps(out) if tau.flip else out


def apply_tau_to_scan(scan: Scan, tau: TauSpec) -> Scan:
    return resample_scan(scan, stride=tau.stride, flip=tau.flip, offset=tau.offset, length=tau.length)


@dataclass(frozen=True)
class LossBreakdown:
    single_imu: float
    multi_imu: float
    self_consistency: float
    total: float
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS

    def as_row(self) -> dict:
        return {
            "single_imu": self.single_imu,
            "multi_imu": self.multi_imu,
            "self_consistency": self.self_consistency,
            "total": self.total,
        }
