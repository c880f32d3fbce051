"""Relative 6-DoF pose algebra.

Conventions used everywhere in the package:

* A pose parameter vector is ``(t_x, t_y, t_z, phi_x, phi_y, phi_z)`` with the
  translation in mm and Euler angles in degrees.
* Rotation ``R = Rz(phi_z) @ Ry(phi_y) @ Rx(phi_x)``.
* A relative pose ``rel[i]`` is the pose of frame ``i+1`` expressed in frame
  ``i``, so ``T_world_{i+1} = T_world_i @ T(rel[i])``.
* ``t_y`` is the elevation (out-of-plane) axis.

The ``*_params`` functions operate on trailing-axis-6 arrays of any batch shape
and accept :class:`~drift_forge.autodiff.Tensor` inputs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad

DEG = math.pi / 180.0
GIMBAL_TOL_DEG = 1e-6


class GimbalLockWarning(RuntimeWarning):
    """Euler extraction hit |phi_y| = 90 deg, where phi_x and phi_z are not separable."""


def wrap_deg(a):
    """Map angles to (-180, 180]."""
    return 180.0 - np.mod(180.0 - np.asarray(a, dtype=np.float64), 360.0)


def rotation_matrix(phi_deg):
    """Batch of rotation matrices from Euler angles in degrees, shape (..., 3, 3)."""
    r = phi_deg * DEG
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    cx, sx = ad.cos(x), ad.sin(x)
    cy, sy = ad.cos(y), ad.sin(y)
    cz, sz = ad.cos(z), ad.sin(z)
    row0 = ad.stack([cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx], axis=-1)
    row1 = ad.stack([sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx], axis=-1)
    row2 = ad.stack([-sy, cy * sx, cy * cx], axis=-1)
    return ad.stack([row0, row1, row2], axis=-2)


def _check_gimbal(phi_y_deg) -> None:
    if np.any(np.abs(np.abs(ad.value_of(phi_y_deg)) - 90.0) < GIMBAL_TOL_DEG):
        warnings.warn("Euler extraction at gimbal lock (|phi_y| = 90 deg)", GimbalLockWarning, stacklevel=3)


def _matrix_to_euler_np(rot: np.ndarray) -> np.ndarray:
    rot = np.asarray(rot, dtype=np.float64)
    cy = np.hypot(rot[..., 0, 0], rot[..., 1, 0])
    phi_y = np.arctan2(-rot[..., 2, 0], cy)
    phi_x = np.arctan2(rot[..., 2, 1], rot[..., 2, 2])
    phi_z = np.arctan2(rot[..., 1, 0], rot[..., 0, 0])
    lock = cy < 1e-12
    if lock.any():
        # only x - z (or x + z) is defined; put it all on x
        sign = np.sign(-rot[..., 2, 0])
        alt = np.arctan2(sign * rot[..., 0, 1], sign * rot[..., 0, 2])
        phi_x = np.where(lock, alt, phi_x)
        phi_z = np.where(lock, 0.0, phi_z)
    out = np.stack([phi_x, phi_y, phi_z], axis=-1) / DEG
    _check_gimbal(out[..., 1])
    return wrap_deg(out)


def matrix_to_euler(rot):
    """Euler angles in degrees from rotation matrices (..., 3, 3)."""
    if not ad.is_tensor(rot):
        return _matrix_to_euler_np(rot)
    s = -rot[..., 2, 0]
    sv = ad.value_of(s)
    sat = np.abs(sv) >= 1.0
    if sat.any():
        # asin has an unbounded derivative at +-1; saturated entries are held constant
        phi_y = ad.where(sat, np.sign(sv) * 90.0, ad.arcsin(ad.where(sat, 0.0, s)) / DEG)
    else:
        phi_y = ad.arcsin(s) / DEG
    _check_gimbal(phi_y)
    phi_x = ad.arctan2(rot[..., 2, 1], rot[..., 2, 2]) / DEG
    phi_z = ad.arctan2(rot[..., 1, 0], rot[..., 0, 0]) / DEG
    return ad.stack([phi_x, phi_y, phi_z], axis=-1)


def rotate(rot, v):
    """Apply rotation matrices to vectors: (..., 3, 3) x (..., 3) -> (..., 3)."""
    if not (ad.is_tensor(rot) or ad.is_tensor(v)):
        return np.einsum("...ij,...j->...i", rot, v)
    out = ad.matmul(rot, ad.expand_dims(v, -1))
    return ad.reshape(out, out.shape[:-1])


def rotate_transposed(rot, v):
    """Apply R^T to vectors."""
    return rotate(ad.swapaxes(rot, -1, -2), v)


def compose_params(a, b):
    """Parameters of T(a) @ T(b)."""
    ra, rb = rotation_matrix(a[..., 3:]), rotation_matrix(b[..., 3:])
    t = rotate(ra, b[..., :3]) + a[..., :3]
    phi = matrix_to_euler(ad.matmul(ra, rb))
    return ad.concatenate([t, phi], axis=-1)


def invert_params(p):
    """Parameters of T(p)^-1."""
    r = rotation_matrix(p[..., 3:])
    rt = ad.swapaxes(r, -1, -2)
    t = -rotate(rt, p[..., :3])
    return ad.concatenate([t, matrix_to_euler(rt)], axis=-1)


def translation_of_inverse_params(p):
    """Translation part of T(p)^-1, i.e. -R^T t."""
    return -rotate_transposed(rotation_matrix(p[..., 3:]), p[..., :3])


def params_to_matrix(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros(p.shape[:-1] + (4, 4))
    out[..., :3, :3] = rotation_matrix(p[..., 3:])
    out[..., :3, 3] = p[..., :3]
    out[..., 3, 3] = 1.0
    return out


def matrix_to_params(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return np.concatenate([m[..., :3, 3], matrix_to_euler(m[..., :3, :3])], axis=-1)


def accumulate_matrices(rel) -> np.ndarray:
    """Absolute 4x4 poses (N, 4, 4) of an (N-1, 6) relative chain; pose 0 is identity."""
    rel = np.asarray(rel, dtype=np.float64).reshape(-1, 6)
    steps = params_to_matrix(rel)
    out = np.empty((len(rel) + 1, 4, 4))
    out[0] = np.eye(4)
    for i, s in enumerate(steps):
        out[i + 1] = out[i] @ s
    return out


def relative_from_absolute(absolute) -> np.ndarray:
    """Inverse of :func:`accumulate_matrices`: (N, 4, 4) -> (N-1, 6)."""
    absolute = np.asarray(absolute, dtype=np.float64)
    rel = np.linalg.inv(absolute[:-1]) @ absolute[1:]
    return matrix_to_params(rel)


def geodesic_deg(r1, r2) -> np.ndarray:
    """Rotation angle of R1^T R2 in degrees (batched)."""
    rel = np.swapaxes(r1, -1, -2) @ r2
    c = (np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class RelPose:
    """Relative transform between consecutive frames (mm, deg)."""

    t: tuple[float, float, float] = (0.0, 0.0, 0.0)
    phi: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        t = tuple(float(v) for v in self.t)
        phi = tuple(float(v) for v in wrap_deg(self.phi))
        if len(t) != 3 or len(phi) != 3:
            raise ValueError("RelPose needs 3 translations and 3 angles")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "phi", phi)

    @classmethod
    def identity(cls) -> "RelPose":
        return cls()

    @classmethod
    def from_array(cls, a) -> "RelPose":
        a = np.asarray(a, dtype=np.float64)
        return cls(tuple(a[:3]), tuple(a[3:6]))

    @classmethod
    def from_matrix(cls, m) -> "RelPose":
        return cls.from_array(matrix_to_params(m))

    def as_array(self) -> np.ndarray:
        return np.array(self.t + self.phi)

    def to_matrix(self) -> np.ndarray:
        return params_to_matrix(self.as_array())

    def compose(self, other: "RelPose") -> "RelPose":
        return compose(self, other)

    def invert(self) -> "RelPose":
        return invert(self)


def to_matrix(p: RelPose) -> np.ndarray:
    return p.to_matrix()


def compose(a: RelPose, b: RelPose) -> RelPose:
    return RelPose.from_array(compose_params(a.as_array(), b.as_array()))


def invert(p: RelPose) -> RelPose:
    return RelPose.from_array(invert_params(p.as_array()))


def translation_of_inverse(p: RelPose) -> np.ndarray:
    return translation_of_inverse_params(p.as_array())


@dataclass(frozen=True)
class PoseChain:
    """N-1 relative steps of an N-frame sequence, stored as an (N-1, 6) array."""

    rel: np.ndarray

    def __post_init__(self):
        rel = np.array(self.rel, dtype=np.float64).reshape(-1, 6)
        rel.setflags(write=False)
        object.__setattr__(self, "rel", rel)

    @classmethod
    def from_poses(cls, poses: Sequence[RelPose]) -> "PoseChain":
        return cls(np.array([p.as_array() for p in poses]).reshape(-1, 6))

    @property
    def n_frames(self) -> int:
        return len(self.rel) + 1

    def __len__(self) -> int:
        return len(self.rel)

    def poses(self) -> list[RelPose]:
        return [RelPose.from_array(r) for r in self.rel]

    def absolute_matrices(self) -> np.ndarray:
        return accumulate_matrices(self.rel)

    def positions(self) -> np.ndarray:
        """Frame-center positions in the frame-0 coordinate system, (N, 3)."""
        return self.absolute_matrices()[:, :3, 3]

    def path_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.positions(), axis=0), axis=1).sum())


def accumulate(chain: PoseChain) -> list[RelPose]:
    if len(chain) == 0:
        raise ValueError("cannot accumulate an empty chain")
    return [RelPose.from_matrix(m) for m in chain.absolute_matrices()]
