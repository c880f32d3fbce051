"""Levenberg-Marquardt fitting of fixed IMU mounting rotations."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from . import pose as P
from .pose import RelPose

LAMBDA_MAX = 1e12


class IllConditionedError(ValueError):
    """Calibration samples do not constrain all three rotation axes."""


class LmDivergedError(RuntimeError):
    """Damping grew past the allowed maximum without an acceptable step."""


@dataclass(frozen=True)
class LmConfig:
    max_iters: int = 100
    lambda_init: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    tol_step: float = 1e-12
    tol_residual: float = 1e-14

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if min(self.lambda_init, self.tol_step, self.tol_residual) <= 0:
            raise ValueError("lambda_init and tolerances must be positive")
        if not self.lambda_up > 1.0 > self.lambda_down > 0.0:
            raise ValueError("need lambda_up > 1 > lambda_down > 0")


@dataclass
class LmReport:
    converged: bool = False
    iterations: int = 0
    reason: str = ""
    residual_norms: list[float] = field(default_factory=list)  # accepted iterates, starting with x0
    lambdas: list[float] = field(default_factory=list)  # damping used for every trial step
    accepted: list[bool] = field(default_factory=list)

    @property
    def final_residual(self) -> float:
        return self.residual_norms[-1]


def _vector_add(x, dx):
    return x + dx


def lm_solve(
    residual_fn: Callable[[np.ndarray], np.ndarray],
    jacobian_fn: Callable[[np.ndarray], np.ndarray],
    x0,
    cfg: LmConfig = LmConfig(),
    retract: Callable[[np.ndarray, np.ndarray], np.ndarray] = _vector_add,
) -> tuple[np.ndarray, LmReport]:
    """Minimize ``0.5 * |r(x)|^2`` with Marquardt-damped Gauss-Newton steps.

    ``retract(x, dx)`` applies an increment; the default is vector addition,
    manifold parameterizations pass their own. ``jacobian_fn(x)`` must give the
    derivative of the residual with respect to that increment at ``dx = 0``.
    """
    x = np.array(x0, dtype=np.float64)
    r = np.asarray(residual_fn(x), dtype=np.float64)
    cost = float(r @ r)
    report = LmReport(residual_norms=[float(np.sqrt(cost))])
    lam = cfg.lambda_init
    for it in range(cfg.max_iters):
        report.iterations = it + 1
        jac = np.asarray(jacobian_fn(x), dtype=np.float64)
        g = jac.T @ r
        if not np.any(g):
            report.converged, report.reason = True, "zero gradient"
            return x, report
        jtj = jac.T @ jac
        while True:
            if lam > LAMBDA_MAX:
                raise LmDivergedError(f"damping exceeded {LAMBDA_MAX:g} at iteration {it + 1}")
            report.lambdas.append(lam)
            a = jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-12))
            try:
                dx = np.linalg.solve(a, -g)
            except np.linalg.LinAlgError:
                report.accepted.append(False)
                lam *= cfg.lambda_up
                continue
            x_new = retract(x, dx)
            r_new = np.asarray(residual_fn(x_new), dtype=np.float64)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new <= cost:
                report.accepted.append(True)
                lam = max(lam * cfg.lambda_down, 1e-15)
                break
            report.accepted.append(False)
            lam *= cfg.lambda_up
        decrease = cost - cost_new
        x, r, cost = x_new, r_new, cost_new
        report.residual_norms.append(float(np.sqrt(cost)))
        if np.linalg.norm(dx) < cfg.tol_step:
            report.converged, report.reason = True, "step below tolerance"
            return x, report
        if decrease < cfg.tol_residual * max(cost + decrease, 1.0):
            report.converged, report.reason = True, "residual decrease below tolerance"
            return x, report
    report.reason = "max_iters reached"
    return x, report


def numeric_jacobian(residual_fn, x, retract=_vector_add, h: float = 1e-7, dim: int | None = None) -> np.ndarray:
    """Central differences along each of the ``dim`` increment directions (default ``x.size``)."""
    x = np.asarray(x, dtype=np.float64)
    dim = x.size if dim is None else dim
    cols = []
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = h
        cols.append((np.asarray(residual_fn(retract(x, e))) - np.asarray(residual_fn(retract(x, -e)))) / (2 * h))
    return np.stack(cols, axis=1)


# --- mounting rotation ---------------------------------------------------------------------


@dataclass(frozen=True)
class CalibSample:
    imu_angle: tuple[float, float, float]
    ref_angle: tuple[float, float, float]

    def __post_init__(self):
        for v in (*self.imu_angle, *self.ref_angle):
            if not -180.0 < v <= 180.0:
                raise ValueError(f"angle {v} outside (-180, 180]")


@dataclass
class MountFit:
    rotation: RelPose
    report: LmReport
    n_samples: int

    @property
    def residual_rms_deg(self) -> float:
        return float(np.degrees(self.report.final_residual / np.sqrt(self.n_samples)))

    def as_dict(self) -> dict:
        return {
            "mount_deg": list(self.rotation.phi),
            "final_residual_rad": self.report.final_residual,
            "residual_rms_deg": self.residual_rms_deg,
            "iterations": self.report.iterations,
            "converged": self.report.converged,
            "reason": self.report.reason,
            "n_samples": self.n_samples,
        }


def _matrices(angles) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", P.GimbalLockWarning)
        return P.rotation_matrix(np.asarray(angles, dtype=np.float64))


def _check_span(r_ref: np.ndarray) -> None:
    # relative rotations between samples must excite at least two independent axes
    rv = Rotation.from_matrix(np.swapaxes(r_ref[:1], 1, 2) @ r_ref).as_rotvec()
    sv = np.linalg.svd(rv, compute_uv=False)
    if sv.size < 2 or sv[1] < 1e-6 * max(sv[0], 1.0) or sv[0] < 1e-9:
        raise IllConditionedError("calibration samples span fewer than two rotation axes")


def mount_residuals(mount: np.ndarray, r_ref: np.ndarray, r_imu: np.ndarray) -> np.ndarray:
    """Rotation vectors of ``(R_ref R)^T R_imu``, flattened; their norms are the geodesic errors."""
    err = np.swapaxes(r_ref @ mount, 1, 2) @ r_imu
    return Rotation.from_matrix(err).as_rotvec().ravel()


def fit_mount(samples: Sequence[CalibSample], cfg: LmConfig = LmConfig(), init=None) -> MountFit:
    """Fixed rotation ``R`` with ``R_ref R ~ R_imu`` over all samples."""
    if len(samples) < 3:
        raise IllConditionedError(f"need at least 3 samples, got {len(samples)}")
    r_imu = _matrices([s.imu_angle for s in samples])
    r_ref = _matrices([s.ref_angle for s in samples])
    _check_span(r_ref)

    if init is None:
        # chordal mean of the per-sample mounts as a starting point
        u, _, vt = np.linalg.svd((np.swapaxes(r_ref, 1, 2) @ r_imu).sum(axis=0))
        x0 = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt
    else:
        x0 = _matrices(init)

    def retract(m, dx):
        return m @ Rotation.from_rotvec(dx).as_matrix()

    def residual(m):
        return mount_residuals(m, r_ref, r_imu)

    mount, report = lm_solve(residual, lambda m: numeric_jacobian(residual, m, retract, dim=3), x0, cfg, retract)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", P.GimbalLockWarning)
        phi = P.matrix_to_euler(mount)
    return MountFit(RelPose(phi=tuple(float(v) for v in phi)), report, len(samples))


def samples_from_scan(scan, j: int) -> list[CalibSample]:
    """Pair IMU ``j``'s orientation at every frame with the ground-truth probe orientation."""
    if scan.gt is None:
        raise ValueError(f"scan {scan.id} has no ground truth")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", P.GimbalLockWarning)
        ref = P.matrix_to_euler(scan.gt.absolute_matrices()[:, :3, :3])
    imu = scan.imu_frames()[j, :, :3]
    return [CalibSample(tuple(a), tuple(b)) for a, b in zip(P.wrap_deg(imu), P.wrap_deg(ref))]


def calibration_report(fits: Sequence[MountFit], truth=None) -> str:
    rows = []
    for j, fit in enumerate(fits):
        row = {"imu": j, **fit.as_dict()}
        if truth is not None:
            row["error_deg"] = float(
                P.geodesic_deg(fit.rotation.to_matrix()[:3, :3], _matrices(truth[j]))
            )
        rows.append(row)
    return json.dumps({"mounts": rows, "converged": all(f.report.converged for f in fits)}, indent=2, sort_keys=True)
