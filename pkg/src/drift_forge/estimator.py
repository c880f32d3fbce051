"""Recurrent motion estimator: (observation, one IMU stream) -> relative pose per step."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import pose as P
from .losses import supervised_loss
from .optim import AdamState, adam_step, lr_schedule
from .pose import RelPose
from .simulator import DEFAULT_MOUNT_ANGLES, Scan

log = logging.getLogger(__name__)

PARAM_NAMES = ("W_in", "W_h", "b_h", "W_out", "b_out")
IMU_FEATURES = 6


class TrainingError(RuntimeError):
    pass


# --- IMU pre-processing ----------------------------------------------------------


@dataclass(frozen=True)
class ImuFeatures:
    """Probe-frame IMU inputs per step.

    ``dphi[j, k]`` is the Euler parameterization of the relative rotation
    between the calibrated orientations of IMU ``j`` at frames ``k`` and
    ``k+1``; ``accel[j, k]`` is the calibrated linear acceleration at frame
    ``k`` in g with gravity removed using the measured orientation.
    """

    dphi: np.ndarray  # (M, N-1, 3)
    accel: np.ndarray  # (M, N-1, 3)


def imu_features(scan: Scan, mount_angles: Sequence[Sequence[float]] = DEFAULT_MOUNT_ANGLES) -> ImuFeatures:
    mounts = np.asarray(mount_angles, dtype=np.float64).reshape(-1, 3)
    if len(mounts) != scan.n_imu:
        raise ValueError(f"scan {scan.id} has {scan.n_imu} IMUs but {len(mounts)} mounts were given")
    frames = scan.imu_frames()
    r_mount = P.rotation_matrix(mounts)  # (M, 3, 3)
    r_probe = P.rotation_matrix(frames[..., :3]) @ np.swapaxes(r_mount, -1, -2)[:, None]
    rel = np.swapaxes(r_probe[:, :-1], -1, -2) @ r_probe[:, 1:]
    dphi = P.matrix_to_euler(rel)
    acc = np.einsum("mij,mnj->mni", r_mount, frames[..., 3:])
    acc = acc - r_probe[..., 2, :]  # R^T (0, 0, 1)
    return ImuFeatures(dphi=dphi, accel=acc[:, :-1])


def model_inputs(scan: Scan, feats: ImuFeatures) -> np.ndarray:
    """Raw per-step inputs (M, N-1, d+6) = [obs, dphi, accel]."""
    m = feats.dphi.shape[0]
    obs = np.broadcast_to(scan.obs, (m,) + scan.obs.shape)
    return np.concatenate([obs, feats.dphi, feats.accel], axis=-1)


# --- model -------------------------------------------------------------------------


@dataclass
class MotionModel:
    W_in: np.ndarray
    W_h: np.ndarray
    b_h: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray
    in_mean: np.ndarray
    in_scale: np.ndarray
    out_mean: np.ndarray
    out_scale: np.ndarray
    seed: int = 0

    @classmethod
    def init(cls, obs_dim: int, hidden: int = 32, seed: int = 0) -> "MotionModel":
        if hidden < 4:
            raise ValueError("hidden size must be >= 4")
        rng = np.random.default_rng(seed)
        n_in = obs_dim + IMU_FEATURES

        def uniform(shape, fan_in):
            b = math.sqrt(1.0 / fan_in)
            return rng.uniform(-b, b, shape)

        return cls(
            W_in=uniform((hidden, n_in), n_in),
            W_h=uniform((hidden, hidden), hidden),
            b_h=uniform((hidden,), hidden),
            W_out=uniform((6, hidden), hidden),
            b_out=uniform((6,), hidden),
            in_mean=np.zeros(n_in),
            in_scale=np.ones(n_in),
            out_mean=np.zeros(6),
            out_scale=np.ones(6),
            seed=seed,
        )

    @property
    def hidden(self) -> int:
        return self.W_h.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.W_in.shape[1] - IMU_FEATURES

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, k).ravel() for k in PARAM_NAMES])

    def with_flat(self, vec: np.ndarray) -> "MotionModel":
        out = self.copy()
        i = 0
        for k in PARAM_NAMES:
            a = getattr(self, k)
            setattr(out, k, np.array(vec[i : i + a.size]).reshape(a.shape))
            i += a.size
        return out

    def copy(self) -> "MotionModel":
        return MotionModel(**{k: np.array(v, copy=True) if isinstance(v, np.ndarray) else v for k, v in vars(self).items()})

    def leaves(self) -> dict[str, ad.Tensor]:
        return {k: ad.Tensor(getattr(self, k), requires_grad=True) for k in PARAM_NAMES}

    def check_finite(self) -> None:
        for k in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, k))):
                raise ValueError(f"parameter {k} has non-finite entries")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k).ravel().tolist() for k in vars(self) if k != "seed"}
        d["shapes"] = {k: list(getattr(self, k).shape) for k in vars(self) if k != "seed"}
        d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MotionModel":
        shapes = d["shapes"]
        arrays = {k: np.asarray(d[k], dtype=np.float64).reshape(shapes[k]) for k in shapes}
        model = cls(**arrays, seed=int(d.get("seed", 0)))
        model.check_finite()
        return model

    def fit_normalization(self, inputs: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> None:
        """Set input/output scaling from training inputs (…, d+6) and targets (…, 6)."""
        # per-stream sums combined pairwise, so duplicated IMU streams give the same statistics exactly
        streams = [np.asarray(i, dtype=np.float64).reshape((-1,) + i.shape[-2:]) for i in inputs]
        n = sum(x.shape[0] * x.shape[1] for x in streams)
        mean = sum(ad.pairwise_sum0(x.sum(axis=1)) for x in streams) / n
        var = sum(ad.pairwise_sum0(((x - mean) ** 2).sum(axis=1)) for x in streams) / n
        y = np.concatenate([t.reshape(-1, 6) for t in targets])
        self.in_mean, self.in_scale = mean, np.maximum(np.sqrt(var), 1e-6)
        self.out_mean, self.out_scale = y.mean(0), np.maximum(y.std(0), 1e-6)


def run_network(params: Mapping, model: MotionModel, x: np.ndarray):
    """Evaluate the recurrence on raw inputs ``x`` of shape (..., T, d+6) -> (..., T, 6).

    ``params`` maps parameter names to arrays or tape tensors.
    """
    x = (np.asarray(x, dtype=np.float64) - model.in_mean) / model.in_scale
    if x.ndim == 2:
        x = x[None]
    pre = ad.matmul(x, ad.swapaxes(params["W_in"], 0, 1)) + params["b_h"]  # (B, T, h)
    w_hT = ad.swapaxes(params["W_h"], 0, 1)
    h = None
    states = []
    for i in range(x.shape[1]):
        a = pre[:, i : i + 1, :]  # (B, 1, h) keeps weight gradients separate per stream
        if h is not None:
            a = a + ad.matmul(h, w_hT)
        h = ad.tanh(a)
        states.append(h)
    hs = ad.concatenate(states, axis=1)
    out = ad.matmul(hs, ad.swapaxes(params["W_out"], 0, 1)) + params["b_out"]
    return out * model.out_scale + model.out_mean


def forward_sequence(model: MotionModel, obs: np.ndarray, imu_j, params: Mapping | None = None):
    """Estimate N-1 relative poses from one observation sequence and one IMU stream.

    ``imu_j`` is an (N-1, 6) array of pre-processed IMU inputs (dphi, accel).
    Returns an (N-1, 6) array, or a tape tensor when ``params`` holds tensors.
    """
    obs = np.asarray(obs, dtype=np.float64)
    imu_j = np.asarray(imu_j, dtype=np.float64)
    if len(obs) != len(imu_j):
        raise ValueError(f"obs has {len(obs)} steps but the IMU stream has {len(imu_j)}")
    x = np.concatenate([obs, imu_j], axis=-1)
    out = run_network(params or model.params(), model, x)
    return out[0]


def sequence_poses(theta) -> list[RelPose]:
    return [RelPose.from_array(r) for r in ad.value_of(theta)]


def imu_mean(per_imu):
    """Average over the IMU axis; exactly invariant to stream order.

    Values are sorted along the IMU axis and summed pairwise, so duplicated
    streams reproduce the single-stream value bit for bit when M is a power of two.
    """
    m = per_imu.shape[0]
    order = np.argsort(ad.value_of(per_imu), axis=0, kind="stable")
    vals = ad.take_along_axis(per_imu, order, axis=0)
    parts = [vals[j] for j in range(m)]
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0] / float(m)


@dataclass
class EstimateSet:
    per_imu: object  # (M, N-1, 6) array or tensor
    mean: object  # (N-1, 6)

    def values(self) -> "EstimateSet":
        return EstimateSet(ad.value_of(self.per_imu), ad.value_of(self.mean))

    def mean_poses(self) -> list[RelPose]:
        return sequence_poses(self.mean)


@dataclass
class PreparedScan:
    """A scan with its model inputs and IMU features computed once."""

    scan: Scan
    feats: ImuFeatures
    inputs: np.ndarray

    @classmethod
    def build(cls, scan: Scan, mount_angles=DEFAULT_MOUNT_ANGLES) -> "PreparedScan":
        feats = imu_features(scan, mount_angles)
        return cls(scan, feats, model_inputs(scan, feats))


def forward_all(model: MotionModel, scan: "Scan | PreparedScan", params: Mapping | None = None, mount_angles=DEFAULT_MOUNT_ANGLES) -> EstimateSet:
    prep = scan if isinstance(scan, PreparedScan) else PreparedScan.build(scan, mount_angles)
    if prep.inputs.shape[0] < 1:
        raise ValueError("scan has no IMU streams")
    per_imu = run_network(params or model.params(), model, prep.inputs)
    return EstimateSet(per_imu=per_imu, mean=imu_mean(per_imu))


# --- training --------------------------------------------------------------------


def prepare_training_set(model: MotionModel, scans: Sequence[Scan], mount_angles=DEFAULT_MOUNT_ANGLES) -> list[PreparedScan]:
    out = []
    for s in scans:
        if s.gt is None:
            raise ValueError(f"training scan {s.id} has no ground truth")
        prep = PreparedScan.build(s, mount_angles)
        if prep.inputs.shape[-1] != model.W_in.shape[1]:
            raise ValueError(f"scan {s.id} inputs have width {prep.inputs.shape[-1]}, model expects {model.W_in.shape[1]}")
        out.append(prep)
    return out


def scan_loss_and_grad(model: MotionModel, prep: PreparedScan) -> tuple[float, np.ndarray]:
    leaves = model.leaves()
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            est = forward_all(model, prep, leaves)
            loss = supervised_loss(est.mean, prep.scan.gt.rel)
        if not np.isfinite(loss.item()):
            raise TrainingError(f"non-finite loss on scan {prep.scan.id}")
        ad.backward(loss)
    except ad.NonFiniteError as exc:
        raise TrainingError(f"non-finite value on scan {prep.scan.id}: {exc}") from exc
    return loss.item(), np.concatenate([leaves[k].grad.ravel() for k in PARAM_NAMES])


def train(
    model: MotionModel,
    scans: Sequence[Scan],
    epochs: int = 200,
    batch: int = 1,
    seed: int = 0,
    schedule: Callable[[int], float] | None = None,
    mount_angles=DEFAULT_MOUNT_ANGLES,
    fit_normalization: bool = True,
    callback: Callable[[int, float], None] | None = None,
) -> tuple[MotionModel, list[float]]:
    """Train on the M-pass average with Adam; returns the trained copy and per-epoch mean loss."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    schedule = schedule or (lambda e: lr_schedule("train", e))
    model = model.copy()
    preps = prepare_training_set(model, scans, mount_angles)
    if fit_normalization and preps:
        model.fit_normalization([p.inputs for p in preps], [p.scan.gt.rel for p in preps])
    rng = np.random.default_rng(seed)
    flat = model.flat()
    state = AdamState.zeros(flat.size)
    curve = []
    for epoch in range(epochs):
        lr = schedule(epoch)
        losses = []
        order = rng.permutation(len(preps))
        for start in range(0, len(order), batch):
            grads = []
            for i in order[start : start + batch]:
                value, g = scan_loss_and_grad(model, preps[i])
                losses.append(value)
                grads.append(g)
            flat = adam_step(flat, np.mean(grads, axis=0), state, lr)
            model = model.with_flat(flat)
        curve.append(float(np.mean(losses)) if losses else 0.0)
        if callback:
            callback(epoch, curve[-1])
        log.debug("epoch %d lr %.2e loss %.5f", epoch, lr, curve[-1])
    return model, curve


# --- checkpoints ------------------------------------------------------------------


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(model: MotionModel, path: "str | Path", config: dict | None = None) -> None:
    doc = {"model": model.to_dict(), "config": config or {}, "config_hash": config_hash(config or {})}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: "str | Path") -> tuple[MotionModel, dict, str]:
    doc = json.loads(Path(path).read_text())
    return MotionModel.from_dict(doc["model"]), doc.get("config", {}), doc.get("config_hash", "")
