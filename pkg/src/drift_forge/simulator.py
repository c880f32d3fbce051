"""Synthetic freehand scans: probe trajectories, mounted IMUs and observation vectors.

Frame axes of the probe: x lateral, y elevation (sweep direction), z depth.
IMU reading ``k`` is sampled at frame ``k``. A scan stores the readings of
frames ``0..N-2`` in ``imu`` and the reading of the final frame in
``imu_tail`` so that sub-sampling and reversal stay exact.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pose as P
from .pose import PoseChain, RelPose

GRAVITY_MM_S2 = 9806.65
ANGLE_RESOLUTION_DEG = 0.5
ACCEL_RESOLUTION_G = 5e-4
PRESET_LENGTH_MM = {"arm": 323.96, "carotid": 203.25}
DEFAULT_MOUNT_ANGLES = ((0.0, 0.0, 0.0), (90.0, 0.0, 0.0), (0.0, 90.0, 0.0), (0.0, 0.0, 90.0))


class ScanTactic(str, Enum):
    LINEAR = "linear"
    CURVED = "curved"
    LOOP = "loop"
    SECTOR = "sector"

    @classmethod
    def parse(cls, value: "str | ScanTactic") -> "ScanTactic":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown scan tactic {value!r}; expected one of {[t.value for t in cls]}") from None


@dataclass(frozen=True)
class Resolution:
    angle_deg: float = ANGLE_RESOLUTION_DEG
    accel_g: float = ACCEL_RESOLUTION_G


@dataclass(frozen=True)
class ImuMount:
    rotation: RelPose = RelPose()
    accel_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    angle_noise_sd: float = 0.0
    accel_noise_sd: float = 0.0

    def __post_init__(self):
        if any(v != 0.0 for v in self.rotation.t):
            raise ValueError("mount rotation must have zero translation")
        if self.angle_noise_sd < 0 or self.accel_noise_sd < 0:
            raise ValueError("noise SDs must be >= 0")

    @property
    def matrix(self) -> np.ndarray:
        return P.rotation_matrix(np.asarray(self.rotation.phi))


@dataclass(frozen=True)
class ImuReading:
    angle: tuple[float, float, float]
    accel: tuple[float, float, float]


@dataclass(frozen=True)
class TrajectoryConfig:
    """Shape randomness of generated trajectories."""

    jitter_mm: float = 0.2
    jitter_deg: float = 0.1
    speed_var: float = 0.25
    curve_turn_deg: tuple[float, float] = (30.0, 60.0)
    sector_sweep_deg: tuple[float, float] = (40.0, 70.0)

    @classmethod
    def smooth(cls) -> "TrajectoryConfig":
        return cls(jitter_mm=0.0, jitter_deg=0.0, speed_var=0.0)


@dataclass
class Scan:
    obs: np.ndarray  # (N-1, d)
    imu: np.ndarray  # (M, N-1, 6): angle deg, accel g
    imu_tail: np.ndarray  # (M, 6): reading at the final frame
    dt: float
    tactic: ScanTactic
    id: str
    gt: PoseChain | None = None
    subject: str = ""

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64)
        self.imu = np.asarray(self.imu, dtype=np.float64)
        self.imu_tail = np.asarray(self.imu_tail, dtype=np.float64).reshape(self.imu.shape[0], 6)
        self.tactic = ScanTactic.parse(self.tactic)
        n = len(self.obs)
        if n < 2:
            raise ValueError("a scan needs N >= 3 frames")
        if self.imu.ndim != 3 or self.imu.shape[1] != n or self.imu.shape[2] != 6:
            raise ValueError(f"imu must be (M, {n}, 6), got {self.imu.shape}")
        if self.gt is not None and len(self.gt) != n:
            raise ValueError("gt length must equal obs length")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")

    @property
    def n_frames(self) -> int:
        return len(self.obs) + 1

    @property
    def n_imu(self) -> int:
        return self.imu.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    def imu_frames(self) -> np.ndarray:
        """Readings for all N frames, (M, N, 6)."""
        return np.concatenate([self.imu, self.imu_tail[:, None, :]], axis=1)

    def readings(self, j: int) -> list[ImuReading]:
        return [ImuReading(tuple(r[:3]), tuple(r[3:])) for r in self.imu[j]]


# --- trajectories ------------------------------------------------------------


def _speed_profile(n: int, amp: float, rng: np.random.Generator) -> np.ndarray:
    k = np.arange(n) / max(n - 1, 1)
    f1, f2 = rng.uniform(0.5, 1.5), rng.uniform(2.0, 4.0)
    p1, p2 = rng.uniform(0, 2 * math.pi, 2)
    v = 1.0 + amp * (0.6 * np.sin(2 * math.pi * f1 * k + p1) + 0.4 * np.sin(2 * math.pi * f2 * k + p2))
    return v / v.mean()


def gen_trajectory(
    tactic: "ScanTactic | str",
    n_frames: int,
    length: float,
    seed: int,
    config: TrajectoryConfig | None = None,
) -> PoseChain:
    """Ground-truth relative chain whose frame-center path length equals ``length`` mm."""
    tactic = ScanTactic.parse(tactic)
    if int(n_frames) != n_frames or n_frames < 3:
        raise ValueError("n_frames must be an integer >= 3")
    if not length > 0:
        raise ValueError("length must be > 0")
    cfg = config or TrajectoryConfig()
    rng = np.random.default_rng(seed)
    n = n_frames - 1
    v = _speed_profile(n, cfg.speed_var, rng)
    rel = np.zeros((n, 6))
    if tactic is ScanTactic.LINEAR:
        rel[:, 1] = v
    elif tactic in (ScanTactic.CURVED, ScanTactic.LOOP):
        if tactic is ScanTactic.LOOP:
            turn = 360.0 * rng.choice([-1.0, 1.0])
        else:
            turn = rng.uniform(*cfg.curve_turn_deg) * rng.choice([-1.0, 1.0])
        # constant radius: each step is an exact chord of the same circle
        delta = np.radians(v * abs(turn) / n)
        radius = 1.0 / math.radians(abs(turn) / n)
        rel[:, 0] = -math.copysign(1.0, turn) * radius * (1.0 - np.cos(delta))
        rel[:, 1] = radius * np.sin(delta)
        rel[:, 5] = math.copysign(1.0, turn) * np.degrees(delta)
    elif tactic is ScanTactic.SECTOR:
        sweep = rng.uniform(*cfg.sector_sweep_deg)
        alpha = np.radians(v * sweep / n)
        radius = 1.0 / math.radians(sweep / n)  # pivot above the image center, on the skin
        rel[:, 1] = radius * np.sin(alpha)
        rel[:, 2] = -radius * (1.0 - np.cos(alpha))
        rel[:, 3] = -np.degrees(alpha)
    mean_step = length / n
    rel[:, :3] *= mean_step
    if cfg.jitter_mm > 0:
        rel[:, :3] += rng.normal(0.0, cfg.jitter_mm, (n, 3))
    if cfg.jitter_deg > 0:
        rel[:, 3:] += rng.normal(0.0, cfg.jitter_deg, (n, 3))
    # rotations do not change step norms, so this fixes the path length exactly
    rel[:, :3] *= length / np.linalg.norm(rel[:, :3], axis=1).sum()
    return PoseChain(rel)


# --- IMU -----------------------------------------------------------------------


def quantize(x, step: float) -> np.ndarray:
    """Round to multiples of ``step``; a step of 0 leaves values untouched."""
    if step < 0:
        raise ValueError("quantization step must be >= 0")
    if step == 0:
        return np.asarray(x, dtype=np.float64)
    return np.round(np.asarray(x) / step) * step


def frame_accelerations(positions: np.ndarray, dt: float) -> np.ndarray:
    """Second difference of positions in mm/s^2 per frame; end frames assume constant velocity."""
    acc = np.zeros_like(positions)
    acc[1:-1] = (positions[2:] - 2.0 * positions[1:-1] + positions[:-2]) / dt**2
    return acc


def simulate_imu_frames(
    gt: PoseChain,
    mount: ImuMount,
    dt: float,
    resolution: Resolution = Resolution(),
    seed: int | np.random.Generator = 0,
    gravity: bool = True,
) -> np.ndarray:
    """Readings at all N frames, (N, 6)."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if len(gt) < 1:
        raise ValueError("need at least one relative step")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    absolute = gt.absolute_matrices()
    r_imu = absolute[:, :3, :3] @ mount.matrix
    n = len(absolute)
    with warnings.catch_warnings():
        # mounts rotated 90 deg about y sit at the Euler singularity by design
        warnings.simplefilter("ignore", P.GimbalLockWarning)
        angle = P.matrix_to_euler(r_imu)
    angle = angle + rng.normal(0.0, 1.0, (n, 3)) * mount.angle_noise_sd
    angle = P.wrap_deg(quantize(angle, resolution.angle_deg))

    acc_world = frame_accelerations(absolute[:, :3, 3], dt) / GRAVITY_MM_S2
    if gravity:
        acc_world = acc_world + np.array([0.0, 0.0, 1.0])
    acc = np.einsum("nji,nj->ni", r_imu, acc_world)
    acc = acc + np.asarray(mount.accel_bias) + rng.normal(0.0, 1.0, (n, 3)) * mount.accel_noise_sd
    acc = quantize(acc, resolution.accel_g)
    return np.concatenate([angle, acc], axis=1)


def simulate_imu(
    gt: PoseChain,
    mount: ImuMount,
    dt: float,
    resolution: Resolution = Resolution(),
    seed: int | np.random.Generator = 0,
) -> list[ImuReading]:
    """Readings at frames 0..N-2 (one per relative step)."""
    frames = simulate_imu_frames(gt, mount, dt, resolution, seed)
    return [ImuReading(tuple(r[:3]), tuple(r[3:])) for r in frames[:-1]]


# --- observations ----------------------------------------------------------------


def synth_observations(
    rel: np.ndarray,
    obs_noise_sd: float,
    elevation_gain: float,
    rng: np.random.Generator,
    dim: int = 16,
    elevation_noise_sd: float = 0.5,
) -> np.ndarray:
    """Observation vectors for a batch of steps, (n, dim)."""
    if dim < 7:
        raise ValueError("observation dimension must be >= 7")
    rel = np.asarray(rel, dtype=np.float64).reshape(-1, 6)
    n = len(rel)
    head = rel.copy()
    head[:, 1] = rel[:, 1] * elevation_gain * (1.0 + elevation_noise_sd * rng.normal(size=n))
    head += obs_noise_sd * rng.normal(size=(n, 6))
    distractors = rng.normal(size=(n, dim - 6))
    return np.concatenate([head, distractors], axis=1)


def synth_observation(
    gt_step: RelPose,
    obs_noise_sd: float,
    elevation_gain: float,
    seed: int,
    dim: int = 16,
    elevation_noise_sd: float = 0.5,
) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return synth_observations(gt_step.as_array(), obs_noise_sd, elevation_gain, rng, dim, elevation_noise_sd)[0]


# --- sub-sequences -----------------------------------------------------------------


def frame_indices(
    n_frames: int, stride: int = 1, offset: int = 0, length: int | None = None, min_frames: int = 3
) -> np.ndarray:
    if stride < 1 or offset < 0:
        raise ValueError("stride must be >= 1 and offset >= 0")
    idx = np.arange(offset, n_frames, stride)
    if length is not None:
        idx = idx[:length]
    if len(idx) < min_frames:
        raise ValueError(f"sub-sequence has {len(idx)} frames; at least {min_frames} are required")
    return idx


def compose_strided(rel, stride: int, offset: int, n_steps: int):
    """Compose ``stride`` consecutive steps into one, for ``n_steps`` output steps.

    Works on arrays and tape tensors of shape (..., T, 6).
    """
    block = rel[..., offset : offset + stride * n_steps, :]
    if stride == 1:
        return block
    shape = block.shape[:-2] + (n_steps, stride, 6)
    block = block.reshape(shape)
    out = block[..., 0, :]
    for k in range(1, stride):
        out = P.compose_params(out, block[..., k, :])
    return out


def reverse_steps(rel):
    """Steps of the time-reversed sequence: inverted and in reverse order."""
    return P.invert_params(rel[..., ::-1, :])


def resample_scan(scan: Scan, stride: int = 1, flip: bool = False, offset: int = 0, length: int | None = None) -> Scan:
    """Sub-sample frames at ``offset, offset+stride, ...`` and optionally reverse time.

    Observations of merged steps are summed (negated under reversal), standing
    in for the image-pair content of the new frame pairs. IMU readings are
    taken at the kept frames.
    """
    idx = frame_indices(scan.n_frames, stride, offset, length)
    k = len(idx) - 1
    obs = scan.obs[offset : offset + stride * k].reshape(k, stride, -1).sum(axis=1)
    readings = scan.imu_frames()[:, idx]
    gt = None
    if scan.gt is not None:
        gt_rel = compose_strided(scan.gt.rel, stride, offset, k)
    if flip:
        obs = -obs[::-1]
        readings = readings[:, ::-1]
        if scan.gt is not None:
            gt_rel = reverse_steps(gt_rel)
    if scan.gt is not None:
        gt = PoseChain(gt_rel)
    tag = "" if (stride, flip, offset, length) == (1, False, 0, None) else f"~s{stride}o{offset}{'f' if flip else ''}"
    return Scan(
        obs=np.ascontiguousarray(obs),
        imu=np.ascontiguousarray(readings[:, :-1]),
        imu_tail=readings[:, -1],
        dt=scan.dt * stride,
        tactic=scan.tactic,
        id=scan.id + tag,
        gt=gt,
        subject=scan.subject,
    )


def reverse_scan(scan: Scan) -> Scan:
    return resample_scan(scan, flip=True)


# --- scans and datasets --------------------------------------------------------


@dataclass(frozen=True)
class SensorConfig:
    mount_angles: tuple[tuple[float, float, float], ...] = DEFAULT_MOUNT_ANGLES
    angle_noise_sd: float = 0.2
    accel_noise_sd: float = 1e-3
    accel_bias_sd: float = 5e-3
    obs_dim: int = 16
    obs_noise_sd: float = 0.3
    elevation_gain: float = 0.3
    elevation_noise_sd: float = 0.5
    angle_resolution_deg: float = ANGLE_RESOLUTION_DEG
    accel_resolution_g: float = ACCEL_RESOLUTION_G

    @property
    def resolution(self) -> Resolution:
        return Resolution(self.angle_resolution_deg, self.accel_resolution_g)

    @classmethod
    def noiseless(cls, **kw) -> "SensorConfig":
        base = dict(angle_noise_sd=0.0, accel_noise_sd=0.0, accel_bias_sd=0.0, angle_resolution_deg=0.0, accel_resolution_g=0.0)
        base.update(kw)
        return cls(**base)

    def mounts(self, rng: np.random.Generator) -> list[ImuMount]:
        return [
            ImuMount(
                rotation=RelPose(phi=a),
                accel_bias=tuple(rng.normal(0.0, self.accel_bias_sd, 3)),
                angle_noise_sd=self.angle_noise_sd,
                accel_noise_sd=self.accel_noise_sd,
            )
            for a in self.mount_angles
        ]


def simulate_scan(
    tactic: "ScanTactic | str",
    n_frames: int,
    length: float,
    seed: int,
    dt: float = 0.1,
    sensors: SensorConfig = SensorConfig(),
    trajectory: TrajectoryConfig | None = None,
    scan_id: str | None = None,
    subject: str = "",
) -> Scan:
    tactic = ScanTactic.parse(tactic)
    ss = np.random.SeedSequence(seed)
    traj_seed, imu_seed, obs_seed = ss.spawn(3)
    gt = gen_trajectory(tactic, n_frames, length, int(traj_seed.generate_state(1)[0]), trajectory)
    rng_imu = np.random.default_rng(imu_seed)
    mounts = sensors.mounts(rng_imu)
    frames = np.stack([simulate_imu_frames(gt, m, dt, sensors.resolution, rng_imu) for m in mounts])
    obs = synth_observations(
        gt.rel,
        sensors.obs_noise_sd,
        sensors.elevation_gain,
        np.random.default_rng(obs_seed),
        sensors.obs_dim,
        sensors.elevation_noise_sd,
    )
    return Scan(
        obs=obs,
        imu=frames[:, :-1],
        imu_tail=frames[:, -1],
        dt=dt,
        tactic=tactic,
        id=scan_id or f"{tactic.value}-{seed}",
        gt=gt,
        subject=subject,
    )


@dataclass(frozen=True)
class DatasetConfig:
    n_subjects: int = 10
    scans_per_subject: int = 4
    split: tuple[int, int, int] = (6, 2, 2)
    tactics: tuple[str, ...] = ("linear", "curved", "loop", "sector")
    n_frames: int = 100
    preset: str = "arm"
    length_mm: float | None = None
    length_spread: float = 0.2
    dt: float = 0.1
    sensors: SensorConfig = field(default_factory=SensorConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    augment_train: int = 0
    augment_min_frames: int = 20
    seed: int = 0

    def validate(self) -> None:
        if self.n_subjects < 1 or self.scans_per_subject < 1:
            raise ValueError("need at least one subject and one scan per subject")
        if len(self.split) != 3 or min(self.split) < 0 or sum(self.split) != self.n_subjects:
            raise ValueError(f"split {self.split} must be 3 non-negative subject counts summing to {self.n_subjects}")
        if not self.tactics:
            raise ValueError("tactic mix is empty")
        for t in self.tactics:
            ScanTactic.parse(t)
        if self.n_frames < 3:
            raise ValueError("n_frames must be >= 3")
        if self.length_mm is None and self.preset not in PRESET_LENGTH_MM:
            raise ValueError(f"unknown preset {self.preset!r}")
        if not 0 <= self.length_spread < 1:
            raise ValueError("length_spread must lie in [0, 1)")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.augment_train < 0 or self.augment_min_frames < 3:
            raise ValueError("invalid augmentation settings")

    @property
    def mean_length(self) -> float:
        return self.length_mm if self.length_mm is not None else PRESET_LENGTH_MM[self.preset]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "sensors" in d and isinstance(d["sensors"], dict):
            s = dict(d["sensors"])
            if "mount_angles" in s:
                s["mount_angles"] = tuple(tuple(float(v) for v in a) for a in s["mount_angles"])
            d["sensors"] = SensorConfig(**s)
        if "trajectory" in d and isinstance(d["trajectory"], dict):
            t = {k: tuple(v) if isinstance(v, list) else v for k, v in d["trajectory"].items()}
            d["trajectory"] = TrajectoryConfig(**t)
        for key in ("split", "tactics"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def random_augment(scan: Scan, rng: np.random.Generator, min_frames: int = 20, max_stride: int = 3) -> Scan:
    """Random crop, interval sampling and reversal of one scan."""
    n = scan.n_frames
    stride = int(rng.integers(1, max_stride + 1))
    while stride > 1 and (n - 1) // stride + 1 < min_frames:
        stride -= 1
    avail = (n - 1) // stride + 1
    length = int(rng.integers(min(min_frames, avail), avail + 1))
    span = (length - 1) * stride
    offset = int(rng.integers(0, n - 1 - span + 1))
    flip = bool(rng.random() < 0.5)
    return resample_scan(scan, stride=stride, flip=flip, offset=offset, length=length)


def make_dataset(config: DatasetConfig) -> dict[str, list[Scan]]:
    """Simulate subjects, assign them to train/val/test, and augment the training split."""
    config.validate()
    root = np.random.SeedSequence(config.seed)
    split_rng = np.random.default_rng(root.spawn(1)[0])
    order = split_rng.permutation(config.n_subjects)
    n_tr, n_va, _ = config.split
    split_of = {}
    for rank, subj in enumerate(order):
        split_of[int(subj)] = "train" if rank < n_tr else ("val" if rank < n_tr + n_va else "test")

    total = config.n_subjects * config.scans_per_subject
    # stratified length factors keep the dataset mean on the preset
    strata = (split_rng.permutation(total) + split_rng.uniform(size=total)) / total
    factors = 1.0 + config.length_spread * (2.0 * strata - 1.0)
    scan_seeds = root.spawn(total + 1)
    aug_rng = np.random.default_rng(scan_seeds[-1])

    out: dict[str, list[Scan]] = {"train": [], "val": [], "test": []}
    k = 0
    for subj in range(config.n_subjects):
        for s in range(config.scans_per_subject):
            tactic = ScanTactic.parse(config.tactics[k % len(config.tactics)])
            scan = simulate_scan(
                tactic,
                config.n_frames,
                config.mean_length * factors[k],
                int(scan_seeds[k].generate_state(1)[0]),
                dt=config.dt,
                sensors=config.sensors,
                trajectory=config.trajectory,
                scan_id=f"subj{subj:03d}-scan{s:02d}-{tactic.value}",
                subject=f"subj{subj:03d}",
            )
            split = split_of[subj]
            out[split].append(scan)
            if split == "train":
                for a in range(config.augment_train):
                    aug = random_augment(scan, aug_rng, config.augment_min_frames)
                    aug.id = f"{scan.id}-aug{a:02d}"
                    out[split].append(aug)
            k += 1
    return out


# --- file format ---------------------------------------------------------------------


def scan_to_dict(scan: Scan) -> dict:
    return {
        "id": scan.id,
        "subject": scan.subject,
        "tactic": scan.tactic.value,
        "dt": scan.dt,
        "N": scan.n_frames,
        "M": scan.n_imu,
        "d": scan.obs_dim,
        "gt": None if scan.gt is None else scan.gt.rel.tolist(),
        "obs": scan.obs.tolist(),
        "imu": scan.imu.tolist(),
        "imu_tail": scan.imu_tail.tolist(),
    }


def scan_from_dict(d: dict) -> Scan:
    imu = np.asarray(d["imu"], dtype=np.float64)
    tail = d.get("imu_tail")
    if tail is None:
        # files without the final-frame reading: hold the last one
        tail = imu[:, -1]
    scan = Scan(
        obs=np.asarray(d["obs"], dtype=np.float64),
        imu=imu,
        imu_tail=np.asarray(tail, dtype=np.float64),
        dt=float(d["dt"]),
        tactic=d["tactic"],
        id=str(d["id"]),
        gt=None if d.get("gt") is None else PoseChain(d["gt"]),
        subject=str(d.get("subject", "")),
    )
    if scan.n_frames != d.get("N", scan.n_frames) or scan.n_imu != d.get("M", scan.n_imu):
        raise ValueError(f"scan {scan.id}: header N/M disagree with arrays")
    if scan.obs_dim != d.get("d", scan.obs_dim):
        raise ValueError(f"scan {scan.id}: header d disagrees with obs")
    return scan


def save_scan(scan: Scan, path: "str | Path") -> None:
    Path(path).write_text(json.dumps(scan_to_dict(scan)))


def load_scan(path: "str | Path") -> Scan:
    return scan_from_dict(json.loads(Path(path).read_text()))
