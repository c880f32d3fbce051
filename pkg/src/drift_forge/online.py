"""Per-scan test-time refinement with the multi-IMU and self-consistency objectives."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .estimator import EstimateSet, MotionModel, PARAM_NAMES, PreparedScan, forward_all
from .losses import (
    DEFAULT_WEIGHTS,
    LossBreakdown,
    TauSpec,
    apply_tau_to_scan,
    h_tau,
    mae,
    multi_imu_loss,
    sample_tau,
    single_imu_loss,
)
from .metrics import MetricReport, compute_report
from .optim import ONLINE_LR, AdamState, RejectedStepError, adam_step
from .simulator import DEFAULT_MOUNT_ANGLES, Scan

log = logging.getLogger(__name__)


def self_consistency_loss(
    model: MotionModel,
    scan: "Scan | PreparedScan",
    tau: TauSpec,
    params: Mapping | None = None,
    full: EstimateSet | None = None,
    mount_angles=DEFAULT_MOUNT_ANGLES,
):
    """MAE between the estimate on the tau-transformed scan and tau applied to the full estimate.

    ``full`` may carry an already computed estimate of the whole scan (same
    ``params``) to avoid a second forward pass.
    """
    prep = scan if isinstance(scan, PreparedScan) else PreparedScan.build(scan, mount_angles)
    if full is None:
        full = forward_all(model, prep, params)
    sub = PreparedScan.build(apply_tau_to_scan(prep.scan, tau), mount_angles)
    est_sub = forward_all(model, sub, params)
    return mae(est_sub.mean, h_tau(full.mean, tau))


@dataclass
class RefineResult:
    model: MotionModel
    estimate: EstimateSet
    losses: list[LossBreakdown] = field(default_factory=list)
    metrics: list[MetricReport] = field(default_factory=list)
    aborted: bool = False

    def trace_rows(self) -> list[dict]:
        rows = []
        for i, lb in enumerate(self.losses):
            row = {"iteration": i, **lb.as_row()}
            if i < len(self.metrics):
                m = self.metrics[i]
                row.update(fdr=m.fdr, adr=m.adr, ea=m.ea)
            rows.append(row)
        return rows


def refine_online(
    model: MotionModel,
    scan: "Scan | PreparedScan",
    epochs: int = 60,
    weights: Sequence[float] = DEFAULT_WEIGHTS,
    lr: float = ONLINE_LR,
    seed: int = 0,
    mount_angles=DEFAULT_MOUNT_ANGLES,
    max_stride: int = 3,
) -> RefineResult:
    """Refine a copy of ``model`` on one unlabeled scan.

    Each epoch draws a fresh interval-sampling/flip operation, evaluates the
    weighted objective and takes one Adam step. Losses and (when the scan has
    ground truth) metrics are recorded before every step and once after the
    last one, so traces hold ``epochs + 1`` entries.
    """
    prep = scan if isinstance(scan, PreparedScan) else PreparedScan.build(scan, mount_angles)
    if prep.scan.n_imu < 2:
        raise ValueError("online refinement needs at least 2 IMU streams")
    w1, w2, w3 = (float(w) for w in weights)
    model = model.copy()
    flat = model.flat()
    state = AdamState.zeros(flat.size)
    rng = np.random.default_rng(seed)
    result = RefineResult(model=model, estimate=forward_all(model, prep).values())

    for it in range(epochs + 1):
        leaves = model.leaves()
        est = forward_all(model, prep, leaves)
        single = single_imu_loss(est.per_imu, prep.feats.accel, prep.feats.dphi)
        multi = multi_imu_loss(est.per_imu)
        tau = sample_tau(rng, prep.scan.n_frames, max_stride)
        scs = self_consistency_loss(model, prep, tau, leaves, est, mount_angles) if w3 != 0.0 else ad.Tensor(0.0)
        total = w1 * single + w2 * multi + w3 * scs
        values = [ad.value_of(x).item() for x in (single, multi, scs, total)]
        if not np.all(np.isfinite(values)):
            log.warning("scan %s: non-finite objective at iteration %d; keeping last finite state", prep.scan.id, it)
            result.aborted = True
            break
        result.model = model
        result.estimate = est.values()
        result.losses.append(LossBreakdown(*values, weights=(w1, w2, w3)))
        if prep.scan.gt is not None:
            result.metrics.append(compute_report(result.estimate.mean, prep.scan.gt))
        if it == epochs:
            break
        if ad.is_tensor(total) and total.requires_grad:
            ad.backward(total)
            grads = np.concatenate(
                [(leaves[k].grad if leaves[k].grad is not None else np.zeros_like(leaves[k].value)).ravel() for k in PARAM_NAMES]
            )
        else:
            grads = np.zeros_like(flat)
        try:
            flat = adam_step(flat, grads, state, lr)
        except RejectedStepError as exc:
            log.warning("scan %s: %s; stopping refinement", prep.scan.id, exc)
            result.aborted = True
            break
        model = model.with_flat(flat)
    return result
