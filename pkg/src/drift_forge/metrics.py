"""Drift metrics between an estimated and a ground-truth relative pose chain.

Positions are frame centers accumulated from an identity pose at frame 0.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from . import pose as P
from .pose import PoseChain

METRIC_NAMES = ("fdr", "adr", "md", "sd", "hd", "ea")


@dataclass(frozen=True)
class MetricReport:
    fdr: float  # %
    adr: float  # %
    md: float  # mm
    sd: float  # mm
    hd: float  # mm
    ea: float  # deg
    length: float  # mm, ground-truth path length

    def as_dict(self) -> dict:
        return asdict(self)


def _chain(x) -> PoseChain:
    return x if isinstance(x, PoseChain) else PoseChain(x)


def drift_series(est, gt) -> np.ndarray:
    """Distance between estimated and true frame centers, one value per frame."""
    est, gt = _chain(est), _chain(gt)
    if len(est) != len(gt):
        raise ValueError(f"chains differ in length: {len(est)} vs {len(gt)}")
    return np.linalg.norm(est.positions() - gt.positions(), axis=1)


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Hausdorff distance between two point sets."""
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def compute_report(est, gt) -> MetricReport:
    est, gt = _chain(est), _chain(gt)
    if len(est) != len(gt):
        raise ValueError(f"chains differ in length: {len(est)} vs {len(gt)}")
    ea_abs, ga_abs = est.absolute_matrices(), gt.absolute_matrices()
    pe, pg = ea_abs[:, :3, 3], ga_abs[:, :3, 3]
    length = float(np.linalg.norm(np.diff(pg, axis=0), axis=1).sum())
    if length <= 0:
        raise ValueError("ground-truth trajectory has zero length")
    drift = np.linalg.norm(pe - pg, axis=1)
    return MetricReport(
        fdr=100.0 * float(drift[-1]) / length,
        adr=100.0 * float(drift.mean()) / length,
        md=float(drift.max()),
        sd=float(drift.sum()),
        hd=hausdorff(pe, pg),
        ea=float(P.geodesic_deg(ea_abs[:, :3, :3], ga_abs[:, :3, :3]).mean()),
        length=length,
    )


def summarize(reports: Sequence[MetricReport]) -> dict:
    """Mean and sample SD per metric, independent of report order."""
    out = {"n": len(reports)}
    for name in METRIC_NAMES + ("length",):
        vals = np.sort([getattr(r, name) for r in reports])
        out[name] = {
            "mean": float(vals.mean()) if len(vals) else float("nan"),
            "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
        }
    return out


def reports_csv(rows: Iterable[tuple[str, MetricReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = [f.name for f in fields(MetricReport)]
    w.writerow(["scan_id"] + names)
    for scan_id, r in rows:
        w.writerow([scan_id] + [repr(getattr(r, n)) for n in names])
    return buf.getvalue()


def summary_json(reports: Sequence[MetricReport]) -> str:
    return json.dumps(summarize(reports), indent=2, sort_keys=True)
