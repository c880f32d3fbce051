"""Command-line pipeline: simulate, calibrate, train, refine, eval.

Every command writes the resolved configuration next to its outputs, so any
directory can be reproduced from its own ``config.json``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import calibration as C
from . import estimator as E
from . import metrics as Mx
from .online import refine_online
from .plots import decline_svg
from .simulator import DatasetConfig, load_scan, make_dataset, save_scan

log = logging.getLogger("drift_forge")

SEED_ENV = "DRIFT_FORGE_SEED"
EXIT_INPUT = 2
EXIT_NOT_CONVERGED = 3


class CliError(Exception):
    """User-facing failure; the message is printed and the process exits nonzero."""

    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    hidden: int = 32
    train_epochs: int = 200
    train_batch: int = 1
    refine_epochs: int = 60
    refine_lr: float = 2e-6
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    max_stride: int = 3
    refine_split: str = "test"
    calibration_split: str = "train"
    lm: C.LmConfig = field(default_factory=C.LmConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"] = self.dataset.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        if "dataset" in d:
            d["dataset"] = DatasetConfig.from_dict(d["dataset"])
        if "lm" in d:
            d["lm"] = C.LmConfig(**d["lm"])
        if "weights" in d:
            d["weights"] = tuple(float(w) for w in d["weights"])
        return cls(**d)

    def model_section(self) -> dict:
        """The part of the config a checkpoint depends on."""
        d = self.to_dict()
        return {k: d[k] for k in ("seed", "dataset", "hidden", "train_epochs", "train_batch")}


def resolve_config(path: str | None, seed: int | None) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            cfg = RunConfig.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
            raise CliError(f"cannot read config {path}: {exc}") from None
    env = os.environ.get(SEED_ENV)
    if seed is None and env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise CliError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    cfg = replace(cfg, dataset=replace(cfg.dataset, seed=cfg.seed))
    try:
        cfg.dataset.validate()
    except ValueError as exc:
        raise CliError(f"invalid dataset config: {exc}") from None
    return cfg


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise CliError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, cfg: RunConfig, **extra) -> None:
    (out / "config.json").write_text(_dump({**cfg.to_dict(), **extra} if extra else cfg.to_dict()))


def load_split(data_dir: str, split: str) -> list:
    root = Path(data_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except OSError:
        raise CliError(f"{root} has no manifest.json; run 'simulate' first") from None
    if split == "all":
        ids = sorted(i for ids in manifest["splits"].values() for i in ids)
    elif split in manifest["splits"]:
        ids = manifest["splits"][split]
    else:
        raise CliError(f"unknown split {split!r}")
    return [load_scan(root / manifest["files"][i]) for i in ids]


def _mount_angles(cfg: RunConfig, calibration: str | None):
    if calibration is None:
        return cfg.dataset.sensors.mount_angles
    try:
        doc = json.loads(Path(calibration).read_text())
    except OSError:
        raise CliError(f"cannot read calibration report {calibration}") from None
    return tuple(tuple(m["mount_deg"]) for m in doc["mounts"])


def scan_seed(seed: int, scan_id: str) -> int:
    """Order-independent per-scan seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(scan_id.encode())]).generate_state(1)[0])


# --- commands ----------------------------------------------------------------------


def cmd_simulate(args, cfg: RunConfig) -> int:
    out = prepare_out(args.out, args.force)
    data = make_dataset(cfg.dataset)
    (out / "scans").mkdir()
    manifest = {"seed": cfg.seed, "splits": {}, "subjects": {}, "files": {}}
    for split in ("train", "val", "test"):
        manifest["splits"][split] = [s.id for s in data[split]]
        for scan in data[split]:
            rel = f"scans/{scan.id}.json"
            save_scan(scan, out / rel)
            manifest["files"][scan.id] = rel
            manifest["subjects"][scan.subject] = split
    (out / "manifest.json").write_text(_dump(manifest))
    _write_config(out, cfg)
    counts = {k: len(v) for k, v in manifest["splits"].items()}
    print(f"wrote {sum(counts.values())} scans to {out} ({counts})")
    return 0


def cmd_calibrate(args, cfg: RunConfig) -> int:
    scans = load_split(args.data, args.split or cfg.calibration_split)
    if not scans:
        raise CliError("no scans to calibrate from")
    missing = [s.id for s in scans if s.gt is None]
    if missing:
        raise CliError(f"calibration needs ground truth; missing in {missing[:3]}")
    out = prepare_out(args.out, args.force)
    fits = []
    for j in range(scans[0].n_imu):
        samples = [smp for s in scans for smp in C.samples_from_scan(s, j)]
        try:
            fits.append(C.fit_mount(samples, cfg.lm))
        except C.IllConditionedError as exc:
            raise CliError(f"IMU {j}: {exc}") from None
    truth = cfg.dataset.sensors.mount_angles if len(cfg.dataset.sensors.mount_angles) == len(fits) else None
    (out / "calibration.json").write_text(C.calibration_report(fits, truth) + "\n")
    _write_config(out, cfg)
    for j, f in enumerate(fits):
        print(f"IMU {j}: mount {np.round(f.rotation.phi, 4).tolist()} deg, rms residual {f.residual_rms_deg:.4f} deg, {f.report.reason}")
    if not all(f.report.converged for f in fits):
        print("calibration did not converge", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    scans = load_split(args.data, "train")
    if not scans:
        raise CliError("training split is empty")
    out = prepare_out(args.out, args.force)
    mounts = _mount_angles(cfg, args.calibration)
    model = E.MotionModel.init(scans[0].obs_dim, cfg.hidden, cfg.seed)
    model, curve = E.train(model, scans, epochs=cfg.train_epochs, batch=cfg.train_batch, seed=cfg.seed, mount_angles=mounts)
    E.save_checkpoint(model, out / "checkpoint.json", cfg.model_section())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"])
    w.writerows((i, repr(v)) for i, v in enumerate(curve))
    (out / "loss_curve.csv").write_text(buf.getvalue())
    _write_config(out, cfg)
    print(f"trained {cfg.train_epochs} epochs on {len(scans)} scans; final loss {curve[-1] if curve else float('nan'):.5f}")
    return 0


TRACE_COLUMNS = ("iteration", "single_imu", "multi_imu", "self_consistency", "total", "fdr", "adr", "ea")


def condition_name(weights: Sequence[float]) -> str:
    mss = weights[0] != 0 or weights[1] != 0
    scs = weights[2] != 0
    return {(True, True): "full", (True, False): "bk+mss", (False, True): "bk+scs", (False, False): "bk"}[(mss, scs)]


def _refine_one(job):
    model, scan, weights, epochs, lr, seed, mounts, max_stride = job
    res = refine_online(model, scan, epochs=epochs, weights=weights, lr=lr, seed=seed, mount_angles=mounts, max_stride=max_stride)
    backbone = E.forward_all(model, scan, mount_angles=mounts).values().mean
    return scan.id, backbone, res.estimate.mean, res.trace_rows(), res.aborted


def cmd_refine(args, cfg: RunConfig) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError(f"checkpoint {ckpt} not found; run 'train' first")
    model, _, stored_hash = E.load_checkpoint(ckpt)
    if stored_hash != E.config_hash(cfg.model_section()):
        raise CliError(f"config hash mismatch: checkpoint was trained with {stored_hash}, this config gives {E.config_hash(cfg.model_section())}")
    weights = list(cfg.weights)
    if args.no_mss:
        weights[0] = weights[1] = 0.0
    if args.no_scs:
        weights[2] = 0.0
    scans = load_split(args.data, args.split or cfg.refine_split)
    out = prepare_out(args.out, args.force)
    mounts = _mount_angles(cfg, args.calibration)
    jobs = [(model, s, tuple(weights), cfg.refine_epochs, cfg.refine_lr, scan_seed(cfg.seed, s.id), mounts, cfg.max_stride) for s in scans]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_refine_one, jobs))
    else:
        results = [_refine_one(j) for j in jobs]

    (out / "estimates").mkdir()
    (out / "traces").mkdir()
    manifest = {"condition": condition_name(weights), "weights": weights, "scans": {}}
    for scan_id, backbone, refined, rows, aborted in sorted(results, key=lambda r: r[0]):
        doc = {"id": scan_id, "backbone": backbone.tolist(), "refined": refined.tolist(), "aborted": aborted}
        (out / "estimates" / f"{scan_id}.json").write_text(json.dumps(doc, sort_keys=True))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in rows:
            w.writerow([row["iteration"]] + [repr(float(row.get(c, float("nan")))) for c in TRACE_COLUMNS[1:]])
        (out / "traces" / f"{scan_id}.csv").write_text(buf.getvalue())
        manifest["scans"][scan_id] = {"seed": scan_seed(cfg.seed, scan_id), "aborted": aborted}
    (out / "manifest.json").write_text(_dump(manifest))
    _write_config(out, cfg, condition=manifest["condition"], effective_weights=weights)
    n_abort = sum(r[4] for r in results)
    print(f"refined {len(results)} scans ({manifest['condition']}); {n_abort} aborted early")
    return 0


def read_trace(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in TRACE_COLUMNS}


def cmd_eval(args, cfg: RunConfig) -> int:
    ref = Path(args.refined)
    try:
        manifest = json.loads((ref / "manifest.json").read_text())
    except OSError:
        raise CliError(f"{ref} has no manifest.json; run 'refine' first") from None
    data = Path(args.data)
    files = json.loads((data / "manifest.json").read_text())["files"]
    out = prepare_out(args.out, args.force)
    ids = sorted(manifest["scans"])
    backbone, refined, traces = [], [], []
    for scan_id in ids:
        scan = load_scan(data / files[scan_id])
        if scan.gt is None:
            raise CliError(f"scan {scan_id} has no ground truth to evaluate against")
        est = json.loads((ref / "estimates" / f"{scan_id}.json").read_text())
        backbone.append((scan_id, Mx.compute_report(np.array(est["backbone"]), scan.gt)))
        refined.append((scan_id, Mx.compute_report(np.array(est["refined"]), scan.gt)))
        traces.append(read_trace(ref / "traces" / f"{scan_id}.csv"))
    (out / "metrics.csv").write_text(Mx.reports_csv(refined))
    (out / "metrics_backbone.csv").write_text(Mx.reports_csv(backbone))
    summary = {
        "condition": manifest["condition"],
        "backbone": Mx.summarize([r for _, r in backbone]),
        "refined": Mx.summarize([r for _, r in refined]),
    }
    summary["relative_reduction"] = {
        m: 1.0 - summary["refined"][m]["mean"] / summary["backbone"][m]["mean"] if summary["backbone"][m]["mean"] else 0.0
        for m in Mx.METRIC_NAMES
    }
    (out / "summary.json").write_text(_dump(summary))
    n_iter = min(len(t["iteration"]) for t in traces) if traces else 0
    for metric in ("fdr", "adr", "ea"):
        curve = np.mean([t[metric][:n_iter] for t in traces], axis=0) if traces else np.zeros(0)
        series = {"refined": curve.tolist(), "backbone": [summary["backbone"][metric]["mean"]]}
        (out / f"{metric}.svg").write_text(decline_svg(metric, series, n_iter))
    _write_config(out, cfg)
    b, r = summary["backbone"], summary["refined"]
    print(f"{len(ids)} scans ({manifest['condition']}): FDR {b['fdr']['mean']:.3f} -> {r['fdr']['mean']:.3f} %, EA {b['ea']['mean']:.3f} -> {r['ea']['mean']:.3f} deg")
    return 0


# --- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON run configuration")
    shared.add_argument("--seed", type=int, help=f"master seed (overrides {SEED_ENV} and the config)")
    shared.add_argument("--out", required=True, help="output directory")
    shared.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    shared.add_argument("--workers", type=int, default=1, help="parallel per-scan workers")
    shared.add_argument("--no-mss", action="store_true", help="drop the single- and multi-IMU objectives")
    shared.add_argument("--no-scs", action="store_true", help="drop the self-consistency objective")
    shared.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="drift-forge", description="Multi-IMU self-consistent trajectory refinement pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[shared], help="simulate scans and write a split manifest")
    c = sub.add_parser("calibrate", parents=[shared], help="fit IMU mounting rotations")
    c.add_argument("--data", required=True)
    c.add_argument("--split", help="split to calibrate from (train, val, test or all)")
    t = sub.add_parser("train", parents=[shared], help="train the backbone estimator")
    t.add_argument("--data", required=True)
    t.add_argument("--calibration", help="calibration.json to take mounts from")
    r = sub.add_parser("refine", parents=[shared], help="per-scan online refinement")
    r.add_argument("--data", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--split", help="split to refine (default from config)")
    r.add_argument("--calibration", help="calibration.json to take mounts from")
    e = sub.add_parser("eval", parents=[shared], help="metrics, summary and decline curves")
    e.add_argument("--data", required=True)
    e.add_argument("--refined", required=True)
    return p


COMMANDS = {"simulate": cmd_simulate, "calibrate": cmd_calibrate, "train": cmd_train, "refine": cmd_refine, "eval": cmd_eval}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise CliError("--workers must be >= 1")
        cfg = resolve_config(args.config, args.seed)
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
