"""Helpers that drive the command-line pipeline on a tiny configuration."""

import json
from pathlib import Path

from drift_forge.cli import main

TINY = {
    "seed": 11,
    "dataset": {"n_subjects": 3, "scans_per_subject": 2, "split": [1, 1, 1], "n_frames": 16, "length_mm": 30.0},
    "hidden": 6,
    "train_epochs": 2,
    "refine_epochs": 3,
    "refine_lr": 1e-3,
}


def write_config(tmp: Path, **overrides) -> Path:
    path = tmp / "run.json"
    path.write_text(json.dumps({**TINY, **overrides}))
    return path


def run_pipeline(root: Path, cfg: Path, extra=()) -> dict[str, Path]:
    dirs = {k: root / k for k in ("data", "calib", "model", "refined", "report")}
    base = ["--config", str(cfg), *extra]
    assert main(["simulate", *base, "--out", str(dirs["data"])]) == 0
    assert main(["calibrate", *base, "--out", str(dirs["calib"]), "--data", str(dirs["data"])]) == 0
    assert main(["train", *base, "--out", str(dirs["model"]), "--data", str(dirs["data"])]) == 0
    ckpt = str(dirs["model"] / "checkpoint.json")
    assert main(["refine", *base, "--out", str(dirs["refined"]), "--data", str(dirs["data"]), "--checkpoint", ckpt]) == 0
    assert main(["eval", *base, "--out", str(dirs["report"]), "--data", str(dirs["data"]), "--refined", str(dirs["refined"])]) == 0
    return dirs


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
