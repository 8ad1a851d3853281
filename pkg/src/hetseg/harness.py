"""Four-arm experiment orchestration: data, training, evaluation, comparison.

Arms
----
``lb``     crossentropy on the fully labeled items only
``naive``  masked crossentropy on all items, merged maps where merged
``slac``   super-label-aware crossentropy on the same data as ``naive``
``ub``     crossentropy on all items with their original full labels

Output directory layout::

    manifest.json, items/        generated dataset
    ckpt/<arm>.ckpt              best-validation checkpoint
    ckpt/<arm>_log.csv           epoch,train_loss,val_loss,wall_ms
    report_<arm>.csv             per-structure test metrics
    comparison.csv               all arms side by side with winner flags
    provenance.txt               seeds, config hash, library versions
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .metrics import REPORT_COLUMNS, evaluate_arm
from .segmodel import ARMS, TrainConfig, TrainingDivergedError, load_checkpoint
from .seeding import derive_seed
from .synthdata import PRESETS, DatasetManifest, GeometryConfig, build_dataset

DEFAULT_CONFIG = {
    "seed": 0,
    "dataset": {
        "preset": "adjacent",
        "train": 200,
        "val": 40,
        "test": 40,
        "merge_fraction": 0.5,
        "geometry": {},
    },
    "train": {
        "epochs": 30,
        "batch_size": 8,
        "lr": 0.01,
        "eval_every": 1,
        "depth": 2,
        "base_channels": 16,
        "skip": True,
    },
    "arms": list(ARMS),
    "arm_overrides": {},
    "parallel_arms": False,
}

GEOMETRY_KEYS = set(GeometryConfig.__dataclass_fields__)


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key not in ("geometry", "arm_overrides"):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides: Optional[dict] = None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``overrides``; unknown keys are errors."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            cfg = _merge(cfg, json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if overrides:
        cfg = _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    ds = cfg["dataset"]
    if ds["preset"] not in PRESETS:
        raise ConfigError(f"dataset.preset must be one of {sorted(PRESETS)}")
    bad = set(ds["geometry"]) - GEOMETRY_KEYS
    if bad:
        raise ConfigError(f"unknown geometry keys {sorted(bad)}")
    unknown_arms = set(cfg["arms"]) - set(ARMS)
    if unknown_arms or not cfg["arms"]:
        raise ConfigError(f"arms must be a non-empty subset of {list(ARMS)}")
    for arm, over in cfg["arm_overrides"].items():
        if arm not in ARMS:
            raise ConfigError(f"arm_overrides has unknown arm {arm!r}")
        extra = set(over) - set(DEFAULT_CONFIG["train"])
        if extra:
            raise ConfigError(f"arm_overrides.{arm} has unknown keys {sorted(extra)}")
    for arm in ARMS:
        train_config(cfg, arm)  # raises on invalid values


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()


def training_seed(global_seed: int) -> int:
    """Init and batch-order seed shared by every arm: splitmix64 of the global seed.

    Sharing it makes the arms a paired comparison; they differ only in loss
    and training subset.
    """
    return derive_seed(global_seed, "train") & 0xFFFF_FFFF


def train_config(cfg: dict, arm: str, checkpoint_dir=None) -> TrainConfig:
    params = dict(cfg["train"])
    params.update(cfg["arm_overrides"].get(arm, {}))
    return TrainConfig(arm=arm, seed=training_seed(cfg["seed"]), checkpoint_dir=checkpoint_dir, **params)


# data --------------------------------------------------------------------------

def generate_data(cfg: dict, out) -> DatasetManifest:
    ds = cfg["dataset"]
    scheme = PRESETS[ds["preset"]]()
    counts = {"train": ds["train"], "val": ds["val"], "test": ds["test"]}
    return build_dataset(cfg["seed"], scheme, counts, ds["merge_fraction"],
                         scheme.super_labels[0].id, out, GeometryConfig(**ds["geometry"]))


def load_manifest(out) -> DatasetManifest:
    return DatasetManifest.load(out)


def arm_items(manifest: DatasetManifest, arm: str, split: str) -> list:
    items = manifest.split_items(split)
    if arm == "lb":
        return [it for it in items if not it.merged]
    return items


def arm_arrays(manifest: DatasetManifest, arm: str, split: str):
    """Images and the label maps ``arm`` trains on for ``split`` (train or val)."""
    return manifest.load_arrays(arm_items(manifest, arm, split), merged=arm in ("naive", "slac"))


def test_arrays(manifest: DatasetManifest):
    return manifest.load_arrays(manifest.split_items("test"), merged=False)


# per-arm steps -------------------------------------------------------------------

def train_arm(cfg: dict, out, arm: str, verbose: bool = False):
    from .estimator import SuperLabelSegmenter

    out = Path(out)
    manifest = load_manifest(out)
    tc = train_config(cfg, arm)
    X, y = arm_arrays(manifest, arm, "train")
    Xv, yv = arm_arrays(manifest, arm, "val")
    if len(X) == 0 or len(Xv) == 0:
        raise ValueError(f"arm {arm!r} has no training or validation items")
    est = SuperLabelSegmenter(
        scheme=manifest.scheme, loss=tc.loss, depth=tc.depth, base_channels=tc.base_channels,
        skip=tc.skip, epochs=tc.epochs, batch_size=tc.batch_size, lr=tc.lr,
        eval_every=tc.eval_every, random_state=tc.seed, verbose=verbose,
    )
    est.fit(X, y, X_val=Xv, y_val=yv)
    ckpt = out / "ckpt"
    ckpt.mkdir(parents=True, exist_ok=True)
    est.save(ckpt / f"{arm}.ckpt")
    est.training_log_.write_csv(ckpt / f"{arm}_log.csv")
    return est


def eval_arm(out, arm: str):
    out = Path(out)
    manifest = load_manifest(out)
    path = out / "ckpt" / f"{arm}.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, _, _, _ = load_checkpoint(path)
    X, y = test_arrays(manifest)
    report = evaluate_arm(model, X, y, manifest.scheme, arm)
    (out / f"report_{arm}.csv").write_text(report.to_csv(), encoding="utf-8")
    return report


def _run_arm(cfg: dict, out: str, arm: str, verbose: bool) -> dict:
    import torch

    torch.set_num_threads(1)
    t0 = time.perf_counter()
    try:
        est = train_arm(cfg, out, arm, verbose)
        eval_arm(out, arm)
    except TrainingDivergedError as exc:
        return {"arm": arm, "status": "failed", "error": str(exc),
                "seconds": time.perf_counter() - t0}
    return {"arm": arm, "status": "ok", "best_epoch": est.training_log_.best_epoch,
            "best_val_loss": est.training_log_.best_val_loss,
            "seconds": time.perf_counter() - t0}


# comparison ---------------------------------------------------------------------

METRICS = ("dsc", "assd", "hd")
COMPARISON_COLUMNS = ("structure", "arm", "status", *REPORT_COLUMNS[2:8],
                      "best_dsc", "best_assd", "best_hd")


@dataclass
class ComparisonTable:
    arms: list
    structures: list
    cells: dict = field(default_factory=dict)  # (structure, arm) -> {column: str}
    winners: dict = field(default_factory=dict)  # (structure, metric) -> arm

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COMPARISON_COLUMNS)
        for s in self.structures:
            for arm in self.arms:
                cell = self.cells.get((s, arm))
                if cell is None:
                    w.writerow([s, arm, "absent", *([""] * 6), "", "", ""])
                    continue
                flags = [int(self.winners.get((s, m)) == arm) for m in METRICS]
                w.writerow([s, arm, "ok", *(cell[c] for c in REPORT_COLUMNS[2:8]), *flags])
        return buf.getvalue()

    def render(self) -> str:
        """Plain-text table; ``*`` marks the best non-UB arm per metric."""
        lines = []
        for s in self.structures:
            lines.append(f"{s}")
            lines.append(f"  {'arm':<6} {'DSC':>18} {'ASSD':>16} {'HD':>16}")
            for arm in self.arms:
                cell = self.cells.get((s, arm))
                if cell is None:
                    lines.append(f"  {arm:<6} {'(absent)':>18}")
                    continue
                parts = []
                for m, width in zip(METRICS, (18, 16, 16)):
                    mark = "*" if self.winners.get((s, m)) == arm else " "
                    text = f"{float(cell[m + '_mean']):.3f} ({float(cell[m + '_std']):.3f}){mark}"
                    parts.append(f"{text:>{width}}")
                lines.append(f"  {arm:<6} " + " ".join(parts))
        return "\n".join(lines)


def read_report(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {r["structure"]: r for r in rows}


def build_comparison(out, arms=ARMS) -> ComparisonTable:
    """Assemble the comparison from the per-arm report CSVs, copying cells verbatim."""
    out = Path(out)
    reports = {}
    for arm in arms:
        path = out / f"report_{arm}.csv"
        if path.exists():
            reports[arm] = read_report(path)
    structures = []
    for rep in reports.values():
        for s in rep:
            if s not in structures:
                structures.append(s)
    table = ComparisonTable(list(arms), structures)
    for arm, rep in reports.items():
        for s, row in rep.items():
            table.cells[(s, arm)] = row
    for s in structures:
        contenders = [a for a in arms if a != "ub" and (s, a) in table.cells]
        for m in METRICS:
            values = [(float(table.cells[(s, a)][m + "_mean"]), a) for a in contenders]
            values = [(v, a) for v, a in values if v == v]
            if not values:
                continue
            best = max(values, key=lambda t: t[0]) if m == "dsc" else min(values, key=lambda t: t[0])
            table.winners[(s, m)] = best[1]
    return table


def write_provenance(out, cfg: dict, results: list) -> None:
    import scipy
    import sklearn
    import torch

    lines = [
        f"hetseg {__version__}",
        f"python {platform.python_version()}",
        f"numpy {np.__version__}",
        f"scipy {scipy.__version__}",
        f"scikit-learn {sklearn.__version__}",
        f"torch {torch.__version__}",
        f"config_sha256 {config_hash(cfg)}",
        f"global_seed {cfg['seed']}",
    ]
    lines.append(f"training_seed {training_seed(cfg['seed'])}")
    for r in results:
        extra = " ".join(f"{k}={v}" for k, v in sorted(r.items()) if k not in ("arm",))
        lines.append(f"arm_result {r['arm']} {extra}")
    lines.append("config " + json.dumps(cfg, sort_keys=True))
    Path(out, "provenance.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_experiment(cfg: dict, out, verbose: bool = False) -> ComparisonTable:
    """Generate the dataset once, train and evaluate every arm, write the comparison."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    generate_data(cfg, out)
    arms = list(cfg["arms"])
    if cfg["parallel_arms"] and len(arms) > 1:
        with ProcessPoolExecutor(max_workers=len(arms)) as pool:
            results = list(pool.map(_run_arm, [cfg] * len(arms), [str(out)] * len(arms), arms,
                                    [verbose] * len(arms)))
    else:
        results = [_run_arm(cfg, str(out), arm, verbose) for arm in arms]
    for r in results:
        if r["status"] != "ok":
            stale = out / f"report_{r['arm']}.csv"
            if stale.exists():
                stale.unlink()
    table = build_comparison(out, arms)
    (out / "comparison.csv").write_text(table.to_csv(), encoding="utf-8")
    write_provenance(out, cfg, results)
    return table
