"""Run-directory layout and artifact loading.

Every experiment lives under one run directory:
    config.resolved.txt    full config after file + overrides
    dataset/               manifest, binvox volumes, PGM views
    split.json             the base/novel few-shot split
    priors/prior_<class>.binvox
    checkpoints/           gt_encoder.ckpt and per-pipeline stage snapshots
    logs/                  per-pipeline training CSVs
    reports/               IoU / cosine / proximity / sweep CSVs
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import corpus, voxel
from .config import ExperimentConfig, dump_config

RUN_ROOT_ENV = "VOXMIX_RUN_ROOT"


class MissingArtifactError(FileNotFoundError):
    """A required input artifact has not been generated yet."""


def run_root(explicit: str | None = None) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @classmethod
    def for_config(cls, config: ExperimentConfig,
                   root: str | None = None) -> "RunPaths":
        return cls(run_root(root) / config.run_name)

    @property
    def dataset_dir(self) -> Path:
        return self.root / "dataset"

    @property
    def split_path(self) -> Path:
        return self.root / "split.json"

    @property
    def priors_dir(self) -> Path:
        return self.root / "priors"

    @property
    def checkpoints_dir(self) -> Path:
        return self.root / "checkpoints"

    @property
    def logs_dir(self) -> Path:
        return self.root / "logs"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    @property
    def resolved_config_path(self) -> Path:
        return self.root / "config.resolved.txt"

    def prior_path(self, class_id: str) -> Path:
        return self.priors_dir / f"prior_{class_id}.binvox"

    def ensure_dirs(self) -> None:
        for d in (self.root, self.checkpoints_dir, self.logs_dir,
                  self.reports_dir):
            d.mkdir(parents=True, exist_ok=True)

    def write_resolved_config(self, config: ExperimentConfig) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.resolved_config_path.write_text(dump_config(config),
                                             encoding="utf-8")


def load_manifest(paths: RunPaths) -> corpus.DatasetManifest:
    if not (paths.dataset_dir / "manifest.jsonl").exists():
        raise MissingArtifactError(
            f"no dataset under {paths.dataset_dir}; run gen-data first")
    return corpus.DatasetManifest.load(paths.dataset_dir)


def load_split(paths: RunPaths) -> corpus.FewShotSplit:
    if not paths.split_path.exists():
        raise MissingArtifactError(
            f"no split at {paths.split_path}; run build-priors first")
    return corpus.FewShotSplit.load(paths.split_path)


def load_priors(paths: RunPaths, classes) -> dict[str, np.ndarray]:
    """Per-class prior grids as (1, D, D, D) float32 arrays."""
    priors: dict[str, np.ndarray] = {}
    for class_id in classes:
        path = paths.prior_path(class_id)
        if not path.exists():
            raise MissingArtifactError(
                f"no prior for class {class_id!r} at {path}; run build-priors")
        priors[class_id] = voxel.load_binvox(path).values.astype(np.float32)[None]
    return priors
