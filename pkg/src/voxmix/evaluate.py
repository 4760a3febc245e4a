"""Measurement surfaces: per-class IoU tables, same/different-object
cosine-similarity reports, and the proximity-vs-IoU join.

Evaluation is read-only over parameter snapshots and fully deterministic;
aggregates are always accompanied by their per-sample rows so every table
can be re-derived externally.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import SampleArrays
from .model import Network
from .nn import ParamStore
from .voxel import ProximityReport

PRIOR_MODES = ("correct", "corrupted", "none")


def assigned_prior_class(class_id: str, mode: str,
                         all_classes: tuple[str, ...]) -> str | None:
    """Which class prior a sample of `class_id` receives.  The corrupted
    mode walks one class forward cyclically so runs are reproducible."""
    if mode == "none":
        return None
    if mode == "correct":
        return class_id
    if mode == "corrupted":
        idx = all_classes.index(class_id)
        return all_classes[(idx + 1) % len(all_classes)]
    raise ValueError(f"unknown prior mode {mode!r}")


def prior_batch(class_ids, priors_by_class: dict[str, np.ndarray],
                mode: str, all_classes: tuple[str, ...]) -> np.ndarray | None:
    if mode == "none":
        return None
    rows = []
    for class_id in class_ids:
        assigned = assigned_prior_class(class_id, mode, all_classes)
        rows.append(priors_by_class[assigned])
    return np.asarray(rows, dtype=np.float32)


@dataclass(frozen=True)
class IouTable:
    threshold: float
    prior_mode: str
    rows: tuple[tuple[str, float, int], ...]       # (class, mean iou, count)
    overall: float                                  # mean of class means
    per_sample: tuple[tuple[str, int, str, float], ...]


@dataclass(frozen=True)
class CosineReport:
    # (class, same-object mean, diff-object mean, same pairs, diff pairs)
    rows: tuple[tuple[str, float, float, int, int], ...]


def _batched_forward(net: Network, store: ParamStore, samples: SampleArrays,
                     priors_by_class, prior_mode: str,
                     all_classes: tuple[str, ...], batch_size: int):
    """Yield (start, trace) over the sample stack in fixed-size batches."""
    n = len(samples)
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        images = samples.images[sl]
        if net.config.variant == "no_prior":
            trace = net.forward_no_prior(images, store)
        else:
            priors = prior_batch(samples.class_ids[sl], priors_by_class,
                                 prior_mode, all_classes)
            trace = net.forward(images, priors, store)
        yield sl, trace


def eval_iou(net: Network, store: ParamStore, samples: SampleArrays,
             priors_by_class: dict[str, np.ndarray], prior_mode: str,
             all_classes: tuple[str, ...], threshold: float = 0.3,
             batch_size: int = 64) -> IouTable:
    """Per-query-sample IoU of the binarized prediction against ground
    truth, aggregated per class; the overall score is the mean of class
    means."""
    net.check_store(store)
    per_sample: list[tuple[str, int, str, float]] = []
    by_class: dict[str, list[float]] = {}
    for sl, trace in _batched_forward(net, store, samples, priors_by_class,
                                      prior_mode, all_classes, batch_size):
        pred_occ = trace.prediction > threshold
        gt_occ = samples.volumes[sl][:, 0] > 0.5
        inter = np.logical_and(pred_occ, gt_occ).sum(axis=(1, 2, 3))
        union = np.logical_or(pred_occ, gt_occ).sum(axis=(1, 2, 3))
        for k in range(pred_occ.shape[0]):
            i = sl.start + k
            if union[k] == 0:
                raise ValueError(
                    f"IoU undefined for {samples.object_ids[i]}: empty union")
            value = float(inter[k] / union[k])
            per_sample.append((samples.object_ids[i], samples.pose_ids[i],
                               samples.class_ids[i], value))
            by_class.setdefault(samples.class_ids[i], []).append(value)
    rows = tuple((c, float(np.mean(v)), len(v))
                 for c, v in sorted(by_class.items()))
    overall = float(np.mean([r[1] for r in rows]))
    return IouTable(threshold, prior_mode, rows, overall, tuple(per_sample))


def predictions_as_grids(net: Network, store: ParamStore,
                         samples: SampleArrays, priors_by_class,
                         prior_mode: str, all_classes: tuple[str, ...],
                         threshold: float, batch_size: int = 64):
    """Binarized predictions, one (object_id, pose_id, grid) per sample."""
    from .voxel import VoxelGrid
    out = []
    for sl, trace in _batched_forward(net, store, samples, priors_by_class,
                                      prior_mode, all_classes, batch_size):
        occ = trace.prediction > threshold
        for k in range(occ.shape[0]):
            i = sl.start + k
            out.append((samples.object_ids[i], samples.pose_ids[i],
                        VoxelGrid(occ.shape[1], occ[k], binary=True)))
    return out


def cosine_report(net: Network, store: ParamStore, samples: SampleArrays,
                  priors_by_class: dict[str, np.ndarray], prior_mode: str,
                  all_classes: tuple[str, ...],
                  batch_size: int = 64) -> CosineReport:
    """Exhaustive intra-class cosine similarities of fused latents:
    same-object pairs are views of one object, different-object pairs
    cross objects within a class."""
    latents = []
    for _, trace in _batched_forward(net, store, samples, priors_by_class,
                                     prior_mode, all_classes, batch_size):
        latents.append(trace.e_fused)
    fused = np.concatenate(latents, axis=0).astype(np.float64)
    norms = np.linalg.norm(fused, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm latent; cosine report undefined")
    unit = fused / norms

    classes = sorted(set(samples.class_ids))
    rows = []
    obj_arr = np.asarray(samples.object_ids)
    cls_arr = np.asarray(samples.class_ids)
    for class_id in classes:
        members = np.flatnonzero(cls_arr == class_id)
        if members.size < 2:
            raise ValueError(f"class {class_id!r} has fewer than 2 views")
        gram = unit[members] @ unit[members].T
        same_mask = obj_arr[members][:, None] == obj_arr[members][None, :]
        upper = np.triu(np.ones_like(gram, dtype=bool), k=1)
        same_pairs = upper & same_mask
        diff_pairs = upper & ~same_mask
        if same_pairs.sum() == 0 or diff_pairs.sum() == 0:
            raise ValueError(
                f"class {class_id!r} lacks same- or different-object pairs")
        rows.append((class_id,
                     float(gram[same_pairs].mean()),
                     float(gram[diff_pairs].mean()),
                     int(same_pairs.sum()), int(diff_pairs.sum())))
    return CosineReport(tuple(rows))


def proximity_join(prox: ProximityReport,
                   table: IouTable) -> list[tuple[str, float, float]]:
    """Rows of (class, proximity, iou) for the novel classes."""
    iou_by_class = {c: v for c, v, _ in table.rows}
    missing = set(prox.per_novel_class) - set(iou_by_class)
    if missing:
        raise ValueError(f"classes missing from the IoU table: {sorted(missing)}")
    return [(c, prox.per_novel_class[c], iou_by_class[c])
            for c in sorted(prox.per_novel_class)]


# ---------------------------------------------------------------------------
# CSV writers (stable headers, stable row order)
# ---------------------------------------------------------------------------

def write_iou_csv(table: IouTable, path: Path | str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "mean_iou", "n_samples", "threshold",
                         "prior_mode"])
        for class_id, mean_iou, count in table.rows:
            writer.writerow([class_id, repr(mean_iou), count,
                             repr(table.threshold), table.prior_mode])
        writer.writerow(["__average__", repr(table.overall),
                         sum(r[2] for r in table.rows),
                         repr(table.threshold), table.prior_mode])


def write_iou_samples_csv(table: IouTable, path: Path | str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["object_id", "pose_id", "class", "iou"])
        for object_id, pose_id, class_id, value in table.per_sample:
            writer.writerow([object_id, pose_id, class_id, repr(value)])


def write_cosine_csv(report: CosineReport, path: Path | str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "same_obj_mean", "diff_obj_mean",
                         "same_pairs", "diff_pairs"])
        for class_id, same, diff, n_same, n_diff in report.rows:
            writer.writerow([class_id, repr(same), repr(diff), n_same, n_diff])


def write_proximity_csv(rows, path: Path | str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "proximity", "iou"])
        for class_id, prox_value, iou_value in rows:
            writer.writerow([class_id, repr(prox_value), repr(iou_value)])
