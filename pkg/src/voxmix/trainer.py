"""Staged training: volume-encoder pretraining, the base stage, the
input-mixing stage, and the latent-mixing stage, with checkpointing and
strict determinism.

Stage order is fixed: the base stage always runs first; the latent stage
may follow either the base stage or the input-mixing stage.  The four
selectable pipelines are
    base        stage 1 only
    input_mix   stages 1-2
    latent_mix  stages 1+3
    dual_mix    stages 1-2-3
Each stage draws from its own seeded random stream, so pipelines sharing
a prefix of stages produce bit-identical parameters up to the branch
point.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluate, losses, mixup, runs
from .config import ExperimentConfig, config_hash
from .corpus import DatasetManifest, FewShotSplit, SampleArrays, load_samples
from .model import Network, NetworkConfig
from .nn import (NumericError, Optimizer, OptimizerConfig, ParamStore,
                 load_checkpoint, make_optimizer, save_checkpoint)

STAGE_BASE = 1
STAGE_INPUT_MIX = 2
STAGE_LATENT_MIX = 3

PIPELINES: dict[str, tuple[int, ...]] = {
    "base": (STAGE_BASE,),
    "input_mix": (STAGE_BASE, STAGE_INPUT_MIX),
    "latent_mix": (STAGE_BASE, STAGE_LATENT_MIX),
    "dual_mix": (STAGE_BASE, STAGE_INPUT_MIX, STAGE_LATENT_MIX),
}

_ALLOWED_PREVIOUS = {
    STAGE_BASE: {0},
    STAGE_INPUT_MIX: {STAGE_BASE},
    STAGE_LATENT_MIX: {STAGE_BASE, STAGE_INPUT_MIX},
}

# Nonces separating the independent random streams of one experiment seed.
_STREAM = {"init": 101, "pretrain_init": 102, "pretrain": 103,
           STAGE_BASE: 111, STAGE_INPUT_MIX: 112, STAGE_LATENT_MIX: 113}


class StageOrderError(RuntimeError):
    """A stage was requested from an incompatible predecessor."""


def stream_rng(seed: int, stream) -> np.random.Generator:
    nonce = _STREAM[stream] if stream in _STREAM else int(stream)
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, nonce])))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state
    return rng


def network_config(config: ExperimentConfig) -> NetworkConfig:
    variant = "no_prior" if config.prior.mode == "none" else config.model.variant
    return NetworkConfig(
        vox_dim=config.data.vox_dim,
        image_size=config.data.image_size,
        image_channels=config.model.image_channels,
        prior_channels=config.model.prior_channels,
        decoder_channels=config.model.decoder_channels,
        latent_width=config.model.latent_width,
        variant=variant,
    )


def loss_config(config: ExperimentConfig) -> losses.LossConfig:
    sec = config.loss
    return losses.LossConfig(sec.w_recon, sec.w_align, sec.margin, sec.kind,
                             sec.focal_gamma, sec.focal_balance, sec.clamp_eps)


def optimizer_config(config: ExperimentConfig) -> OptimizerConfig:
    # The volume encoder learns on its own, slower rate in every stage.
    return OptimizerConfig(kind=config.train.optimizer, lr=config.train.lr,
                           groups=(("gt_encoder.", config.train.gt_lr),))


# ---------------------------------------------------------------------------
# Training pool
# ---------------------------------------------------------------------------

@dataclass
class TrainingPool:
    """Preloaded training views plus per-sample prior assignment."""

    samples: SampleArrays
    priors: np.ndarray | None     # (n, 1, D, D, D) or None for no-prior runs

    def __len__(self) -> int:
        return len(self.samples)


def build_pool(manifest: DatasetManifest, object_ids, priors_by_class,
               prior_mode: str, all_classes: tuple[str, ...]) -> TrainingPool:
    records = manifest.records_for_objects(object_ids)
    if not records:
        raise ValueError("training pool is empty")
    samples = load_samples(manifest, records)
    priors = evaluate.prior_batch(samples.class_ids, priors_by_class,
                                  prior_mode, all_classes)
    return TrainingPool(samples, priors)


def unique_volumes(samples: SampleArrays) -> np.ndarray:
    """One (1, D, D, D) volume per distinct object, in first-seen order."""
    seen: dict[str, int] = {}
    for i, obj in enumerate(samples.object_ids):
        seen.setdefault(obj, i)
    return samples.volumes[sorted(seen.values())]


# ---------------------------------------------------------------------------
# Volume-encoder pretraining
# ---------------------------------------------------------------------------

def pretrain_gt(net: Network, volumes: np.ndarray, epochs: int,
                lr: float = 1e-4, batch_size: int = 4,
                seed: int = 0) -> tuple[ParamStore, list[float]]:
    """Train the volume encoder plus a throwaway decoder as a plain
    autoencoder; returns (parameters, per-epoch mean losses).  The caller
    keeps only the encoder half."""
    if len(volumes) == 0:
        raise ValueError("no volumes to pretrain on")
    store = net.init_pretrain_params(stream_rng(seed, "pretrain_init"))
    opt = make_optimizer(store, OptimizerConfig(kind="adam", lr=lr))
    rng = stream_rng(seed, "pretrain")
    history: list[float] = []
    n = len(volumes)
    batch_size = min(batch_size, n)
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch_size):
            batch = volumes[order[start:start + batch_size]]
            recon = net.gt_autoencode(batch, store)
            target = batch[:, 0]
            value = losses.bce_loss(recon, target)
            net.gt_autoencode_backward(losses.bce_loss_grad(recon, target), store)
            opt.step()
            epoch_losses.append(value)
        history.append(float(np.mean(epoch_losses)))
    return store, history


def adopt_pretrained_encoder(store: ParamStore, pretrain_store: ParamStore) -> None:
    for name, value in pretrain_store.params.items():
        if name.startswith("gt_encoder.") and name in store.params:
            store.params[name][...] = value


# ---------------------------------------------------------------------------
# Stage training
# ---------------------------------------------------------------------------

def _negative_indices(object_ids, n: int, rng: np.random.Generator):
    """Partner index per sample for the triplet negative, plus a mask that
    zeroes the triplet where the batch holds no different object.  A None
    `object_ids` means every sample counts as its own object."""
    if n < 2:
        return np.zeros(n, dtype=np.int64), np.zeros(n)
    neg = mixup.random_derangement(n, rng)
    mask = np.ones(n)
    if object_ids is None:
        return neg, mask
    for i in range(n):
        if object_ids[neg[i]] != object_ids[i]:
            continue
        for off in range(1, n):
            j = (neg[i] + off) % n
            if object_ids[j] != object_ids[i]:
                neg[i] = j
                break
        else:
            mask[i] = 0.0
    return neg, mask


@dataclass
class StepStats:
    stage: int
    epoch: int
    step: int
    breakdown: losses.LossBreakdown


def train_stage(net: Network, store: ParamStore, stage: int,
                previous_stage: int, pool: TrainingPool,
                config: ExperimentConfig, rng: np.random.Generator,
                optimizer: Optimizer | None = None,
                epochs: int | None = None,
                start_epoch: int = 0) -> list[StepStats]:
    """Run one stage in place and return per-step loss statistics."""
    if previous_stage not in _ALLOWED_PREVIOUS[stage]:
        raise StageOrderError(
            f"stage {stage} cannot start from stage {previous_stage}")
    net.check_store(store)
    lcfg = loss_config(config)
    opt = optimizer or make_optimizer(store, optimizer_config(config))
    epochs = config.train.stage_epochs[stage - 1] if epochs is None else epochs
    batch_size = min(config.train.batch_size, len(pool))
    alpha = config.mixup.alpha
    stats: list[StepStats] = []
    n = len(pool)
    for epoch in range(start_epoch, start_epoch + epochs):
        order = rng.permutation(n)
        for step, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            images = pool.samples.images[idx]
            volumes = pool.samples.volumes[idx]
            priors = None if pool.priors is None else pool.priors[idx]
            object_ids = [pool.samples.object_ids[i] for i in idx]

            if stage == STAGE_INPUT_MIX:
                pairs = mixup.pair_batch(len(idx), alpha, rng)
                images = mixup.apply_pairs(images, pairs)
                volumes = mixup.apply_pairs(volumes, pairs)
                if priors is not None:
                    priors = mixup.apply_pairs(priors, pairs)
                object_ids = None  # every mixed sample is its own object

            _, _, e_fused = net.encode(images, priors, store)

            if stage == STAGE_LATENT_MIX:
                vol_latent = net.encode_gt(volumes, store)
                pairs = mixup.pair_batch(len(idx), alpha, rng)
                e_mix = mixup.apply_pairs(e_fused, pairs)
                lat_mix = mixup.apply_pairs(vol_latent, pairs)
                targets = mixup.apply_pairs(volumes, pairs)[:, 0]
                pred = net.decode(e_mix, store)
                recon = losses.reconstruction_loss(pred, targets, lcfg)
                align = losses.align_loss_no_triplet(e_mix, lat_mix)
                sim_pos = 1.0 - align
                sim_neg = 0.0
                d_pred = lcfg.w_recon * losses.reconstruction_loss_grad(
                    pred, targets, lcfg)
                d_mix, d_latmix = losses.align_loss_no_triplet_grads(e_mix, lat_mix)
                d_mix = lcfg.w_align * d_mix + net.decode_backward(d_pred, store)
                d_latmix = lcfg.w_align * d_latmix
                d_fused = np.zeros_like(e_fused)
                d_vol_latent = np.zeros_like(vol_latent)
                left = np.asarray([p.i for p in pairs])
                right = np.asarray([p.j for p in pairs])
                lams = np.asarray([p.lam for p in pairs],
                                  dtype=e_fused.dtype)[:, None]
                np.add.at(d_fused, left, (1 - lams) * d_mix)
                np.add.at(d_fused, right, lams * d_mix)
                np.add.at(d_vol_latent, left, (1 - lams) * d_latmix)
                np.add.at(d_vol_latent, right, lams * d_latmix)
                net.encode_backward(d_fused, store)
                net.encode_gt_backward(d_vol_latent, store)
            else:
                targets = volumes[:, 0]
                pred = net.decode(e_fused, store)
                recon = losses.reconstruction_loss(pred, targets, lcfg)
                vol_latent = net.encode_gt(volumes, store)
                neg_idx, mask = _negative_indices(object_ids, len(idx), rng)
                align, sim_pos, sim_neg = losses.align_loss(
                    e_fused, vol_latent, vol_latent[neg_idx], lcfg.margin, mask)
                d_pred = lcfg.w_recon * losses.reconstruction_loss_grad(
                    pred, targets, lcfg)
                d_fused, d_pos, d_neg = losses.align_loss_grads(
                    e_fused, vol_latent, vol_latent[neg_idx], lcfg.margin, mask)
                d_vol_latent = lcfg.w_align * d_pos
                np.add.at(d_vol_latent, neg_idx, lcfg.w_align * d_neg)
                net.backward(d_pred, store, d_fused_extra=lcfg.w_align * d_fused)
                net.encode_gt_backward(d_vol_latent, store)

            breakdown = losses.combined_loss(recon, align, sim_pos, sim_neg, lcfg)
            if not np.isfinite(breakdown.total):
                raise NumericError(
                    f"non-finite loss at stage {stage} epoch {epoch} step {step}")
            opt.step()
            stats.append(StepStats(stage, epoch, step, breakdown))
    return stats


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_stage_checkpoint(path, store: ParamStore, config: ExperimentConfig,
                          stage: int, epoch: int,
                          rng: np.random.Generator | None = None) -> None:
    net_cfg = network_config(config)
    metadata = {
        "variant": net_cfg.variant,
        "stage": stage,
        "epoch": epoch,
        "config_hash": config_hash(config),
        "rng_state": rng_state(rng) if rng is not None else None,
        "latent_width": net_cfg.latent_width,
        "vox_dim": net_cfg.vox_dim,
    }
    save_checkpoint(path, store, metadata)


def load_stage_checkpoint(path, config: ExperimentConfig,
                          expect_hash: bool = True):
    store, metadata = load_checkpoint(path)
    net_cfg = network_config(config)
    if metadata.get("variant") != net_cfg.variant:
        raise ValueError(
            f"checkpoint variant {metadata.get('variant')!r} does not match "
            f"the configured {net_cfg.variant!r} network")
    if expect_hash and metadata.get("config_hash") != config_hash(config):
        raise ValueError("checkpoint was written under a different config")
    return store, metadata


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    pipeline: str
    stage_tables: dict[int, evaluate.IouTable] = field(default_factory=dict)
    final_table: evaluate.IouTable | None = None
    checkpoint_path: Path | None = None


class _TrainLog:
    def __init__(self, path: Path):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(["stage", "epoch", "step", "total", "recon",
                               "align", "sim_pos", "sim_neg"])

    def extend(self, stats: list[StepStats]) -> None:
        for s in stats:
            b = s.breakdown
            self._writer.writerow([s.stage, s.epoch, s.step, repr(b.total),
                                   repr(b.recon), repr(b.align),
                                   repr(b.sim_pos), repr(b.sim_neg)])

    def close(self) -> None:
        self._fh.close()


@dataclass
class ExperimentContext:
    """Everything run_pipeline needs that is derived from artifacts."""

    config: ExperimentConfig
    paths: runs.RunPaths
    manifest: DatasetManifest
    split: FewShotSplit
    priors_by_class: dict[str, np.ndarray]
    train_pool: TrainingPool
    query_samples: SampleArrays

    @classmethod
    def load(cls, config: ExperimentConfig,
             paths: runs.RunPaths) -> "ExperimentContext":
        manifest = runs.load_manifest(paths)
        split = runs.load_split(paths)
        priors = runs.load_priors(paths, config.data.classes)
        pool = build_pool(manifest, split.all_train_objects(), priors,
                          config.prior.mode, config.data.classes)
        query_records = manifest.records_for_objects(split.all_query_objects())
        query = load_samples(manifest, query_records)
        return cls(config, paths, manifest, split, priors, pool, query)

    def eval_table(self, net: Network, store: ParamStore) -> evaluate.IouTable:
        return evaluate.eval_iou(net, store, self.query_samples,
                                 self.priors_by_class, self.config.prior.mode,
                                 self.config.data.classes,
                                 self.config.eval.iou_threshold,
                                 self.config.eval.batch_size)


def prepare_gt_encoder(net: Network, ctx: ExperimentContext,
                       use_cache: bool = True) -> ParamStore:
    """Load the pretrained volume encoder, pretraining it on the training
    volumes first if no checkpoint exists yet."""
    config = ctx.config
    path = ctx.paths.checkpoints_dir / "gt_encoder.ckpt"
    if use_cache and path.exists():
        store, _ = load_checkpoint(path)
        return store
    volumes = unique_volumes(ctx.train_pool.samples)
    store, _ = pretrain_gt(net, volumes, config.train.pretrain_epochs,
                           lr=config.train.gt_lr,
                           batch_size=config.train.pretrain_batch,
                           seed=config.seed)
    ctx.paths.checkpoints_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, store, {"role": "gt_autoencoder",
                                  "config_hash": config_hash(config)})
    return store


def init_main_store(net: Network, config: ExperimentConfig,
                    pretrain_store: ParamStore,
                    pool: TrainingPool | None = None) -> ParamStore:
    store = net.init_params(stream_rng(config.seed, "init"))
    adopt_pretrained_encoder(store, pretrain_store)
    if pool is not None:
        net.center_latent_biases(store, pool.samples.images, pool.priors,
                                 pool.samples.volumes)
    return store


def run_pipeline(config: ExperimentConfig, run_dir: Path | str | None = None,
                 pipeline: str | None = None) -> PipelineResult:
    """Full experiment for one pipeline: pretrain the volume encoder, run
    the pipeline's stages, evaluate after each stage, and leave CSV logs,
    reports, and checkpoints in the run directory."""
    paths = runs.RunPaths.for_config(config, run_dir) \
        if not isinstance(run_dir, runs.RunPaths) else run_dir
    pipeline = pipeline or config.train.pipeline
    if pipeline not in PIPELINES:
        raise ValueError(f"unknown pipeline {pipeline!r}")
    paths.ensure_dirs()
    paths.write_resolved_config(config)
    ctx = ExperimentContext.load(config, paths)
    net = Network(network_config(config))
    pretrain_store = prepare_gt_encoder(net, ctx)
    store = init_main_store(net, config, pretrain_store, ctx.train_pool)

    result = PipelineResult(pipeline)
    log = _TrainLog(paths.logs_dir / f"{pipeline}_train.csv")
    try:
        previous = 0
        for stage in PIPELINES[pipeline]:
            rng = stream_rng(config.seed, stage)
            stats = train_stage(net, store, stage, previous, ctx.train_pool,
                                config, rng)
            log.extend(stats)
            previous = stage
            table = ctx.eval_table(net, store)
            result.stage_tables[stage] = table
            ckpt = paths.checkpoints_dir / f"{pipeline}_stage{stage}.ckpt"
            save_stage_checkpoint(ckpt, store, config, stage,
                                  config.train.stage_epochs[stage - 1], rng)
            result.checkpoint_path = ckpt
    finally:
        log.close()
    result.final_table = result.stage_tables[PIPELINES[pipeline][-1]]
    _write_tables(paths, pipeline, result.final_table)
    return result


def _write_tables(paths: runs.RunPaths, pipeline: str,
                  table: evaluate.IouTable) -> None:
    evaluate.write_iou_csv(table, paths.reports_dir / f"{pipeline}_iou.csv")
    evaluate.write_iou_samples_csv(
        table, paths.reports_dir / f"{pipeline}_iou_samples.csv")


def run_ablation(config: ExperimentConfig,
                 run_dir: Path | str | None = None,
                 pipelines: tuple[str, ...] = ("base", "input_mix",
                                               "latent_mix", "dual_mix"),
                 ) -> dict[str, PipelineResult]:
    """Train all requested pipelines, sharing stage prefixes.  Because
    every stage uses its own seeded stream, the shared-prefix shortcut is
    bit-identical to running each pipeline from scratch."""
    paths = runs.RunPaths.for_config(config, run_dir) \
        if not isinstance(run_dir, runs.RunPaths) else run_dir
    paths.ensure_dirs()
    paths.write_resolved_config(config)
    ctx = ExperimentContext.load(config, paths)
    net = Network(network_config(config))
    pretrain_store = prepare_gt_encoder(net, ctx)

    results: dict[str, PipelineResult] = {}
    cache: dict[tuple[int, ...], ParamStore] = {}
    logs: dict[str, list[StepStats]] = {}

    def stage_store(prefix: tuple[int, ...]) -> ParamStore:
        if prefix in cache:
            return cache[prefix]
        if not prefix:
            store = init_main_store(net, config, pretrain_store, ctx.train_pool)
        else:
            parent = stage_store(prefix[:-1]).copy()
            stage = prefix[-1]
            previous = prefix[-2] if len(prefix) > 1 else 0
            rng = stream_rng(config.seed, stage)
            stats = train_stage(net, parent, stage, previous, ctx.train_pool,
                                config, rng)
            for name, stages in PIPELINES.items():
                if stages[:len(prefix)] == prefix:
                    logs.setdefault(name, []).extend(stats)
            store = parent
        cache[prefix] = store
        return store

    for pipeline in pipelines:
        stages = PIPELINES[pipeline]
        store = stage_store(stages)
        result = PipelineResult(pipeline)
        table = ctx.eval_table(net, store)
        result.final_table = table
        ckpt = paths.checkpoints_dir / f"{pipeline}_stage{stages[-1]}.ckpt"
        save_stage_checkpoint(ckpt, store, config, stages[-1],
                              config.train.stage_epochs[stages[-1] - 1])
        result.checkpoint_path = ckpt
        _write_tables(paths, pipeline, table)
        log = _TrainLog(paths.logs_dir / f"{pipeline}_train.csv")
        log.extend(logs.get(pipeline, []))
        log.close()
        results[pipeline] = result
    return results


def alpha_sweep(config: ExperimentConfig, run_dir: Path | str | None = None,
                alphas: tuple[float, ...] = (0.2, 0.4, 1.0)
                ) -> list[tuple[float, float, float]]:
    """Novel-class average IoU of the two mixing stages for each mixing
    ratio distribution; rows of (alpha, input-mix IoU, latent-mix IoU).
    The base stage is shared across the sweep."""
    from dataclasses import replace
    if any(a <= 0 for a in alphas):
        raise ValueError("alphas must be positive")
    rows = []
    for alpha in alphas:
        swept = replace(config, mixup=replace(config.mixup, alpha=alpha))
        results = run_ablation(swept, run_dir,
                               pipelines=("input_mix", "latent_mix"))
        rows.append((alpha,
                     results["input_mix"].final_table.overall,
                     results["latent_mix"].final_table.overall))
    return rows


def write_alpha_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "input_mix_iou", "latent_mix_iou"])
        for alpha, in_iou, lat_iou in rows:
            writer.writerow([repr(alpha), repr(in_iou), repr(lat_iou)])
