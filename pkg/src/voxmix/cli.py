"""Command-line entry point.

Every experiment is a config file plus a subcommand; outputs land only
under the run directory (``$VOXMIX_RUN_ROOT/<run_name>``, default root
``./runs``).  Exit codes: 0 ok, 1 usage error, 2 config error, 3 missing
input artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import corpus, evaluate, mixup, runs, trainer, verification, voxel
from .config import ConfigError, ExperimentConfig, load_config
from .model import Network
from .nn import NumericError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="voxmix", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, help_text, needs_config=True):
        p = sub.add_parser(name, help=help_text)
        if needs_config:
            p.add_argument("--config", required=True,
                           help="path to the experiment config file")
            p.add_argument("-o", "--override", action="append", default=[],
                           metavar="KEY=VALUE",
                           help="config override, applied after the file")
        p.add_argument("--run-root", default=None,
                       help=f"run root directory (default ${runs.RUN_ROOT_ENV} "
                            "or ./runs)")
        return p

    add("gen-data", "generate the synthetic dataset")
    add("build-priors", "write the few-shot split and per-class priors")
    add("pretrain-gt", "pretrain the volume encoder (overwrites any cache)")
    p = add("train", "run the configured training pipeline")
    p.add_argument("--pipeline", default=None,
                   choices=sorted(trainer.PIPELINES),
                   help="override the configured pipeline")
    p.add_argument("--all", action="store_true",
                   help="train all four pipelines, sharing stage prefixes")
    p = add("eval", "evaluate a trained checkpoint on the query set")
    p.add_argument("--pipeline", default=None,
                   choices=sorted(trainer.PIPELINES))
    p.add_argument("--dump-predictions", action="store_true",
                   help="also write binarized predictions as binvox files")
    p = add("analyze-latent", "same/different-object cosine report")
    p.add_argument("--pipeline", default=None,
                   choices=sorted(trainer.PIPELINES))
    p = add("proximity", "join class proximity with the evaluated IoU table")
    p.add_argument("--pipeline", default=None,
                   choices=sorted(trainer.PIPELINES))
    p = add("alpha-sweep", "IoU of both mixing stages across mixing ratios")
    p.add_argument("--alphas", default="0.2,0.4,1.0",
                   help="comma-separated Beta-distribution parameters")
    p = add("mix-preview", "dump mixed images and volumes for inspection")
    p.add_argument("--pairs", type=int, default=4)
    p = add("grad-check", "finite-difference check of all layers and losses",
            needs_config=False)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--probes", type=int, default=20)
    return parser


def _load(args) -> tuple[ExperimentConfig, runs.RunPaths]:
    config = load_config(args.config, args.override)
    paths = runs.RunPaths.for_config(config, args.run_root)
    return config, paths


def _last_checkpoint(config: ExperimentConfig, paths: runs.RunPaths,
                     pipeline: str) -> Path:
    stage = trainer.PIPELINES[pipeline][-1]
    path = paths.checkpoints_dir / f"{pipeline}_stage{stage}.ckpt"
    if not path.exists():
        raise runs.MissingArtifactError(
            f"no checkpoint at {path}; run train first")
    return path


def cmd_gen_data(args) -> int:
    config, paths = _load(args)
    paths.ensure_dirs()
    paths.write_resolved_config(config)
    manifest = corpus.build_dataset(
        paths.dataset_dir, config.data.classes, config.data.objects_per_class,
        config.data.poses_per_object, config.data.vox_dim,
        config.data.image_size, config.data.elevations, config.seed)
    print(f"wrote {len(manifest.records)} records under {paths.dataset_dir}")
    return EXIT_OK


def cmd_build_priors(args) -> int:
    config, paths = _load(args)
    manifest = runs.load_manifest(paths)
    split = corpus.make_split(manifest, config.data.base_classes,
                              config.data.novel_classes, config.data.shots,
                              config.seed)
    split.save(paths.split_path)
    paths.priors_dir.mkdir(parents=True, exist_ok=True)
    for class_id in config.data.classes:
        object_ids = split.train_objects[class_id]
        volumes = corpus.load_object_volumes(manifest, object_ids)
        prior = voxel.build_prior([volumes[o] for o in object_ids],
                                  config.prior.threshold)
        voxel.save_binvox(prior, paths.prior_path(class_id))
    print(f"wrote split and {len(config.data.classes)} priors under {paths.root}")
    return EXIT_OK


def cmd_pretrain_gt(args) -> int:
    config, paths = _load(args)
    ctx = trainer.ExperimentContext.load(config, paths)
    net = Network(trainer.network_config(config))
    paths.ensure_dirs()
    volumes = trainer.unique_volumes(ctx.train_pool.samples)
    store, history = trainer.pretrain_gt(
        net, volumes, config.train.pretrain_epochs, lr=config.train.gt_lr,
        batch_size=config.train.pretrain_batch, seed=config.seed)
    from .nn import save_checkpoint
    from .config import config_hash
    path = paths.checkpoints_dir / "gt_encoder.ckpt"
    save_checkpoint(path, store, {"role": "gt_autoencoder",
                                  "config_hash": config_hash(config)})
    last = history[-1] if history else float("nan")
    print(f"pretrained volume encoder for {len(history)} epochs "
          f"(final loss {last:.4f}) -> {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    config, paths = _load(args)
    if args.all:
        results = trainer.run_ablation(config, paths)
        for name in ("base", "input_mix", "latent_mix", "dual_mix"):
            table = results[name].final_table
            print(f"{name}: novel average IoU {table.overall:.4f}")
    else:
        result = trainer.run_pipeline(config, paths, args.pipeline)
        print(f"{result.pipeline}: novel average IoU "
              f"{result.final_table.overall:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config, paths = _load(args)
    pipeline = args.pipeline or config.train.pipeline
    ckpt = _last_checkpoint(config, paths, pipeline)
    store, _ = trainer.load_stage_checkpoint(ckpt, config, expect_hash=False)
    ctx = trainer.ExperimentContext.load(config, paths)
    net = Network(trainer.network_config(config))
    table = ctx.eval_table(net, store)
    evaluate.write_iou_csv(table, paths.reports_dir / f"{pipeline}_iou.csv")
    evaluate.write_iou_samples_csv(
        table, paths.reports_dir / f"{pipeline}_iou_samples.csv")
    if args.dump_predictions:
        dump_dir = paths.reports_dir / f"{pipeline}_predictions"
        dump_dir.mkdir(parents=True, exist_ok=True)
        grids = evaluate.predictions_as_grids(
            net, store, ctx.query_samples, ctx.priors_by_class,
            config.prior.mode, config.data.classes,
            config.eval.iou_threshold, config.eval.batch_size)
        for object_id, pose_id, grid in grids:
            voxel.save_binvox(grid, dump_dir / f"{object_id}_p{pose_id}.binvox")
    for class_id, mean_iou, count in table.rows:
        print(f"{class_id:10s} {mean_iou:.4f}  (n={count})")
    print(f"{'average':10s} {table.overall:.4f}  [prior mode: {table.prior_mode}]")
    return EXIT_OK


def cmd_analyze_latent(args) -> int:
    config, paths = _load(args)
    pipeline = args.pipeline or config.train.pipeline
    ckpt = _last_checkpoint(config, paths, pipeline)
    store, _ = trainer.load_stage_checkpoint(ckpt, config, expect_hash=False)
    ctx = trainer.ExperimentContext.load(config, paths)
    net = Network(trainer.network_config(config))
    samples = corpus.load_samples(ctx.manifest, list(ctx.manifest.records))
    report = evaluate.cosine_report(net, store, samples, ctx.priors_by_class,
                                    config.prior.mode, config.data.classes,
                                    config.eval.batch_size)
    out = paths.reports_dir / f"{pipeline}_cosine.csv"
    evaluate.write_cosine_csv(report, out)
    for class_id, same, diff, n_same, n_diff in report.rows:
        print(f"{class_id:10s} same-object {same:.4f} ({n_same} pairs)  "
              f"different-object {diff:.4f} ({n_diff} pairs)")
    return EXIT_OK


def cmd_proximity(args) -> int:
    config, paths = _load(args)
    pipeline = args.pipeline or config.train.pipeline
    table_path = paths.reports_dir / f"{pipeline}_iou.csv"
    if not table_path.exists():
        raise runs.MissingArtifactError(
            f"no IoU table at {table_path}; run eval first")
    manifest = runs.load_manifest(paths)
    split = runs.load_split(paths)
    novel, base = [], []
    for class_id in split.novel_classes:
        objs = split.train_objects[class_id] + split.query_objects[class_id]
        for obj, grid in corpus.load_object_volumes(manifest, objs).items():
            novel.append((obj, class_id, grid))
    for class_id in split.base_classes:
        vols = corpus.load_object_volumes(manifest, split.train_objects[class_id])
        base.extend(vols.items())
    prox = voxel.proximity(novel, base)
    iou_by_class = _read_iou_csv(table_path)
    rows = [(c, prox.per_novel_class[c], iou_by_class[c])
            for c in sorted(prox.per_novel_class)]
    out = paths.reports_dir / f"{pipeline}_proximity.csv"
    evaluate.write_proximity_csv(rows, out)
    for class_id, prox_value, iou_value in rows:
        print(f"{class_id:10s} proximity {prox_value:.4f}  iou {iou_value:.4f}")
    return EXIT_OK


def _read_iou_csv(path: Path) -> dict[str, float]:
    import csv
    values: dict[str, float] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["class"] != "__average__":
                values[row["class"]] = float(row["mean_iou"])
    return values


def cmd_alpha_sweep(args) -> int:
    config, paths = _load(args)
    try:
        alphas = tuple(float(a) for a in args.alphas.split(","))
    except ValueError:
        raise ConfigError(f"bad --alphas value {args.alphas!r}")
    rows = trainer.alpha_sweep(config, paths, alphas)
    out = paths.reports_dir / "alpha_sweep.csv"
    trainer.write_alpha_csv(rows, out)
    for alpha, in_iou, lat_iou in rows:
        print(f"alpha={alpha:<4g} input-mix {in_iou:.4f}  latent-mix {lat_iou:.4f}")
    return EXIT_OK


def cmd_mix_preview(args) -> int:
    config, paths = _load(args)
    ctx = trainer.ExperimentContext.load(config, paths)
    pool = ctx.train_pool
    rng = trainer.stream_rng(config.seed, trainer.STAGE_INPUT_MIX)
    count = min(args.pairs, len(pool))
    pairs = mixup.pair_batch(count, config.mixup.alpha, rng)
    out_dir = paths.reports_dir / "mix_preview"
    out_dir.mkdir(parents=True, exist_ok=True)
    from .render import write_pgm
    for k, pair in enumerate(pairs):
        image, prior, volume = mixup.input_mix(
            (pool.samples.images[pair.i],
             np.zeros_like(pool.samples.volumes[pair.i]) if pool.priors is None
             else pool.priors[pair.i],
             pool.samples.volumes[pair.i]),
            (pool.samples.images[pair.j],
             np.zeros_like(pool.samples.volumes[pair.j]) if pool.priors is None
             else pool.priors[pair.j],
             pool.samples.volumes[pair.j]),
            pair.lam)
        write_pgm(image[0], out_dir / f"pair{k}_sil.pgm")
        write_pgm(image[1], out_dir / f"pair{k}_dep.pgm")
        mixup.write_vgrid(prior[0], out_dir / f"pair{k}_prior.vgrid")
        mixup.write_vgrid(volume[0], out_dir / f"pair{k}_volume.vgrid")
    with open(out_dir / "pairs.csv", "w", newline="") as fh:
        import csv
        writer = csv.writer(fh)
        writer.writerow(["pair", "i", "j", "lam",
                         "object_i", "object_j"])
        for k, pair in enumerate(pairs):
            writer.writerow([k, pair.i, pair.j, repr(pair.lam),
                             pool.samples.object_ids[pair.i],
                             pool.samples.object_ids[pair.j]])
    print(f"wrote {count} mixed pairs under {out_dir}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    reports = verification.run_standard_checks(args.tolerance, args.probes)
    worst = max(reports, key=lambda item: item[1].max_rel_error)
    for name, report in reports:
        print(f"{name:28s} max rel error {report.max_rel_error:.3e}")
    overall = worst[1].max_rel_error
    ok = all(report.passed for _, report in reports)
    print(f"{'PASS' if ok else 'FAIL'}: max relative error {overall:.3e} "
          f"({worst[0]}) at tolerance {args.tolerance:.1e}")
    if not ok:
        raise NumericError("gradient check failed")
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-priors": cmd_build_priors,
    "pretrain-gt": cmd_pretrain_gt,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze-latent": cmd_analyze_latent,
    "proximity": cmd_proximity,
    "alpha-sweep": cmd_alpha_sweep,
    "mix-preview": cmd_mix_preview,
    "grad-check": cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageError("a subcommand is required")
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except runs.MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
