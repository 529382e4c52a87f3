"""Command line entry point: one subcommand per pipeline stage.

Artifacts live under ``run.out_dir`` (or ``--out``)::

    dataset/manifest.json, dataset/images/*.pgm, dataset/summary.json
    candidates/{train,val,test}.csv, candidates/summary.json
    patches/{train,val,test}.bin (+ .bin.json index)
    models/{baseline,symmetry}.ckpt, models/{kind}_log.ndjson
    eval/report.json, eval/scored_candidates.csv, eval/roc_*.csv, eval/froc_*.csv
    logs/symmetry_cad.log
"""

from __future__ import annotations

import dataclasses
import logging
import typing as t
from pathlib import Path

import click
import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from symmetry_cad import __version__, configure_logging
from symmetry_cad.candidates import (
    LikelihoodParams,
    candidate_table,
    candidates_frame,
    label_candidates,
    mass_likelihood,
    read_candidates,
    threshold_candidates,
    tune_threshold,
    write_candidates,
)
from symmetry_cad.config import PipelineConfig, load_config, set_config_value
from symmetry_cad.evaluation import (
    REPORT_SCHEMA_VERSION,
    candidate_set_from_frame,
    evaluate_models,
    froc_from_set,
    roc_frame,
)
from symmetry_cad.exceptions import InsufficientDataError, SymmetryCadError
from symmetry_cad.io import provenance, read_json_artifact, write_csv_artifact, write_json_artifact
from symmetry_cad.nnet import glorot_init, load_checkpoint, save_checkpoint
from symmetry_cad.patches import build_pairs, read_archive, write_archive
from symmetry_cad.phantom import (
    DatasetManifest,
    assign_splits,
    by_split,
    dataset_table,
    generate_dataset,
    load_image,
    load_manifest,
    split_dataset,
    write_dataset,
)
from symmetry_cad.trainer import TrainingLog, predict, train, transfer_from_baseline

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SUMMARY_SCHEMA_VERSION = 1
SCORED_SCHEMA_VERSION = 1
MODEL_KINDS = ("baseline", "symmetry")
_KIND_STREAM = {"baseline": 1, "symmetry": 2}


def _manifest_path(config: PipelineConfig) -> Path:
    return config.out_dir / "dataset" / "manifest.json"


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise InsufficientDataError(f"{path} not found; run the '{stage}' stage first")
    return path


def _loader(config: PipelineConfig, manifest: DatasetManifest) -> t.Callable:
    root = config.out_dir / "dataset"

    def load(exam, record):
        return load_image(root, exam, record, manifest.config)

    return load


def cmd_phantom(config: PipelineConfig, threads: int = 1) -> DatasetManifest:
    """Generate, split and render the synthetic archive."""
    phantom_cfg = config.phantom()
    manifest = generate_dataset(phantom_cfg)
    parts = split_dataset(manifest, config.split_ratios, seed=phantom_cfg.seed)
    manifest = dataclasses.replace(
        assign_splits(manifest, *parts), provenance=provenance(config.values, phantom_cfg.seed)
    )
    written = write_dataset(manifest, config.out_dir / "dataset", threads=threads)
    summary = {
        "provenance": manifest.provenance,
        "splits": {name: dataset_table(by_split(written, name)) for name in SPLITS},
        "missing_laterality_exams": sum(1 for e in written.exams if e.missing_laterality),
    }
    write_json_artifact(config.out_dir / "dataset" / "summary.json", summary, SUMMARY_SCHEMA_VERSION)
    return written


def _likelihood_fn(config: PipelineConfig, manifest: DatasetManifest) -> t.Callable:
    section = config["candidates"]
    params = LikelihoodParams(n_orientations=section["n_orientations"], line_weight=section["line_weight"])
    radius = tuple(section["radius_range_px"])
    load = _loader(config, manifest)

    def likelihood(exam, record):
        image = load(exam, record)
        return image, mass_likelihood(image, radius, params)  # type: ignore[arg-type]

    return likelihood


def _validation_maps(config: PipelineConfig, manifest: DatasetManifest, threads: int) -> dict[str, t.Any]:
    likelihood = _likelihood_fn(config, manifest)
    val = list(by_split(manifest, "val").iter_images())
    results = Parallel(n_jobs=threads, prefer="threads")(delayed(likelihood)(e, r) for e, r in val)
    return {record.image_id: result for (_, record), result in zip(val, results)}


def _tune(config: PipelineConfig, val_maps: t.Mapping[str, t.Any]) -> float:
    section = config["candidates"]
    return tune_threshold([m for _, m in val_maps.values()], section["max_per_image"], section["min_separation_px"])


def cmd_tune_threshold(config: PipelineConfig, threads: int = 1, write_to: Path | None = None) -> float:
    """Tune the candidate threshold on the validation split, optionally committing it to ``write_to``."""
    manifest = load_manifest(_require(_manifest_path(config), "phantom"))
    threshold = _tune(config, _validation_maps(config, manifest, threads))
    if write_to is not None:
        set_config_value(write_to, "candidates.threshold", threshold)
    return threshold


def cmd_candidates(config: PipelineConfig, threads: int = 1) -> dict[str, pd.DataFrame]:
    """Detect and label candidates for every split; tunes the threshold on validation if unset."""
    manifest = load_manifest(_require(_manifest_path(config), "phantom"))
    section = config["candidates"]
    likelihood = _likelihood_fn(config, manifest)
    max_count = int(section["max_per_image"])

    threshold = section["threshold"]
    val_maps: dict[str, t.Any] = {}
    if threshold is None:
        logger.warning("candidates.threshold is unset; tuning it on the validation split")
        val_maps = _validation_maps(config, manifest, threads)
        threshold = _tune(config, val_maps)

    def detect(exam, record):
        image, lmap = val_maps.get(record.image_id) or likelihood(exam, record)
        cands = threshold_candidates(
            lmap, threshold, section["min_separation_px"], exam_id=exam.exam_id, max_count=max_count
        )
        return label_candidates(cands, image.lesions)

    block = provenance(config.values, config.seed("phantom"))
    frames: dict[str, pd.DataFrame] = {}
    counts: dict[str, float] = {}
    recall: dict[str, float | None] = {}
    for split in SPLITS:
        images = list(by_split(manifest, split).iter_images())
        found = Parallel(n_jobs=threads, prefer="threads")(delayed(detect)(e, r) for e, r in images)
        frames[split] = candidates_frame([c for chunk in found for c in chunk], split)
        write_candidates(config.out_dir / "candidates" / f"{split}.csv", frames[split], block)
        counts[split] = len(frames[split]) / max(len(images), 1)
        targets = {(r.image_id, les.lesion_id) for _, r in images for les in r.lesions}
        hits = {
            (row.image_id, row.lesion_id) for row in frames[split].itertuples() if row.label == "positive"
        }
        recall[split] = len(hits & targets) / len(targets) if targets else None
        logger.info("Candidates", extra={"split": split, "per_image": counts[split], "recall": recall[split]})

    missing = [e.exam_id for e in manifest.exams if e.missing_laterality]
    summary = {
        "provenance": block,
        "threshold": threshold,
        "candidates_per_image": counts,
        "lesion_recall": recall,
        "table": candidate_table(pd.concat(frames.values(), ignore_index=True), missing),
    }
    write_json_artifact(config.out_dir / "candidates" / "summary.json", summary, SUMMARY_SCHEMA_VERSION)
    return frames


def cmd_patches(config: PipelineConfig, threads: int = 1) -> dict[str, dict[str, t.Any]]:
    """Extract (and for training, subsample) patch pairs into per-split archives."""
    manifest = load_manifest(_require(_manifest_path(config), "phantom"))
    section = config["patches"]
    block = provenance(config.values, section["seed"])
    load = _loader(config, manifest)
    stats: dict[str, dict[str, t.Any]] = {}
    for split in SPLITS:
        frame = read_candidates(_require(config.out_dir / "candidates" / f"{split}.csv", "candidates"))
        archive, stats[split] = build_pairs(
            by_split(manifest, split),
            frame,
            load,
            size_px=section["patch_size_px"],
            output_size_px=section["output_size_px"],
            subsample_negatives=split == "train",
            min_lesion_dist_cm=section["min_lesion_dist_cm"],
            min_inter_dist_cm=section["min_inter_dist_cm"],
            seed=section["seed"],
            threads=threads,
        )
        write_archive(
            config.out_dir / "patches" / f"{split}.bin",
            archive,
            block,
            extra={
                "split": split,
                "stats": stats[split],
                "patch_size_px": section["patch_size_px"],
                "output_size_px": section["output_size_px"],
            },
        )
    return stats


def cmd_train(config: PipelineConfig, kind: str, threads: int = 1) -> dict[str, t.Any]:
    """Train one model; the symmetry model starts from the baseline checkpoint."""
    del threads  # batch assembly runs on its own prefetch thread
    patches_dir = config.out_dir / "patches"
    train_data = read_archive(_require(patches_dir / "train.bin", "patches"))
    val_data = read_archive(_require(patches_dir / "val.bin", "patches"))
    spec = config.network(kind)
    cfg = config.train(kind)
    section = config["patches"]
    augment_cfg = config.augment().rescaled(section["output_size_px"] / section["patch_size_px"])
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(_KIND_STREAM[kind],)))
    models = config.out_dir / "models"
    if kind == "baseline":
        params = glorot_init(spec, rng)
    else:
        _, baseline, _ = load_checkpoint(_require(models / "baseline.ckpt", "train --model baseline"))
        params = transfer_from_baseline(baseline, spec, rng)

    block = provenance(config.values, cfg.seed)
    log = TrainingLog(models / f"{kind}_log.ndjson", kind=kind, provenance=block)
    best, history = train(spec, params, train_data, val_data, cfg, augment_cfg=augment_cfg, log=log)
    best_record = max(history, key=lambda r: (r.val_auc, -r.epoch))
    save_checkpoint(
        models / f"{kind}.ckpt", spec, best, epoch=best_record.epoch, val_auc=best_record.val_auc, provenance=block
    )
    return {"kind": kind, "epochs": len(history), "best_epoch": best_record.epoch, "best_val_auc": best_record.val_auc}


def cmd_eval(config: PipelineConfig, checkpoints: t.Sequence[Path] = (), threads: int = 1) -> dict[str, t.Any]:
    """Score the test split with every checkpoint and write the report and curves."""
    manifest = load_manifest(_require(_manifest_path(config), "phantom"))
    test_manifest = by_split(manifest, "test")
    archive = read_archive(_require(config.out_dir / "patches" / "test.bin", "patches"))
    if not checkpoints:
        checkpoints = [p for p in (config.out_dir / "models" / f"{k}.ckpt" for k in MODEL_KINDS) if p.exists()]
    frame = pd.DataFrame(archive.index)
    scores: dict[str, np.ndarray] = {"candidate_selection": frame["score"].to_numpy(dtype=np.float64)}
    for path in checkpoints:
        spec, params, _ = load_checkpoint(path)
        scores[spec.kind] = predict(spec, params, archive)
        frame[f"{spec.kind}_score"] = scores[spec.kind]

    section = config["eval"]
    block = provenance(config.values, section["seed"])
    out = config.out_dir / "eval"
    write_csv_artifact(out / "scored_candidates.csv", frame, SCORED_SCHEMA_VERSION, block)
    cs = candidate_set_from_frame(frame, test_manifest)
    comparisons = [
        (a, b) for a, b in (("candidate_selection", "baseline"), ("baseline", "symmetry")) if a in scores and b in scores
    ]
    report = evaluate_models(
        cs,
        scores,
        comparisons=comparisons,
        missing_contralateral=~frame["has_contralateral"].to_numpy(dtype=bool),
        n=section["bootstrap_n"],
        level=section["level"],
        seed=section["seed"],
        threads=threads,
    )
    write_json_artifact(out / "report.json", {"provenance": block, **report}, REPORT_SCHEMA_VERSION)
    positive = frame["label"].to_numpy() == "positive"
    for name, column in scores.items():
        write_csv_artifact(out / f"roc_{name}.csv", roc_frame(column, positive), REPORT_SCHEMA_VERSION, block)
        for unit in ("image", "exam"):
            curve = froc_from_set(cs.with_scores(column), unit)
            write_csv_artifact(out / f"froc_{name}_{unit}.csv", curve.to_frame(), REPORT_SCHEMA_VERSION, block)
    return report


def cmd_pipeline(config: PipelineConfig, threads: int = 1) -> dict[str, t.Any]:
    """Every stage in order."""
    cmd_phantom(config, threads)
    cmd_candidates(config, threads)
    cmd_patches(config, threads)
    for kind in MODEL_KINDS:
        cmd_train(config, kind, threads)
    return cmd_eval(config, threads=threads)


def read_report(path: Path) -> dict[str, t.Any]:
    """Load an evaluation report, checking its schema version."""
    return read_json_artifact(path, REPORT_SCHEMA_VERSION)


def _common(func):
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True),
        click.option("--seed", type=int, default=None, help="Override the seed of every stochastic stage."),
        click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True),
        click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Override run.out_dir."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _run(stage: t.Callable[..., t.Any], config_path: Path, seed, out_dir, threads, **kwargs) -> t.Any:
    try:
        config = load_config(config_path, seed=seed, out_dir=out_dir)
        configure_logging(config.out_dir / "logs")
        logger.info("Running %s", stage.__name__, extra={"config": str(config_path), "hash": config.hash})
        return stage(config, threads=threads, **kwargs)
    except SymmetryCadError as exc:
        logger.error("%s failed: %s", stage.__name__, exc)
        raise click.ClickException(str(exc)) from exc


@click.group()
@click.version_option(__version__, prog_name="symmetry-cad")
def cli() -> None:
    """Symmetry-aware mass detection on synthetic bilateral mammograms."""


@cli.command()
@_common
def phantom(config_path, seed, threads, out_dir) -> None:
    """Generate the synthetic dataset."""
    _run(cmd_phantom, config_path, seed, out_dir, threads)


@cli.command()
@_common
def candidates(config_path, seed, threads, out_dir) -> None:
    """Detect candidate mass locations."""
    _run(cmd_candidates, config_path, seed, out_dir, threads)


@cli.command("tune-threshold")
@_common
@click.option("--write", is_flag=True, help="Store the tuned value as candidates.threshold in the config file.")
def tune_threshold_command(config_path, seed, threads, out_dir, write) -> None:
    """Tune the candidate threshold on the validation split."""
    threshold = _run(cmd_tune_threshold, config_path, seed, out_dir, threads, write_to=config_path if write else None)
    click.echo(f"candidates.threshold = {threshold}")


@cli.command()
@_common
def patches(config_path, seed, threads, out_dir) -> None:
    """Extract symmetric patch pairs."""
    _run(cmd_patches, config_path, seed, out_dir, threads)


@cli.command("train")
@_common
@click.option("--model", "kind", type=click.Choice(MODEL_KINDS), required=True)
def train_command(config_path, seed, threads, out_dir, kind) -> None:
    """Train the baseline or the symmetry model."""
    result = _run(cmd_train, config_path, seed, out_dir, threads, kind=kind)
    click.echo(f"{kind}: best validation AUC {result['best_val_auc']:.4f} at epoch {result['best_epoch']}")


@cli.command("eval")
@_common
@click.option("--checkpoint", "checkpoints", multiple=True, type=click.Path(exists=True, path_type=Path))
def eval_command(config_path, seed, threads, out_dir, checkpoints) -> None:
    """Evaluate checkpoints on the test split."""
    report = _run(cmd_eval, config_path, seed, out_dir, threads, checkpoints=list(checkpoints))
    for name, entry in report["models"].items():
        click.echo(f"{name}: AUC {entry['auc']:.4f}  CPM image {entry['cpm_image']:.4f}  exam {entry['cpm_exam']:.4f}")


@cli.command()
@_common
def pipeline(config_path, seed, threads, out_dir) -> None:
    """Run every stage."""
    _run(cmd_pipeline, config_path, seed, out_dir, threads)


if __name__ == "__main__":
    cli()
