import argparse
import logging
import shutil
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import polars as pl

from guided_dml.analytics.main import best_configurations, recall_by_k
from guided_dml.datapipe.main import (
    DatasetSplit,
    SourceImage,
    View,
    generate_synthetic_dataset,
    load_image_tree,
    load_patch_store,
    manifest_digest,
    mix_views,
    save_patch_store,
    split_dataset,
)
from guided_dml.errors import TrainingError
from guided_dml.evaluation.main import (
    METRICS,
    EmbeddingSet,
    Provenance,
    aggregate_seeds,
    embedding_set,
    pca_project,
    plot_pca_scatter,
    plot_recall_curves,
    report_row,
    scatter_frame,
    sweep,
)
from guided_dml.fusion.main import STRATEGIES, FusionConfig, make_paired_samples, train_fusion
from guided_dml.manifest import DEFAULT_MANIFEST, ExperimentManifest, load_manifest, with_overrides
from guided_dml.models.main import ModelState, build_student, load_checkpoint, save_checkpoint
from guided_dml.training.main import (
    compute_distillation_targets,
    held_out_triplet_stats,
    loss_curve_frame,
    train_baseline,
    train_student,
    train_teacher,
)

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

TRAIN_TARGETS = ("teacher", "student", "siamese", "triplet", "classifier")
EVAL_TARGETS = ("student", "siamese", "triplet", "classifier", "untrained")
CHECKPOINT_FOLDER = "checkpoint"
STORE_FOLDER = "store"
RESULTS_FOLDER = "results"
FUSION_FOLDER = "fusion"


def view_dir(manifest: ExperimentManifest, view: View) -> Path:
    return manifest.output_dir / view.value


def store_dir(manifest: ExperimentManifest, view: View) -> Path:
    return view_dir(manifest, view) / STORE_FOLDER


def results_dir(manifest: ExperimentManifest, view: View) -> Path:
    return view_dir(manifest, view) / RESULTS_FOLDER


def run_dir(manifest: ExperimentManifest, view: View, target: str, dim: int, seed: int) -> Path:
    return view_dir(manifest, view) / target / f"dim-{dim}" / f"seed-{seed}"


def load_view_images(manifest: ExperimentManifest, view: View) -> List[SourceImage]:
    if view == View.MIX:
        return mix_views(load_view_images(manifest, View.SUR), load_view_images(manifest, View.SEC))
    dataset = manifest.dataset
    if dataset.synthetic is not None:
        spec = dataset.synthetic
        return generate_synthetic_dataset(
            spec.n_classes, spec.images_per_class, tuple(spec.image_size), spec.seed, view
        )
    return load_image_tree(dataset.root, view, dataset.class_names)


def prepare(manifest: ExperimentManifest, args: argparse.Namespace) -> None:
    dataset = manifest.dataset
    for view in dataset.views:
        images = load_view_images(manifest, view)
        split = split_dataset(
            images,
            train_fraction=dataset.train_fraction,
            seed=dataset.split_seed,
            patch_size=dataset.patch_size,
            max_overlap=dataset.max_overlap,
            mask_threshold=dataset.mask_threshold,
        )
        directory = store_dir(manifest, view)
        if directory.exists():
            shutil.rmtree(directory)
        manifest_path = save_patch_store(split, directory, sources=images)
        logging.info(
            f"[{view.value}] {len(images)} images -> {len(split.train)} train / {len(split.test)} test patches, "
            f"manifest sha256={manifest_digest(manifest_path)}"
        )


def _store(manifest: ExperimentManifest, view: View, cache: Dict[View, DatasetSplit]) -> DatasetSplit:
    if view not in cache:
        cache[view] = load_patch_store(store_dir(manifest, view))
    return cache[view]


def _load_trained(manifest: ExperimentManifest, view: View, target: str, dim: int, seed: int) -> ModelState:
    directory = run_dir(manifest, view, target, dim, seed) / CHECKPOINT_FOLDER
    if not directory.exists():
        raise FileNotFoundError(
            f"No {target} checkpoint for view={view.value} dim={dim} seed={seed} at {directory}; "
            f"run 'train --target {target}' first"
        )
    return load_checkpoint(directory)


def train(manifest: ExperimentManifest, args: argparse.Namespace) -> None:
    target = args.target
    stores: Dict[View, DatasetSplit] = {}
    for view in manifest.dataset.views:
        split = _store(manifest, view, stores)
        for dim in manifest.sweep.embedding_dims:
            for seed in manifest.sweep.seeds:
                directory = run_dir(manifest, view, target, dim, seed)
                if (directory / CHECKPOINT_FOLDER).exists():
                    logging.info(f"[{target}/{view.value}] dim={dim} seed={seed} already trained, skipping")
                    continue
                run_cfg = manifest.run_config(seed, checkpoint_dir=directory)
                if target == "teacher":
                    run = train_teacher(split, manifest.teacher_config(dim), manifest.loss.gemini, run_cfg)
                    stats = held_out_triplet_stats(run.state, split.test, seed)
                    logging.info(
                        f"[teacher/{view.value}] dim={dim} seed={seed} held-out margin {stats.mean_margin:.4f} "
                        f"accuracy {stats.accuracy:.4f}"
                    )
                elif target == "student":
                    teacher = _load_trained(manifest, view, "teacher", dim, seed)
                    run = train_student(
                        split,
                        compute_distillation_targets(teacher, split),
                        manifest.student_config(dim),
                        manifest.loss.hybrid,
                        run_cfg,
                    )
                else:
                    run = train_baseline(
                        split, target, manifest.student_config(dim), manifest.loss.baseline_margin, run_cfg
                    )
                save_checkpoint(run.state, directory / CHECKPOINT_FOLDER)
                loss_curve_frame(run).write_csv(directory / "loss_curve.csv")
                logging.info(
                    f"[{target}/{view.value}] dim={dim} seed={seed} best epoch {run.best_epoch} "
                    f"of {len(run.loss_curve)}"
                )


def _scatter(sets: Tuple[EmbeddingSet, EmbeddingSet], class_names: Sequence[str]) -> pl.DataFrame:
    frames = []
    for embeddings in sets:
        projection, _ = pca_project(embeddings)
        frames.append(scatter_frame(projection, embeddings.labels, embeddings.split, class_names))
    return pl.concat(frames)


def write_comparison(directory: Path) -> Optional[Path]:
    sweeps = sorted(directory.glob("*_sweep.csv"))
    if not sweeps:
        return None
    results = pl.concat([pl.read_csv(path) for path in sweeps], how="vertical_relaxed")
    path = directory / "comparison.csv"
    best_configurations(results).write_csv(path)
    return path


def evaluate(manifest: ExperimentManifest, args: argparse.Namespace) -> None:
    target = args.target
    grid = manifest.sweep.grid()
    class_names = manifest.dataset.resolved_class_names
    stores: Dict[View, DatasetSplit] = {}
    for view in manifest.dataset.views:
        split = _store(manifest, view, stores)
        computed: Dict[Tuple[int, int], Tuple[EmbeddingSet, EmbeddingSet]] = {}

        def train_fn(dim: int, seed: int) -> Tuple[EmbeddingSet, EmbeddingSet]:
            if target == "untrained":
                state = build_student(manifest.student_config(dim), seed)
            else:
                state = _load_trained(manifest, view, target, dim, seed)
            model_id = f"{target}/{view.value}/dim-{dim}"
            computed[(dim, seed)] = (
                embedding_set(state, split.train, "train", model_id, seed),
                embedding_set(state, split.test, "test", model_id, seed),
            )
            return computed[(dim, seed)]

        results = sweep(train_fn, grid, model=target, view=view.value)
        out = results_dir(manifest, view)
        out.mkdir(parents=True, exist_ok=True)
        results.write_csv(out / f"{target}_sweep.csv")
        results.write_json(out / f"{target}_sweep.json")

        for dim in grid.embedding_dims:
            scatter = _scatter(computed[(dim, grid.seeds[0])], class_names)
            scatter_path = out / f"{target}_dim-{dim}_scatter.csv"
            scatter.write_csv(scatter_path)
            plot_pca_scatter(scatter, out / f"{target}_dim-{dim}_pca.png", title=f"{target} {view.value} size={dim}")
        plot_recall_curves(
            recall_by_k(results, view.value), out / f"{target}_recall.png", title=f"{target} {view.value}"
        )
        write_comparison(out)
        logging.info(f"[{target}/{view.value}] results written to {out}")


def fusion_row(metrics: List, strategy: str, fused_dim: int) -> Dict:
    if len(metrics) >= 2:
        row = report_row(aggregate_seeds(metrics), model=f"fusion-{strategy}", view="SUR+SEC")
    else:
        row = {"model": f"fusion-{strategy}", "view": "SUR+SEC", "embedding_dim": None, "k": None, "n_seeds": 1}
        for metric in METRICS:
            row[metric] = getattr(metrics[0], metric)
            row[f"{metric}_ci95"] = None
    row["strategy"] = strategy
    row["fused_dim"] = fused_dim
    return row


def fuse(manifest: ExperimentManifest, args: argparse.Namespace) -> None:
    settings = manifest.fusion
    stores: Dict[View, DatasetSplit] = {}
    surface = _store(manifest, View.SUR, stores)
    section = _store(manifest, View.SEC, stores)
    out = manifest.output_dir / FUSION_FOLDER / settings.strategy
    out.mkdir(parents=True, exist_ok=True)

    metrics, first_run = [], None
    for seed in manifest.sweep.seeds:
        surface_ckpt = run_dir(manifest, View.SUR, "student", settings.surface_dim, seed) / CHECKPOINT_FOLDER
        section_ckpt = run_dir(manifest, View.SEC, "student", settings.section_dim, seed) / CHECKPOINT_FOLDER
        cfg = FusionConfig(
            strategy=settings.strategy,
            surface_checkpoint=surface_ckpt,
            section_checkpoint=section_ckpt,
            epochs=settings.epochs,
            learning_rate=settings.learning_rate,
            batch_size=settings.batch_size,
            seed=seed,
        )
        run = train_fusion(
            make_paired_samples(surface.train, section.train, seed),
            cfg,
            make_paired_samples(surface.test, section.test, seed),
        )
        save_checkpoint(run.state, out / f"seed-{seed}" / CHECKPOINT_FOLDER)
        metrics.append(run.metrics)
        first_run = first_run or run
        logging.info(f"[fusion/{settings.strategy}] seed={seed} fused_dim={run.fused_dim} accuracy={run.metrics.accuracy:.4f}")

    pl.DataFrame([fusion_row(metrics, settings.strategy, first_run.fused_dim)]).write_csv(out / "fusion.csv")
    provenance = Provenance(
        model_id=f"fusion-{settings.strategy}", seed=manifest.sweep.seeds[0], embedding_dim=first_run.fused_dim
    )
    sets = tuple(
        EmbeddingSet(
            embeddings=features,
            labels=labels,
            split=split,
            provenance=provenance,
            n_classes=manifest.n_classes,
        )
        for features, labels, split in (
            (first_run.train_features, first_run.train_labels, "train"),
            (first_run.test_features, first_run.test_labels, "test"),
        )
    )
    scatter = _scatter(sets, manifest.dataset.resolved_class_names)
    scatter.write_csv(out / "scatter.csv")
    plot_pca_scatter(scatter, out / "pca.png", title=f"fusion {settings.strategy}")


def plot(manifest: ExperimentManifest, args: argparse.Namespace) -> None:
    """Redraws every figure from the CSV results already on disk."""
    drawn = 0
    for view in manifest.dataset.views:
        out = results_dir(manifest, view)
        for path in sorted(out.glob("*_sweep.csv")):
            target = path.stem[: -len("_sweep")]
            plot_recall_curves(
                recall_by_k(pl.read_csv(path), view.value), out / f"{target}_recall.png", title=f"{target} {view.value}"
            )
            drawn += 1
        for path in sorted(out.glob("*_scatter.csv")):
            plot_pca_scatter(pl.read_csv(path), path.with_name(path.stem[: -len("_scatter")] + "_pca.png"))
            drawn += 1
    for path in sorted((manifest.output_dir / FUSION_FOLDER).glob("*/scatter.csv")):
        plot_pca_scatter(pl.read_csv(path), path.with_name("pca.png"), title=f"fusion {path.parent.name}")
        drawn += 1
    if not drawn:
        raise FileNotFoundError(f"No results to plot under {manifest.output_dir}")
    logging.info(f"Redrew {drawn} figures")


COMMANDS = {"prepare": prepare, "train": train, "eval": evaluate, "fuse": fuse, "plot": plot}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", type=Path, default=DEFAULT_MANIFEST, help="experiment YAML")
    common.add_argument("--output-dir", type=Path, default=None, help="overrides the manifest output_dir")
    common.add_argument("--views", nargs="+", choices=[view.value for view in View], default=None)
    common.add_argument("--seeds", nargs="+", type=int, default=None)
    common.add_argument("--dims", nargs="+", type=int, default=None, help="embedding sizes")

    parser = argparse.ArgumentParser(prog="guided-dml", description="Guided deep metric learning experiments")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("prepare", parents=[common], help="extract patches and write the split manifest")
    train_parser = commands.add_parser("train", parents=[common], help="train one model family")
    train_parser.add_argument("--target", choices=TRAIN_TARGETS, required=True)
    train_parser.add_argument("--epochs", type=int, default=None)
    eval_parser = commands.add_parser("eval", parents=[common], help="k-NN sweep over trained embeddings")
    eval_parser.add_argument("--target", choices=EVAL_TARGETS, default="student")
    fuse_parser = commands.add_parser("fuse", parents=[common], help="train a fusion head on SUR and SEC students")
    fuse_parser.add_argument("--strategy", choices=STRATEGIES, default=None)
    fuse_parser.add_argument("--epochs", type=int, default=None)
    commands.add_parser("plot", parents=[common], help="redraw figures from stored results")
    return parser


def resolve_manifest(args: argparse.Namespace) -> ExperimentManifest:
    manifest = load_manifest(args.manifest)
    epochs = getattr(args, "epochs", None)
    return with_overrides(
        manifest,
        {
            "dataset": {"views": args.views},
            "sweep": {"seeds": args.seeds, "embedding_dims": args.dims},
            "training": {"max_epochs": epochs if args.command == "train" else None},
            "fusion": {
                "strategy": getattr(args, "strategy", None),
                "epochs": epochs if args.command == "fuse" else None,
            },
            "output_dir": args.output_dir,
        },
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = resolve_manifest(args)
        COMMANDS[args.command](manifest, args)
    except TrainingError as e:
        logging.error(f"{args.command} failed: {e}")
        return EXIT_RUNTIME
    except (ValueError, FileNotFoundError) as e:
        logging.error(f"{args.command} rejected its input: {e}")
        return EXIT_VALIDATION
    except Exception as e:
        logging.error(f"{args.command} failed: {e}")
        return EXIT_RUNTIME
    return EXIT_OK
