#!/usr/bin/env python3
"""
Moodshift Command Line
======================

One subcommand per pipeline stage; every stage reads and writes plain files
in the output directory so each step can be inspected or rerun on its own:

    gen -> split -> index -> train -> evaluate -> compare
    ablate           (loss-combination grid)
    transform        (inference: transform embeddings and retrieve neighbours)
    ingest           (reduce multi-label metadata to single labels)

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

import functools
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import click
import numpy as np
import pandas as pd
from rich.console import Console
from rich.table import Table

from . import __version__
from .catalog import (
    SPLIT_NAMES, Catalog, SplitAssignment, ingest_multilabel, kfold_split, load_catalog, read_embeddings,
    split_catalog,
)
from .config import ExperimentConfig
from .errors import DimensionMismatchError, MoodshiftError, ValidationError
from .evaluation import (
    METHOD_AVG_MOOD, METHOD_MODEL, METHOD_ORACLE_TOP1, METHOD_ORACLE_TOP100, METHOD_RANDOM, METHODS, EvalReport,
    RetrievalPool, baseline_avg_mood, baseline_oracle, baseline_random, compare_reports, evaluate_model,
    pp_vs_random,
)
from .manifest import RunManifest
from .model import MoodTransformer
from .simindex import (
    SimilarityMap, build_similarity_map, load_similarity_map, save_similarity_map, simmap_sidecar_path,
)
from .synth import write_synthetic
from .train import run_ablation, train_kfold, train_model

logger = logging.getLogger(__name__)
console = Console()

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_FILE = "moodshift.log"

SPLIT_FILE = "splits.json"
MODEL_FILE = "model.mdl"
TRAIN_REPORT = "train_report"
KFOLD_DIR = "kfold"
COMPARE_FILE = "compare"
ABLATION_FILE = "ablation.csv"
ABLATION_PP_FILE = "ablation_pp.csv"
TRANSFORM_FILE = "transform.jsonl"


def setup_logging(out_dir: Path, verbose: bool = False):
    """Log to ``moodshift.log`` in the output directory and to stderr."""
    out_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(out_dir / LOG_FILE),
            logging.StreamHandler(),
        ],
        force=True,
    )


def simmap_file(which: str) -> str:
    return f"simmap_{which}.sim"


def eval_file(method: str) -> str:
    return f"eval_{method}.json"


@dataclass
class Run:
    """Resolved configuration, output directory and manifest of one invocation."""
    command: str
    config: ExperimentConfig
    out: Path
    manifest: RunManifest

    @property
    def threads(self) -> int:
        return self.config.threads

    def finish(self, outputs: Sequence[Path]):
        self.manifest.add_outputs(outputs)
        self.manifest.write(self.out, f"manifest_{self.command}.json")


def common_options(func):
    """Options shared by every subcommand."""
    @click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                  help="Experiment configuration (YAML or JSON)")
    @click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
                  help="Output directory (default: paths.out_dir)")
    @click.option("--seed", type=int, default=None, help="Master seed (default: runtime.seed)")
    @click.option("--threads", type=click.IntRange(min=1), envvar="MOODSHIFT_THREADS", default=None,
                  help="Worker threads (env: MOODSHIFT_THREADS)")
    @click.option("--verbose", "-v", is_flag=True, help="Debug logging")
    @functools.wraps(func)
    def wrapper(config_path, out_dir, seed, threads, verbose, **kwargs):
        command = click.get_current_context().info_name
        try:
            config = ExperimentConfig.load(config_path, seed=seed, threads=threads)
            out = Path(out_dir) if out_dir is not None else config.out_dir
            setup_logging(out, verbose)
            arguments = dict(kwargs, config=config_path, out=str(out), seed=seed, threads=threads)
            run = Run(command, config, out, RunManifest.start(command, arguments, config))
            return func(run, **kwargs)
        except FileNotFoundError as e:
            logger.error(f"{command}: {e}")
            console.print(f"[red]Error: {e}[/red]")
            sys.exit(ValidationError.exit_code)
        except MoodshiftError as e:
            logger.error(f"{command}: {e}")
            console.print(f"[red]Error: {e}[/red]")
            sys.exit(e.exit_code)
        except (click.ClickException, click.exceptions.Exit):
            raise
        except Exception as e:
            logger.exception(f"{command} failed: {e}")
            console.print(f"[red]Error: {e}[/red]")
            sys.exit(MoodshiftError.exit_code)
    return wrapper


def print_frame(frame: pd.DataFrame, title: str):
    table = Table(title=title)
    for column in frame.columns:
        table.add_column(str(column), style="cyan" if column in ("method", "combo", "fold") else "green")
    for _, row in frame.iterrows():
        table.add_row(*[f"{v:.4f}" if isinstance(v, float) else str(v) for v in row])
    console.print(table)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found at {path}")
    return path


def _catalog(run: Run) -> Catalog:
    embeddings_path, metadata_path = run.config.catalog_paths(run.out)
    _require(embeddings_path, "Embedding file")
    _require(metadata_path, "Metadata file")
    run.manifest.add_inputs([embeddings_path, metadata_path])
    return load_catalog(embeddings_path, metadata_path)


def _split(run: Run, catalog: Catalog, outputs: List[Path]) -> SplitAssignment:
    """Load the saved split, or draw one with the configured seed and save it."""
    path = run.out / SPLIT_FILE
    if path.exists():
        split = SplitAssignment.load(path)
        split.check_catalog(catalog)
        run.manifest.add_inputs([path])
        return split
    logger.info(f"No split at {path}, drawing one")
    split = split_catalog(catalog, run.config.split_ratios, run.config.seeds()["split"], run.config.split_tolerance)
    split.save(path)
    outputs.append(path)
    return split


def _simmap(run: Run, catalog: Catalog, split: SplitAssignment, which: str, outputs: List[Path]) -> SimilarityMap:
    path = run.out / simmap_file(which)
    if path.exists():
        simmap = load_similarity_map(path)
        if simmap.built_over is None:
            simmap.built_over = which
        sidecar = simmap_sidecar_path(path)
        run.manifest.add_inputs([path, sidecar] if sidecar.exists() else [path])
        return simmap
    logger.info(f"No similarity map at {path}, building one")
    simmap = build_similarity_map(catalog, split, which, run.config.index_k, run.threads)
    save_similarity_map(simmap, path)
    outputs.extend([path, simmap_sidecar_path(path)])
    return simmap


@click.group()
@click.version_option(version=__version__, prog_name="moodshift")
def cli():
    """Mood-guided embedding transformation experiments."""


@cli.command()
@common_options
def gen(run: Run):
    """Generate a synthetic catalog."""
    embeddings_path, metadata_path = run.config.catalog_paths(run.out)
    synth = run.config.synth()
    catalog, paths = write_synthetic(synth, embeddings_path, metadata_path)
    summary = pd.DataFrame([{
        "tracks": len(catalog),
        "artists": len(set(catalog.artists)),
        "d": catalog.dim,
        "moods": catalog.mood_count,
        "genres": catalog.genre_count,
        "mean_instruments": float(np.mean([len(s) for s in catalog.instrument_sets])),
    }])
    print_frame(summary, "Synthetic Catalog")
    run.finish(list(paths.values()))


@cli.command()
@common_options
def split(run: Run):
    """Artist-disjoint, mood-stratified split (or k folds with split.kfold)."""
    catalog = _catalog(run)
    seed = run.config.seeds()["split"]
    if run.config.kfold:
        folds = kfold_split(catalog, run.config.kfold, seed, run.config.split_ratios, run.config.split_tolerance)
        paths = [run.out / f"fold{i}" / SPLIT_FILE for i in range(len(folds))]
    else:
        folds = [split_catalog(catalog, run.config.split_ratios, seed, run.config.split_tolerance)]
        paths = [run.out / SPLIT_FILE]

    rows = []
    for fold, (assignment, path) in enumerate(zip(folds, paths)):
        assignment.save(path)
        for name in assignment.names:
            proportions = assignment.mood_proportions(catalog, name)
            rows.append({
                "fold": fold,
                "split": name,
                "tracks": len(assignment.ids(name)),
                "artists": len(assignment.artists(catalog, name)),
                **{f"mood_{i}": float(p) for i, p in enumerate(proportions)},
            })
    print_frame(pd.DataFrame(rows), "Splits")
    run.finish(paths)


@cli.command()
@click.argument("raw_metadata", type=click.Path(dir_okay=False))
@common_options
def ingest(run: Run, raw_metadata: str):
    """Reduce multi-label metadata to one mood and one genre per track."""
    raw = _require(Path(raw_metadata), "Raw metadata")
    run.manifest.add_inputs([raw])
    _, metadata_path = run.config.catalog_paths(run.out)
    records = ingest_multilabel(raw, metadata_path, run.config.seeds()["split"])
    console.print(f"[green]Ingested {len(records)} tracks into {metadata_path}[/green]")
    run.finish([metadata_path])


@cli.command()
@click.option("--split", "which", type=click.Choice(SPLIT_NAMES), default="train", show_default=True)
@click.option("--k", type=click.IntRange(min=1), default=None, help="List length per mood (default: index.k)")
@common_options
def index(run: Run, which: str, k: Optional[int]):
    """Build the per-mood similarity map over one split."""
    catalog = _catalog(run)
    outputs: List[Path] = []
    assignment = _split(run, catalog, outputs)
    simmap = build_similarity_map(catalog, assignment, which, k or run.config.index_k, run.threads)
    path = run.out / simmap_file(which)
    save_similarity_map(simmap, path)
    console.print(f"[green]Similarity map over '{which}': {len(simmap)} seeds, k={simmap.k} -> {path}[/green]")
    run.finish(outputs + [path, simmap_sidecar_path(path)])


@cli.command()
@common_options
def train(run: Run):
    """Train a model (k models with split.kfold) and save the best checkpoint."""
    catalog = _catalog(run)
    config = run.config.train()
    outputs: List[Path] = []

    if config.kfold:
        kfold_dir = run.out / KFOLD_DIR
        report = train_kfold(catalog, config.kfold, config, run.config.split_ratios, run.config.split_tolerance,
                             run.config.index_k, kfold_dir, run.threads)
        json_path, csv_path = kfold_dir / "kfold_report.json", kfold_dir / "kfold_report.csv"
        report.save(json_path, csv_path)
        print_frame(report.mean_table(), "Test Metrics (mean over folds)")
        outputs += [json_path, csv_path]
        outputs += [kfold_dir / f"fold{i}" / name for i in range(config.kfold) for name in (MODEL_FILE, "model.json")]
        run.finish(outputs)
        return

    assignment = _split(run, catalog, outputs)
    simmap = _simmap(run, catalog, assignment, "train", outputs)
    checkpoint = run.out / MODEL_FILE
    report = train_model(catalog, assignment, simmap, config, checkpoint, run.threads,
                         provenance={"config_hash": run.config.config_hash(), "inputs": dict(run.manifest.inputs)})
    json_path, csv_path = run.out / f"{TRAIN_REPORT}.json", run.out / f"{TRAIN_REPORT}.csv"
    report.save(json_path, csv_path)

    best = report.epochs[report.best_epoch]
    summary = pd.DataFrame([{
        "epochs": len(report.epochs),
        "best_epoch": report.best_epoch + 1,
        "val_mood_p1": best.val_mood_p1,
        "val_genre_p1": best.val_genre_p1,
        "final_loss": report.epochs[-1].loss.total,
    }])
    print_frame(summary, "Training")
    run.finish(outputs + [checkpoint, checkpoint.with_suffix(".json"), json_path, csv_path])


def _evaluate_method(run: Run, method: str, catalog: Catalog, assignment: SplitAssignment, which: str,
                     checkpoint: Path, rng: np.random.Generator, outputs: List[Path]) -> EvalReport:
    if method == METHOD_MODEL:
        run.manifest.add_inputs([_require(checkpoint, "Checkpoint")])
        return evaluate_model(checkpoint, catalog, assignment, which, run.threads)
    if method == METHOD_RANDOM:
        return baseline_random(catalog, assignment, which)
    if method == METHOD_AVG_MOOD:
        return baseline_avg_mood(catalog, assignment, which, run.threads)
    simmap = _simmap(run, catalog, assignment, which, outputs)
    mode = "top1" if method == METHOD_ORACLE_TOP1 else "top100"
    return baseline_oracle(catalog, simmap, assignment, mode, rng, which, run.threads)


def _comparison(reports: Sequence[EvalReport]) -> pd.DataFrame:
    frame = compare_reports(reports)
    random_report = next((r for r in reports if r.method == METHOD_RANDOM), None)
    if random_report is not None:
        frame = pp_vs_random(frame, random_report)
    return frame


@cli.command()
@click.option("--method", type=click.Choice(METHODS + ("all",)), default="all", show_default=True)
@click.option("--split", "which", type=click.Choice(SPLIT_NAMES), default=None,
              help="Evaluated split (default: eval.split)")
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
              help=f"Model checkpoint (default: <out>/{MODEL_FILE})")
@common_options
def evaluate(run: Run, method: str, which: Optional[str], checkpoint: Optional[str]):
    """Score the model and/or baselines on a split."""
    catalog = _catalog(run)
    outputs: List[Path] = []
    assignment = _split(run, catalog, outputs)
    which = which or run.config.eval_split
    checkpoint = Path(checkpoint) if checkpoint else run.out / MODEL_FILE
    methods = run.config.eval_methods if method == "all" else [method]
    rng = np.random.default_rng(run.config.seeds()["eval"])

    reports = []
    for name in methods:
        if name not in METHODS:
            raise ValidationError(f"Unknown evaluation method '{name}' in eval.methods")
        report = _evaluate_method(run, name, catalog, assignment, which, checkpoint, rng, outputs)
        json_path = run.out / eval_file(name)
        csv_path = run.out / f"eval_{name}_confusion.csv"
        report.save(json_path, csv_path)
        outputs += [json_path, csv_path]
        reports.append(report)

    print_frame(_comparison(reports), f"Evaluation on '{which}'")
    run.finish(outputs)


@cli.command()
@common_options
def compare(run: Run):
    """Collect every eval_*.json in the output directory into one table."""
    paths = sorted(run.out.glob("eval_*.json"))
    if not paths:
        raise ValidationError(f"No evaluation reports in {run.out}")
    run.manifest.add_inputs(paths)
    reports = []
    for path in paths:
        with open(path, "r", encoding="utf-8") as f:
            reports.append(EvalReport.from_dict(json.load(f)))
    order = {name: i for i, name in enumerate(METHODS)}
    reports.sort(key=lambda r: (order.get(r.method, len(order)), r.method))

    frame = _comparison(reports)
    csv_path, json_path = run.out / f"{COMPARE_FILE}.csv", run.out / f"{COMPARE_FILE}.json"
    frame.to_csv(csv_path, index=False)
    frame.to_json(json_path, orient="records", indent=2)
    print_frame(frame, "Comparison")
    run.finish([csv_path, json_path])


@cli.command()
@common_options
def ablate(run: Run):
    """Train and test all seven loss combinations."""
    catalog = _catalog(run)
    config = run.config.train()
    outputs: List[Path] = []
    if config.kfold:
        splits = kfold_split(catalog, config.kfold, run.config.seeds()["split"], run.config.split_ratios,
                             run.config.split_tolerance)
    else:
        splits = [_split(run, catalog, outputs)]

    result = run_ablation(catalog, splits, config, run.config.index_k, run.out, run.threads)
    csv_path, pp_path = run.out / ABLATION_FILE, run.out / ABLATION_PP_FILE
    result.save(csv_path, pp_path)
    print_frame(result.table, "Loss Ablation")
    if result.best_combo is not None:
        console.print(f"[green]Best combination on validation: {result.best_combo}[/green]")
    run.finish(outputs + [csv_path, pp_path])


def _seed_moods(value: str, count: int) -> np.ndarray:
    """A single mood index for every input, or a file with one index per input (JSON list or one per line)."""
    path = Path(value)
    if not path.exists():
        try:
            return np.full(count, int(value), dtype=np.int64)
        except ValueError:
            raise ValidationError(f"--seed-moods must be a mood index or a file, got '{value}'")
    text = path.read_text(encoding="utf-8").strip()
    try:
        moods = json.loads(text) if text.startswith("[") else [int(line) for line in text.splitlines() if line.strip()]
    except ValueError as e:
        raise ValidationError(f"Cannot parse seed moods in {path}: {e}")
    moods = np.asarray(moods, dtype=np.int64)
    if moods.shape != (count,):
        raise ValidationError(f"{path} has {moods.size} seed moods for {count} input embeddings")
    return moods


@cli.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
              help=f"Model checkpoint (default: <out>/{MODEL_FILE})")
@click.option("--input", "input_path", type=click.Path(dir_okay=False), required=True,
              help="Embeddings to transform (EMB1 file)")
@click.option("--target-mood", type=int, required=True)
@click.option("--seed-moods", required=True, help="Mood index of every input, or a file with one per input")
@click.option("--k", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--split", "which", type=click.Choice(SPLIT_NAMES), default=None,
              help="Restrict retrieval to one split (default: whole catalog)")
@common_options
def transform(run: Run, checkpoint: Optional[str], input_path: str, target_mood: int, seed_moods: str, k: int,
              which: Optional[str]):
    """Transform embeddings toward a target mood and retrieve the nearest catalog tracks."""
    checkpoint = _require(Path(checkpoint) if checkpoint else run.out / MODEL_FILE, "Checkpoint")
    inputs = _require(Path(input_path), "Input embeddings")
    run.manifest.add_inputs([checkpoint, inputs])
    model = MoodTransformer.load(checkpoint)
    if not 0 <= target_mood < model.mood_count:
        raise ValidationError(f"Unknown mood index {target_mood}, model has {model.mood_count} moods")

    embeddings = read_embeddings(inputs)
    if embeddings.shape[1] != model.dim:
        raise DimensionMismatchError(f"Input dimension {embeddings.shape[1]} does not match model dimension {model.dim}")
    moods = _seed_moods(seed_moods, embeddings.shape[0])
    bad = np.flatnonzero((moods < 0) | (moods >= model.mood_count))
    if bad.size:
        raise ValidationError(f"Unknown seed mood index {int(moods[bad[0]])} for input {int(bad[0])}")

    catalog = _catalog(run)
    outputs: List[Path] = []
    rows = None
    if which is not None:
        rows = _split(run, catalog, outputs).indices(catalog, which)
    pool = RetrievalPool(catalog, rows, threads=run.threads)
    transformed = model.transform(embeddings, moods, np.full(moods.size, target_mood))
    neighbours = pool.top_k(transformed, k)

    path = run.out / TRANSFORM_FILE
    with open(path, "w", encoding="utf-8") as f:
        for i, (vector, ranked) in enumerate(zip(transformed, neighbours)):
            record = {
                "index": i,
                "seed_mood": int(moods[i]),
                "target_mood": target_mood,
                "vector": [float(v) for v in vector.astype(np.float32)],
                "neighbors": [{"id": catalog.ids[r], "similarity": s} for r, s in ranked],
            }
            f.write(json.dumps(record) + "\n")
    console.print(f"[green]Transformed {len(transformed)} embeddings -> {path}[/green]")
    run.finish(outputs + [path])


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point mapping failures to exit codes (usage errors count as validation errors)."""
    try:
        cli.main(args=argv, prog_name="moodshift", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        e.show()
        return 1
    except click.exceptions.Abort:
        return 2
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 1
    except Exception as e:
        logger.exception(f"moodshift failed: {e}")
        return MoodshiftError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
