#!/usr/bin/env python3
"""
Training Loop
=============

AdamW with decoupled weight decay, an epoch loop that draws fresh proxy
targets for every seed each epoch, validation-based model selection, k-fold
training and the loss-ablation grid.

Model selection keeps the epoch with the highest validation Mood P@1
(earliest epoch on ties). Validation always scores the float32-rounded
parameters, which are exactly what the checkpoint stores.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .catalog import Catalog, SplitAssignment, derive_seeds, kfold_split, DEFAULT_RATIOS, DEFAULT_TOLERANCE
from .errors import ConfigError, MoodshiftError, NonFiniteGradientError, TrainingDivergedError, ValidationError
from .evaluation import (
    EvalReport, RetrievalPool, baseline_avg_mood, baseline_oracle, baseline_random, evaluate_params,
)
from .losses import LossBreakdown, LossConfig, loss_total
from .model import TRAIN, ModelParams, backward, forward, init_params, save_checkpoint
from .simindex import DEFAULT_K, PairSampler, SimilarityMap, build_similarity_map

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

LR_SCHEDULES = ("constant", "linear")

PRESETS = {
    "large_scale": {"epochs": 100, "learning_rate": 1e-5},
    "small": {"epochs": 500, "learning_rate": 5e-4},
}

_NUMERIC_FIELDS = {
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "weight_decay": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
}

ABLATION_COMBOS = (
    ("cosine", (1.0, 0.0, 0.0)),
    ("triplet", (0.0, 1.0, 0.0)),
    ("cosbce", (0.0, 0.0, 1.0)),
    ("cosine+triplet", (1.0, 1.0, 0.0)),
    ("cosine+cosbce", (1.0, 0.0, 1.0)),
    ("triplet+cosbce", (0.0, 1.0, 1.0)),
    ("cosine+triplet+cosbce", (1.0, 1.0, 1.0)),
)

ABLATION_COLUMNS = [
    "combo", "mood_p1", "genre_p1", "inst_j1", "mood_pp_vs_random", "genre_pp_vs_random",
    "val_mood_p1", "val_genre_p1", "selection_score", "status",
]


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and epoch-loop settings."""
    epochs: int = 200
    batch_size: int = 1024
    learning_rate: float = 5e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rng_seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    kfold: Optional[int] = None
    lr_schedule: str = "constant"
    selection_weights: Tuple[float, float] = (0.6, 0.4)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}", field="train.epochs")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}", field="train.batch_size")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}", field="train.learning_rate")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}", field="train.weight_decay")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}", field="train.lr_schedule")
        if self.kfold is not None and self.kfold < 2:
            raise ConfigError(f"kfold must be >= 2, got {self.kfold}", field="split.kfold")

    @classmethod
    def from_dict(cls, values: Dict, **extra) -> "TrainConfig":
        """
        Build from a config section, converting numbers that YAML leaves as
        strings (``1e-5`` without a decimal point parses as a str).
        """
        values = dict(values)
        unknown = sorted(set(values) - set(_NUMERIC_FIELDS) - {"lr_schedule"})
        if unknown:
            raise ConfigError("Unknown train setting", field=f"train.{unknown[0]}")
        converted = {}
        for key, value in values.items():
            if key == "lr_schedule":
                converted[key] = str(value)
                continue
            try:
                converted[key] = _NUMERIC_FIELDS[key](value)
            except (TypeError, ValueError):
                raise ConfigError(f"{key} must be a number, got {value!r}", field=f"train.{key}")
        return cls(**converted, **extra)

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise ConfigError(f"Unknown preset '{name}', expected one of {sorted(PRESETS)}", field="train.preset")
        values = dict(PRESETS[name])
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> Dict:
        values = asdict(self)
        values["loss"] = self.loss.to_dict()
        values["selection_weights"] = {"mood": self.selection_weights[0], "genre": self.selection_weights[1]}
        return values


@dataclass
class AdamState:
    """First and second moment estimates plus the step counter."""
    step: int
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: Union[ModelParams, Dict[str, np.ndarray]]) -> "AdamState":
        tensors = params.tensors if isinstance(params, ModelParams) else params
        return cls(0, {k: np.zeros_like(t) for k, t in tensors.items()}, {k: np.zeros_like(t) for k, t in tensors.items()})


def adamw_step(params: Union[ModelParams, Dict[str, np.ndarray]], grads: Dict[str, np.ndarray], state: AdamState,
               config: TrainConfig, learning_rate: Optional[float] = None):
    """
    One AdamW update, in place: bias-corrected moments, weight decay applied
    to the parameters directly rather than through the gradient.

    Raises:
        NonFiniteGradientError: naming the first tensor with a non-finite gradient
    """
    tensors = params.tensors if isinstance(params, ModelParams) else params
    for name, tensor in tensors.items():
        grad = grads[name]
        if grad.shape != tensor.shape:
            raise ValidationError(f"Gradient for '{name}' has shape {grad.shape}, expected {tensor.shape}")
        if not np.isfinite(grad).all():
            raise NonFiniteGradientError(name)

    lr = config.learning_rate if learning_rate is None else learning_rate
    state.step += 1
    correction1 = 1.0 - config.beta1 ** state.step
    correction2 = 1.0 - config.beta2 ** state.step
    for name, tensor in tensors.items():
        grad = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * grad
        v *= config.beta2
        v += (1.0 - config.beta2) * grad * grad
        if config.weight_decay:
            tensor *= 1.0 - lr * config.weight_decay
        tensor -= lr * (m / correction1) / (np.sqrt(v / correction2) + config.eps)
    return params, state


def learning_rate_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Constant, or decayed linearly toward zero over ``total_steps``."""
    if config.lr_schedule == "linear":
        return config.learning_rate * (1.0 - step / max(total_steps, 1))
    return config.learning_rate


@dataclass
class EpochRecord:
    epoch: int
    learning_rate: float
    loss: LossBreakdown
    val_mood_p1: float
    val_genre_p1: float
    identity_fraction: float

    def to_dict(self) -> Dict:
        return {
            "epoch": self.epoch,
            "learning_rate": self.learning_rate,
            "loss_total": self.loss.total,
            "loss_cosine": self.loss.cosine,
            "loss_triplet": self.loss.triplet,
            "loss_cosbce": self.loss.cosbce,
            "samples": self.loss.batch_size,
            "val_mood_p1": self.val_mood_p1,
            "val_genre_p1": self.val_genre_p1,
            "identity_fraction": self.identity_fraction,
        }


@dataclass(eq=False)
class TrainReport:
    """Per-epoch history and the selected checkpoint."""
    epochs: List[EpochRecord]
    best_epoch: int
    best_val_mood_p1: float
    best_val_genre_p1: float
    checkpoint_path: Optional[str]
    config: Dict
    best_params: Optional[ModelParams] = None
    empty_resamples: int = 0

    def to_dict(self) -> Dict:
        """Convert to JSON-serializable dictionary."""
        return {
            "epochs": [e.to_dict() for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_val_mood_p1": self.best_val_mood_p1,
            "best_val_genre_p1": self.best_val_genre_p1,
            "checkpoint_path": self.checkpoint_path,
            "config": self.config,
            "empty_resamples": self.empty_resamples,
            "checksum": self.best_params.checksum() if self.best_params is not None else None,
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([e.to_dict() for e in self.epochs])

    def save(self, json_path: PathLike, csv_path: Optional[PathLike] = None):
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        if csv_path is not None:
            self.to_frame().to_csv(csv_path, index=False)


def _mean_breakdown(parts: List[LossBreakdown]) -> LossBreakdown:
    samples = sum(p.batch_size for p in parts)
    weights = np.array([p.batch_size for p in parts], dtype=np.float64) / samples
    cosine = float(weights @ [p.cosine for p in parts])
    triplet = float(weights @ [p.triplet for p in parts])
    cosbce = float(weights @ [p.cosbce for p in parts])
    total = float(weights @ [p.total for p in parts])
    return LossBreakdown(total=total, cosine=cosine, triplet=triplet, cosbce=cosbce, batch_size=samples)


def train_model(catalog: Catalog, split: SplitAssignment, simmap: SimilarityMap, config: TrainConfig,
                checkpoint_path: Optional[PathLike] = None, threads: int = 1,
                provenance: Optional[Dict] = None) -> TrainReport:
    """
    Train one model and keep the epoch with the best validation Mood P@1.

    Each epoch visits the train seeds in a seeded shuffle, draws a fresh pair
    per seed, and runs forward / joint loss / backward / AdamW per batch (the
    final short batch is kept).

    Raises:
        ValidationError: if the similarity map was not built over the train split
        TrainingDivergedError: if the training loss becomes non-finite
    """
    if simmap.built_over != "train":
        raise ValidationError(f"Training needs a similarity map built over 'train', got '{simmap.built_over}'")
    init_seed, loop_seed = derive_seeds(config.rng_seed, 2)
    params = init_params(catalog.dim, catalog.mood_count, init_seed)
    rng = np.random.default_rng(loop_seed)
    sampler = PairSampler(simmap, catalog)
    embeddings = catalog.embeddings.astype(np.float64)
    val_pool = RetrievalPool(catalog, split.indices(catalog, "val"), threads=threads)

    seeds = len(simmap)
    steps_per_epoch = math.ceil(seeds / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    state = AdamState.zeros(params)
    step = 0

    records: List[EpochRecord] = []
    best_params: Optional[ModelParams] = None
    best: Optional[EpochRecord] = None

    logger.info(f"Training on {seeds} seeds for {config.epochs} epochs "
                f"({steps_per_epoch} steps/epoch, lr={config.learning_rate}, schedule={config.lr_schedule})")
    for epoch in range(config.epochs):
        pairs = sampler.sample_positions(rng.permutation(seeds), rng)
        parts: List[LossBreakdown] = []
        lr = config.learning_rate
        for start in range(0, seeds, config.batch_size):
            batch = slice(start, start + config.batch_size)
            seed_rows = pairs.seed_rows[batch]
            target_rows = pairs.target_rows[batch]
            y_s, y_t = pairs.y_s[batch], pairs.y_t[batch]
            x_s = embeddings[seed_rows]
            x_t = embeddings[target_rows]

            lr = learning_rate_at(config, step, total_steps)
            x_hat, trace = forward(params, x_s, y_s, y_t, TRAIN, rng)
            breakdown, grad = loss_total(x_hat, x_t, x_s, y_s == y_t, config.loss)
            if not np.isfinite(breakdown.total):
                raise TrainingDivergedError(epoch, step, breakdown.total)
            adamw_step(params, backward(trace, grad, params), state, config, lr)
            parts.append(breakdown)
            step += 1

        snapshot = params.rounded()
        validation = evaluate_params(snapshot, catalog, split, "val", val_pool)
        record = EpochRecord(
            epoch=epoch,
            learning_rate=lr,
            loss=_mean_breakdown(parts),
            val_mood_p1=validation.mood_p1,
            val_genre_p1=validation.genre_p1,
            identity_fraction=float(np.mean(pairs.identity)),
        )
        records.append(record)
        if best is None or record.val_mood_p1 > best.val_mood_p1:
            best, best_params = record, snapshot
        logger.info(f"Epoch {epoch + 1}/{config.epochs}: loss={record.loss.total:.4f} "
                    f"val Mood P@1={record.val_mood_p1:.3f} Genre P@1={record.val_genre_p1:.3f}")

    report = TrainReport(
        epochs=records,
        best_epoch=best.epoch,
        best_val_mood_p1=best.val_mood_p1,
        best_val_genre_p1=best.val_genre_p1,
        checkpoint_path=str(checkpoint_path) if checkpoint_path is not None else None,
        config=config.to_dict(),
        best_params=best_params,
        empty_resamples=sampler.empty_resamples,
    )
    if checkpoint_path is not None:
        save_checkpoint(best_params, checkpoint_path, {
            "hyperparameters": config.to_dict(),
            "best_epoch": best.epoch,
            "best_val_mood_p1": best.val_mood_p1,
            "provenance": dict(provenance or {}),
        })
    return report


def _fold_rows(fold: Union[int, str], reports: Sequence[EvalReport]) -> List[Dict]:
    return [dict(fold=fold, **r.row()) for r in reports]


@dataclass(eq=False)
class KFoldReport:
    """Per-fold train reports and test metrics, plus their per-method mean."""
    fold_reports: List[TrainReport]
    table: pd.DataFrame

    def mean_table(self) -> pd.DataFrame:
        return self.table[self.table["fold"] == "mean"].reset_index(drop=True)

    def to_dict(self) -> Dict:
        return {
            "folds": [r.to_dict() for r in self.fold_reports],
            "table": json.loads(self.table.to_json(orient="records")),
        }

    def save(self, json_path: PathLike, csv_path: Optional[PathLike] = None):
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        if csv_path is not None:
            self.table.to_csv(csv_path, index=False)


def train_kfold(catalog: Catalog, k: int, config: TrainConfig, ratios: Sequence[float] = DEFAULT_RATIOS,
                tolerance: float = DEFAULT_TOLERANCE, index_k: int = DEFAULT_K,
                out_dir: Optional[PathLike] = None, threads: int = 1) -> KFoldReport:
    """
    Train one model per fold and report test metrics per fold and averaged
    over folds, for the model and every baseline.
    """
    if k < 2:
        raise ValidationError(f"k-fold training needs k >= 2, got {k}")
    split_seed, train_seed, oracle_seed = derive_seeds(config.rng_seed, 3)
    folds = kfold_split(catalog, k, split_seed, ratios, tolerance)
    train_seeds = derive_seeds(train_seed, k)
    oracle_rng = np.random.default_rng(oracle_seed)

    fold_reports: List[TrainReport] = []
    rows: List[Dict] = []
    for fold, (split, seed) in enumerate(zip(folds, train_seeds)):
        logger.info(f"Fold {fold + 1}/{k}")
        checkpoint = Path(out_dir) / f"fold{fold}" / "model.mdl" if out_dir is not None else None
        if out_dir is not None:
            split.save(Path(out_dir) / f"fold{fold}" / "splits.json")
        train_map = build_similarity_map(catalog, split, "train", index_k, threads)
        report = train_model(catalog, split, train_map, replace(config, rng_seed=seed), checkpoint, threads,
                             provenance={"fold": fold})
        fold_reports.append(report)

        reports = [evaluate_params(report.best_params, catalog, split, "test"), baseline_random(catalog, split)]
        try:
            reports.append(baseline_avg_mood(catalog, split, threads=threads))
        except ValidationError as e:
            logger.warning(f"Fold {fold}: average-mood baseline skipped: {e}")
        test_map = build_similarity_map(catalog, split, "test", index_k, threads)
        reports.append(baseline_oracle(catalog, test_map, split, "top1", threads=threads))
        reports.append(baseline_oracle(catalog, test_map, split, "top100", oracle_rng, threads=threads))
        rows.extend(_fold_rows(fold, reports))

    table = pd.DataFrame(rows)
    table["inst_j1"] = pd.to_numeric(table["inst_j1"])
    means = (table.groupby("method", sort=False)[["mood_p1", "genre_p1", "inst_j1", "n_queries"]]
             .mean().reset_index())
    means.insert(0, "fold", "mean")
    table = pd.concat([table, means], ignore_index=True)
    return KFoldReport(fold_reports=fold_reports, table=table)


@dataclass(eq=False)
class AblationResult:
    """One row per loss combination, plus the combination chosen on validation."""
    table: pd.DataFrame
    best_combo: Optional[str]

    def pp_view(self) -> pd.DataFrame:
        """Percentage-point differences from the random baseline per combination."""
        return self.table[["combo", "mood_pp_vs_random", "genre_pp_vs_random"]].copy()

    def save(self, csv_path: PathLike, pp_csv_path: Optional[PathLike] = None):
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        self.table.to_csv(csv_path, index=False)
        if pp_csv_path is not None:
            self.pp_view().to_csv(pp_csv_path, index=False)


def run_ablation(catalog: Catalog, splits: Union[SplitAssignment, Sequence[SplitAssignment]],
                 base_config: TrainConfig, index_k: int = DEFAULT_K, out_dir: Optional[PathLike] = None,
                 threads: int = 1, simmaps: Optional[Sequence[SimilarityMap]] = None) -> AblationResult:
    """
    Train and test every non-empty on/off combination of the three losses.

    With several splits (k-fold), each cell's metrics are averaged over folds.
    A failing cell is marked in ``status`` and the grid continues. The best
    combination maximizes the weighted validation score
    (selection_weights[0] * Mood P@1 + selection_weights[1] * Genre P@1).
    """
    splits = [splits] if isinstance(splits, SplitAssignment) else list(splits)
    if simmaps is None:
        simmaps = [build_similarity_map(catalog, s, "train", index_k, threads) for s in splits]
    randoms = [baseline_random(catalog, s) for s in splits]
    random_mood = float(np.mean([r.mood_p1 for r in randoms]))
    random_genre = float(np.mean([r.genre_p1 for r in randoms]))
    w_mood, w_genre = base_config.selection_weights

    rows = []
    for combo, weights in ABLATION_COMBOS:
        config = replace(base_config, loss=base_config.loss.with_weights(*weights))
        try:
            tests, vals = [], []
            for fold, (split, simmap) in enumerate(zip(splits, simmaps)):
                checkpoint = None
                if out_dir is not None:
                    suffix = f"fold{fold}" if len(splits) > 1 else ""
                    checkpoint = Path(out_dir) / "ablation" / combo / suffix / "model.mdl"
                report = train_model(catalog, split, simmap, config, checkpoint, threads,
                                     provenance={"combo": combo, "fold": fold})
                tests.append(evaluate_params(report.best_params, catalog, split, "test"))
                vals.append((report.best_val_mood_p1, report.best_val_genre_p1))
        except MoodshiftError as e:
            logger.error(f"Ablation cell '{combo}' failed: {e}")
            rows.append({"combo": combo, "status": f"failed: {e}"})
            continue

        mood = float(np.mean([t.mood_p1 for t in tests]))
        genre = float(np.mean([t.genre_p1 for t in tests]))
        inst = [t.inst_j1 for t in tests if t.inst_j1 is not None]
        val_mood = float(np.mean([v[0] for v in vals]))
        val_genre = float(np.mean([v[1] for v in vals]))
        rows.append({
            "combo": combo,
            "mood_p1": mood,
            "genre_p1": genre,
            "inst_j1": float(np.mean(inst)) if inst else None,
            "mood_pp_vs_random": (mood - random_mood) * 100.0,
            "genre_pp_vs_random": (genre - random_genre) * 100.0,
            "val_mood_p1": val_mood,
            "val_genre_p1": val_genre,
            "selection_score": w_mood * val_mood + w_genre * val_genre,
            "status": "ok",
        })
        logger.info(f"Ablation '{combo}': Mood P@1={mood:.3f}, Genre P@1={genre:.3f}")

    table = pd.DataFrame(rows, columns=ABLATION_COLUMNS)
    succeeded = table[table["status"] == "ok"]
    best_combo = None
    if not succeeded.empty:
        best_combo = str(succeeded.loc[succeeded["selection_score"].astype(float).idxmax(), "combo"])
    return AblationResult(table=table, best_combo=best_combo)
