#!/usr/bin/env python3
"""
Retrieval Evaluation
====================

Nearest-neighbour evaluation of transformed embeddings and the training-free
baselines.

For every seed of the evaluated split and every target mood other than the
seed's own, a query vector is retrieved against the split (seed excluded):
    Mood P@1   - neighbour mood equals the target mood
    Genre P@1  - neighbour genre equals the seed genre
    Inst. J@1  - Jaccard of neighbour and seed instrument sets (J(empty, empty) = 1)
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .catalog import Catalog, SplitAssignment, Track
from .errors import DimensionMismatchError, ValidationError
from .model import ModelParams, MoodTransformer, load_checkpoint
from .simindex import SimilarityMap, top_k_positions

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

METHOD_MODEL = "model"
METHOD_RANDOM = "random"
METHOD_AVG_MOOD = "avg-mood"
METHOD_ORACLE_TOP1 = "oracle-top1"
METHOD_ORACLE_TOP100 = "oracle-top100"
METHODS = (METHOD_MODEL, METHOD_RANDOM, METHOD_AVG_MOOD, METHOD_ORACLE_TOP1, METHOD_ORACLE_TOP100)

ORACLE_MODES = {"top1": METHOD_ORACLE_TOP1, "top100": METHOD_ORACLE_TOP100}

_QUERY_BLOCK = 1024


@dataclass(eq=False)
class EvalQuery:
    """One retrieval query: a seed, its target mood and the vector to retrieve with."""
    seed_id: str
    y_t: int
    query_vector: np.ndarray
    seed_genre: int
    seed_instruments: FrozenSet[int]


@dataclass
class EvalReport:
    """Metrics of one method; metrics are means over queries."""
    method: str
    mood_p1: float
    genre_p1: float
    inst_j1: Optional[float]
    n_queries: int
    confusion: np.ndarray
    skipped: int = 0
    extras: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        """Convert to JSON-serializable dictionary."""
        return {
            "method": self.method,
            "mood_p1": self.mood_p1,
            "genre_p1": self.genre_p1,
            "inst_j1": self.inst_j1,
            "n_queries": self.n_queries,
            "skipped": self.skipped,
            "confusion": self.confusion.tolist(),
            "extras": dict(self.extras),
        }

    @classmethod
    def from_dict(cls, values: Dict) -> "EvalReport":
        return cls(
            method=values["method"],
            mood_p1=values["mood_p1"],
            genre_p1=values["genre_p1"],
            inst_j1=values.get("inst_j1"),
            n_queries=values["n_queries"],
            confusion=np.asarray(values["confusion"], dtype=np.float64),
            skipped=values.get("skipped", 0),
            extras=values.get("extras", {}),
        )

    def row(self) -> Dict:
        return {
            "method": self.method,
            "mood_p1": self.mood_p1,
            "genre_p1": self.genre_p1,
            "inst_j1": self.inst_j1,
            "n_queries": self.n_queries,
        }

    def confusion_frame(self) -> pd.DataFrame:
        """Target mood (rows) against retrieved mood (columns)."""
        m = self.confusion.shape[0]
        return pd.DataFrame(
            self.confusion,
            index=pd.Index([f"target_{i}" for i in range(m)], name="target_mood"),
            columns=[f"retrieved_{i}" for i in range(m)],
        )

    def save(self, json_path: PathLike, confusion_csv: Optional[PathLike] = None):
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        if confusion_csv is not None:
            self.confusion_frame().to_csv(confusion_csv)


def jaccard(a: Iterable[int], b: Iterable[int]) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def _unit_queries(queries: np.ndarray) -> np.ndarray:
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    bad = np.flatnonzero(~np.isfinite(queries).all(axis=1))
    if bad.size:
        raise ValidationError(f"Non-finite query vector at index {int(bad[0])}")
    norms = np.linalg.norm(queries, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValidationError(f"Zero-norm query vector at index {int(zero[0])}")
    return queries / norms[:, None]


class RetrievalPool:
    """Exact cosine retrieval over a subset of catalog rows, ties to the lowest id."""

    def __init__(self, catalog: Catalog, rows: Optional[np.ndarray] = None, threads: int = 1):
        rows = np.arange(len(catalog)) if rows is None else np.asarray(rows, dtype=np.int64)
        if rows.size == 0:
            raise ValidationError("Retrieval pool is empty")
        ids = catalog.ids
        self.catalog = catalog
        self.rows = rows[np.argsort(np.array([ids[r] for r in rows]), kind="stable")]
        self.unit = catalog.unit_embeddings()[self.rows]
        self.threads = threads
        self._position = np.full(len(catalog), -1, dtype=np.int64)
        self._position[self.rows] = np.arange(self.rows.size)

    def __len__(self) -> int:
        return self.rows.size

    def nearest(self, queries: np.ndarray, exclude_rows: Optional[np.ndarray] = None) -> np.ndarray:
        """Catalog row of the nearest pool member for each query, skipping ``exclude_rows[i]``."""
        unit_queries = _unit_queries(queries)
        if unit_queries.shape[1] != self.unit.shape[1]:
            raise DimensionMismatchError(
                f"Query dimension {unit_queries.shape[1]} does not match catalog dimension {self.unit.shape[1]}"
            )
        excluded = None
        if exclude_rows is not None:
            excluded = self._position[np.asarray(exclude_rows, dtype=np.int64)]
        result = np.empty(unit_queries.shape[0], dtype=np.int64)

        def search(start: int):
            stop = min(start + _QUERY_BLOCK, unit_queries.shape[0])
            similarities = unit_queries[start:stop] @ self.unit.T
            if excluded is not None:
                local = np.flatnonzero(excluded[start:stop] >= 0)
                similarities[local, excluded[start:stop][local]] = -np.inf
            if np.isneginf(similarities).all(axis=1).any():
                raise ValidationError("Retrieval pool is empty after exclusions")
            result[start:stop] = self.rows[np.argmax(similarities, axis=1)]

        starts = range(0, unit_queries.shape[0], _QUERY_BLOCK)
        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                list(pool.map(search, starts))
        else:
            for start in starts:
                search(start)
        return result

    def top_k(self, queries: np.ndarray, k: int) -> List[List[Tuple[int, float]]]:
        """The ``k`` most similar pool rows per query as (catalog row, cosine), descending."""
        if k < 1:
            raise ValidationError(f"k must be >= 1, got {k}")
        unit_queries = _unit_queries(queries)
        if unit_queries.shape[1] != self.unit.shape[1]:
            raise DimensionMismatchError(
                f"Query dimension {unit_queries.shape[1]} does not match catalog dimension {self.unit.shape[1]}"
            )
        ranked = []
        for similarities in unit_queries @ self.unit.T:
            top = top_k_positions(similarities, k)
            ranked.append([(int(self.rows[p]), float(np.clip(similarities[p], -1.0, 1.0))) for p in top])
        return ranked


def nearest_neighbor(query: np.ndarray, catalog: Catalog, pool_ids: Optional[Sequence[str]] = None,
                     exclude: Iterable[str] = ()) -> Track:
    """
    Nearest pool member by cosine similarity; ties go to the lowest id.

    Raises:
        ValidationError: if the pool is empty after exclusions
    """
    excluded = set(exclude)
    candidates = catalog.ids if pool_ids is None else list(pool_ids)
    rows = catalog.indices(t for t in candidates if t not in excluded)
    if rows.size == 0:
        raise ValidationError("Retrieval pool is empty after exclusions")
    pool = RetrievalPool(catalog, rows)
    return catalog.tracks[int(pool.nearest(query)[0])]


def enumerate_queries(catalog: Catalog, split: SplitAssignment, which: str = "test") -> Tuple[np.ndarray, np.ndarray]:
    """Every (seed, target mood != seed mood) pair of a split, seeds by ascending id."""
    seed_ids = sorted(split.ids(which))
    rows = catalog.indices(seed_ids)
    m = catalog.mood_count
    seed_rows = np.repeat(rows, m - 1)
    targets = np.array([t for r in rows for t in range(m) if t != catalog.moods[r]], dtype=np.int64)
    return seed_rows, targets


def evaluate_queries(method: str, catalog: Catalog, pool: RetrievalPool, seed_rows: np.ndarray,
                     target_moods: np.ndarray, queries: np.ndarray, skipped: int = 0) -> EvalReport:
    """Retrieve each query's neighbour (its seed excluded) and score it."""
    m = catalog.mood_count
    confusion = np.zeros((m, m), dtype=np.float64)
    if seed_rows.size == 0:
        return EvalReport(method, float("nan"), float("nan"), None, 0, confusion, skipped)

    retrieved = pool.nearest(queries, exclude_rows=seed_rows)
    retrieved_moods = catalog.moods[retrieved]
    mood_p1 = float(np.mean(retrieved_moods == target_moods))
    genre_p1 = float(np.mean(catalog.genres[retrieved] == catalog.genres[seed_rows]))
    inst_j1 = None
    if catalog.instrument_count > 0:
        sets = catalog.instrument_sets
        inst_j1 = float(np.mean([jaccard(sets[r], sets[s]) for r, s in zip(retrieved, seed_rows)]))
    np.add.at(confusion, (target_moods, retrieved_moods), 1.0)
    return EvalReport(method, mood_p1, genre_p1, inst_j1, int(seed_rows.size), confusion, skipped)


def evaluate_params(params: ModelParams, catalog: Catalog, split: SplitAssignment, which: str = "test",
                    pool: Optional[RetrievalPool] = None, method: str = METHOD_MODEL) -> EvalReport:
    """Transform every (seed, target) query with the model in eval mode and score it."""
    if params.d != catalog.dim:
        raise DimensionMismatchError(f"Model dimension {params.d} does not match catalog dimension {catalog.dim}")
    if params.m != catalog.mood_count:
        raise DimensionMismatchError(f"Model mood count {params.m} does not match catalog mood count {catalog.mood_count}")
    pool = pool or RetrievalPool(catalog, split.indices(catalog, which))
    seed_rows, targets = enumerate_queries(catalog, split, which)
    transformer = MoodTransformer(params)
    queries = transformer.transform(catalog.embeddings[seed_rows], catalog.moods[seed_rows], targets)
    return evaluate_queries(method, catalog, pool, seed_rows, targets, queries)


def evaluate_model(checkpoint: Union[PathLike, ModelParams, MoodTransformer], catalog: Catalog,
                   split: SplitAssignment, which: str = "test", threads: int = 1) -> EvalReport:
    """Evaluate a checkpoint (path, parameters or transformer) on one split."""
    if isinstance(checkpoint, MoodTransformer):
        params = checkpoint.params
    elif isinstance(checkpoint, ModelParams):
        params = checkpoint
    else:
        params, _ = load_checkpoint(checkpoint)
    pool = RetrievalPool(catalog, split.indices(catalog, which), threads=threads)
    report = evaluate_params(params, catalog, split, which, pool)
    logger.info(f"Model on '{which}': Mood P@1={report.mood_p1:.3f}, Genre P@1={report.genre_p1:.3f}")
    return report


def expected_jaccard_bernoulli(n_classes: int, mean_labels: float) -> float:
    """
    Expected Jaccard of two independent label sets where each of ``n_classes``
    labels is present with probability mean_labels / n_classes.

    Each class is in both sets, exactly one, or neither; summing the
    multinomial over (both, one) counts gives the exact expectation.
    """
    if n_classes <= 0:
        raise ValidationError(f"Need at least one class, got {n_classes}")
    p = mean_labels / n_classes
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"Mean label count {mean_labels} exceeds {n_classes} classes")
    if p in (0.0, 1.0):
        return 1.0
    log_both = 2 * math.log(p)
    log_one = math.log(2 * p * (1 - p))
    log_neither = 2 * math.log(1 - p)
    log_n_fact = math.lgamma(n_classes + 1)
    expected = 0.0
    for both in range(n_classes + 1):
        for one in range(n_classes - both + 1):
            neither = n_classes - both - one
            log_pmf = (log_n_fact - math.lgamma(both + 1) - math.lgamma(one + 1) - math.lgamma(neither + 1)
                       + both * log_both + one * log_one + neither * log_neither)
            score = 1.0 if both + one == 0 else both / (both + one)
            expected += math.exp(log_pmf) * score
    return expected


def baseline_random(catalog: Catalog, split: Optional[SplitAssignment] = None, which: str = "test") -> EvalReport:
    """
    Analytic chance levels: Mood P@1 = 1/m, Genre P@1 = 1/|G| (the empirical
    collision probability sum p_g^2 is reported in ``extras``), Inst. J@1 in
    expectation under an independent-Bernoulli label model.
    """
    m = catalog.mood_count
    rows = np.arange(len(catalog)) if split is None else split.indices(catalog, which)
    genre_freq = np.bincount(catalog.genres[rows], minlength=catalog.genre_count) / max(rows.size, 1)

    inst_j1 = None
    mean_labels = 0.0
    if catalog.instrument_count > 0:
        mean_labels = float(np.mean([len(catalog.instrument_sets[r]) for r in rows]))
        inst_j1 = expected_jaccard_bernoulli(catalog.instrument_count, mean_labels)

    n_queries = 0
    confusion = np.zeros((m, m), dtype=np.float64)
    if split is not None:
        _, targets = enumerate_queries(catalog, split, which)
        n_queries = int(targets.size)
        per_target = np.bincount(targets, minlength=m).astype(np.float64)
        confusion = np.repeat(per_target[:, None] / m, m, axis=1)

    return EvalReport(
        method=METHOD_RANDOM,
        mood_p1=1.0 / m,
        genre_p1=1.0 / catalog.genre_count,
        inst_j1=inst_j1,
        n_queries=n_queries,
        confusion=confusion,
        extras={
            "genre_p1_uniform": 1.0 / catalog.genre_count,
            "genre_p1_empirical": float(np.sum(genre_freq ** 2)),
            "mean_instrument_labels": mean_labels,
        },
    )


def mood_centroids(catalog: Catalog, rows: np.ndarray) -> np.ndarray:
    """Mean raw embedding per mood over ``rows``."""
    centroids = np.empty((catalog.mood_count, catalog.dim), dtype=np.float64)
    moods = catalog.moods[rows]
    for mood in range(catalog.mood_count):
        members = rows[moods == mood]
        if members.size == 0:
            raise ValidationError(f"Mood {mood} is missing from the evaluated split")
        centroids[mood] = catalog.embeddings[members].astype(np.float64).mean(axis=0)
    return centroids


def baseline_avg_mood(catalog: Catalog, split: SplitAssignment, which: str = "test",
                      threads: int = 1) -> EvalReport:
    """Use the split's target-mood centroid as the query for every seed."""
    rows = split.indices(catalog, which)
    centroids = mood_centroids(catalog, rows)
    pool = RetrievalPool(catalog, rows, threads=threads)
    seed_rows, targets = enumerate_queries(catalog, split, which)
    return evaluate_queries(METHOD_AVG_MOOD, catalog, pool, seed_rows, targets, centroids[targets])


def baseline_oracle(catalog: Catalog, simmap: SimilarityMap, split: SplitAssignment, mode: str = "top1",
                    rng: Optional[np.random.Generator] = None, which: str = "test", threads: int = 1) -> EvalReport:
    """
    Query with the proxy target's own embedding: the head of the seed's
    target-mood list (top1) or a uniform draw from it (top100).
    """
    if mode not in ORACLE_MODES:
        raise ValidationError(f"Unknown oracle mode '{mode}', expected one of {sorted(ORACLE_MODES)}")
    if simmap.built_over != which:
        raise ValidationError(f"Oracle needs a similarity map built over '{which}', got '{simmap.built_over}'")
    if mode == "top100" and rng is None:
        raise ValidationError("Oracle top100 mode requires an rng")

    seed_rows, targets = enumerate_queries(catalog, split, which)
    keep = np.zeros(seed_rows.size, dtype=bool)
    target_rows = np.zeros(seed_rows.size, dtype=np.int64)
    for i, (seed_row, mood) in enumerate(zip(seed_rows, targets)):
        entries = simmap[catalog.ids[seed_row]][mood]
        if not entries:
            continue
        pick = 0 if mode == "top1" else int(rng.integers(len(entries)))
        target_rows[i] = catalog.index_of(entries[pick][0])
        keep[i] = True

    skipped = int((~keep).sum())
    if skipped:
        logger.warning(f"Oracle {mode}: skipped {skipped} queries with empty candidate lists")
    pool = RetrievalPool(catalog, split.indices(catalog, which), threads=threads)
    return evaluate_queries(
        ORACLE_MODES[mode], catalog, pool, seed_rows[keep], targets[keep],
        catalog.embeddings[target_rows[keep]], skipped=skipped,
    )


def compare_reports(reports: Sequence[EvalReport]) -> pd.DataFrame:
    """One row per method, in the given order."""
    return pd.DataFrame([r.row() for r in reports], columns=["method", "mood_p1", "genre_p1", "inst_j1", "n_queries"])


def pp_vs_random(frame: pd.DataFrame, random_report: EvalReport) -> pd.DataFrame:
    """Add percentage-point differences from the random baseline."""
    frame = frame.copy()
    frame["mood_pp_vs_random"] = (frame["mood_p1"] - random_report.mood_p1) * 100.0
    frame["genre_pp_vs_random"] = (frame["genre_p1"] - random_report.genre_p1) * 100.0
    return frame
