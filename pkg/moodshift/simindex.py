#!/usr/bin/env python3
"""
Similarity Index
================

Exact per-seed, per-mood top-K cosine neighbours over one split, and the
training-time sampler that draws proxy targets from them.

Similarity map file (little-endian):
    magic "SIM1" | u32 version | u32 K | u32 m | u64 seed count
    per seed: str id, then per mood: u32 length, (str id, f32 similarity) * length
where ``str`` is a u32 byte length followed by UTF-8 bytes. The split a map
was built over is kept in a JSON sidecar next to it (``simmap_train.json``
for ``simmap_train.sim``).
"""

import io
import json
import logging
import struct
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .catalog import Catalog, SplitAssignment
from .errors import CatalogFormatError, SplitError, ValidationError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Neighbour = Tuple[str, float]

SIMMAP_MAGIC = b"SIM1"
SIMMAP_VERSION = 1
_SIMMAP_HEADER = struct.Struct("<4sIIIQ")
_U32 = struct.Struct("<I")
_F32 = struct.Struct("<f")

DEFAULT_K = 100
DEFAULT_BLOCK_SIZE = 512


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    """
    Cosine of the angle between two nonzero vectors of equal dimension.

    Raises:
        ValidationError: on zero-norm input or dimension mismatch
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"Dimension mismatch: {a.shape} vs {b.shape}")
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0 or norm_b == 0:
        raise ValidationError("Cosine similarity is undefined for a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (norm_a * norm_b), -1.0, 1.0))


class SimilarityMap:
    """Per-seed lists of the K most similar tracks of each mood, built over one split."""

    def __init__(self, k: int, mood_count: int, built_over: Optional[str], lists: Dict[str, List[List[Neighbour]]]):
        self.k = int(k)
        self.mood_count = int(mood_count)
        self.built_over = built_over
        self.lists = lists
        self._tables: "weakref.WeakKeyDictionary[Catalog, Tuple[np.ndarray, np.ndarray, np.ndarray]]" = \
            weakref.WeakKeyDictionary()

    def __len__(self) -> int:
        return len(self.lists)

    def __contains__(self, seed_id: str) -> bool:
        return seed_id in self.lists

    def __getitem__(self, seed_id: str) -> List[List[Neighbour]]:
        return self.lists[seed_id]

    @property
    def seeds(self) -> List[str]:
        return list(self.lists)

    def candidates(self, seed_id: str, mood: int) -> List[Neighbour]:
        return self.lists[seed_id][mood]

    def member_ids(self) -> set:
        return {track_id for per_mood in self.lists.values() for entries in per_mood for track_id, _ in entries}

    def candidate_table(self, catalog: Catalog) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Catalog-row view of the map: seed rows (S,), candidate rows (S, m, K)
        padded with -1, and list lengths (S, m).
        """
        if catalog not in self._tables:
            seeds = self.seeds
            width = max(1, max((len(e) for per_mood in self.lists.values() for e in per_mood), default=0))
            rows = np.full((len(seeds), self.mood_count, width), -1, dtype=np.int64)
            lengths = np.zeros((len(seeds), self.mood_count), dtype=np.int64)
            for s, seed_id in enumerate(seeds):
                for mood, entries in enumerate(self.lists[seed_id]):
                    lengths[s, mood] = len(entries)
                    if entries:
                        rows[s, mood, :len(entries)] = catalog.indices(track_id for track_id, _ in entries)
            self._tables[catalog] = (catalog.indices(seeds), rows, lengths)
        return self._tables[catalog]

    def to_bytes(self) -> bytes:
        buffer = io.BytesIO()
        buffer.write(_SIMMAP_HEADER.pack(SIMMAP_MAGIC, SIMMAP_VERSION, self.k, self.mood_count, len(self.lists)))
        for seed_id, per_mood in self.lists.items():
            _write_str(buffer, seed_id)
            for entries in per_mood:
                buffer.write(_U32.pack(len(entries)))
                for track_id, similarity in entries:
                    _write_str(buffer, track_id)
                    buffer.write(_F32.pack(similarity))
        return buffer.getvalue()


def _write_str(buffer: io.BytesIO, value: str):
    encoded = value.encode("utf-8")
    buffer.write(_U32.pack(len(encoded)))
    buffer.write(encoded)


class _Reader:
    """Cursor over a SIM1 byte payload."""

    def __init__(self, data: bytes, path: str):
        self.data = data
        self.offset = 0
        self.path = path

    def unpack(self, fmt: struct.Struct) -> tuple:
        if self.offset + fmt.size > len(self.data):
            raise CatalogFormatError(f"Truncated similarity map at byte {self.offset}", path=self.path)
        values = fmt.unpack_from(self.data, self.offset)
        self.offset += fmt.size
        return values

    def read_str(self) -> str:
        (length,) = self.unpack(_U32)
        end = self.offset + length
        if end > len(self.data):
            raise CatalogFormatError(f"Truncated similarity map at byte {self.offset}", path=self.path)
        value = self.data[self.offset:end].decode("utf-8")
        self.offset = end
        return value


def simmap_sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def save_similarity_map(simmap: SimilarityMap, path: PathLike):
    """Write the SIM1 file and its ``built_over`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(simmap.to_bytes())
    with open(simmap_sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump({"built_over": simmap.built_over, "k": simmap.k, "mood_count": simmap.mood_count}, f, indent=2)


def load_similarity_map(path: PathLike, built_over: Optional[str] = None) -> SimilarityMap:
    """
    Read a SIM1 file; similarities come back as float32-exact Python floats.

    The split comes from ``built_over`` when given, else from the sidecar. A
    map with neither reports ``built_over=None``.
    """
    path = Path(path)
    reader = _Reader(path.read_bytes(), str(path))
    magic, version, k, mood_count, seed_count = reader.unpack(_SIMMAP_HEADER)
    if magic != SIMMAP_MAGIC:
        raise CatalogFormatError(f"Magic mismatch: expected {SIMMAP_MAGIC!r}, found {magic!r}", path=str(path))
    if version != SIMMAP_VERSION:
        raise CatalogFormatError(f"Version mismatch: expected {SIMMAP_VERSION}, found {version}", path=str(path))
    sidecar = simmap_sidecar_path(path)
    if built_over is None and sidecar.exists():
        with open(sidecar, "r", encoding="utf-8") as f:
            built_over = json.load(f).get("built_over")
    lists: Dict[str, List[List[Neighbour]]] = {}
    for _ in range(seed_count):
        seed_id = reader.read_str()
        per_mood = []
        for _ in range(mood_count):
            (length,) = reader.unpack(_U32)
            entries = []
            for _ in range(length):
                track_id = reader.read_str()
                (similarity,) = reader.unpack(_F32)
                entries.append((track_id, similarity))
            per_mood.append(entries)
        lists[seed_id] = per_mood
    if reader.offset != len(reader.data):
        raise CatalogFormatError(f"{len(reader.data) - reader.offset} trailing bytes in similarity map", path=str(path))
    return SimilarityMap(k, mood_count, built_over, lists)


def top_k_positions(similarities: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k largest finite values, descending, ties by ascending position."""
    finite = np.isfinite(similarities)
    count = min(k, int(finite.sum()))
    if count == 0:
        return np.empty(0, dtype=np.int64)
    if count < similarities.size:
        partition = np.argpartition(-similarities, count - 1)[:count]
        threshold = similarities[partition].min()
        candidates = np.flatnonzero(similarities >= threshold)
    else:
        candidates = np.flatnonzero(finite)
    ordered = candidates[np.lexsort((candidates, -similarities[candidates]))]
    return ordered[:count]


def build_similarity_map(catalog: Catalog, split: SplitAssignment, which_split: str = "train",
                         k: int = DEFAULT_K, threads: int = 1,
                         block_size: int = DEFAULT_BLOCK_SIZE) -> SimilarityMap:
    """
    Exact brute-force top-K cosine neighbours per (seed, mood) within one split.

    Seeds never appear in their own lists. Lists are sorted by similarity
    descending with ties broken by ascending track id.

    Raises:
        SplitError: if the chosen split is empty
    """
    if k < 1:
        raise ValidationError(f"K must be at least 1, got {k}")
    rows = split.indices(catalog, which_split)
    if rows.size == 0:
        raise SplitError(f"Split '{which_split}' is empty")

    ids = catalog.ids
    rows = rows[np.argsort(np.array([ids[r] for r in rows]), kind="stable")]
    unit = catalog.unit_embeddings()[rows]
    moods = catalog.moods[rows]
    columns = [np.flatnonzero(moods == mood) for mood in range(catalog.mood_count)]
    for mood, cols in enumerate(columns):
        if cols.size == 0:
            logger.warning(f"Split '{which_split}' has no tracks of mood {mood}; its lists will be empty")

    lists: List[Optional[List[List[Neighbour]]]] = [None] * rows.size

    def build_block(start: int):
        stop = min(start + block_size, rows.size)
        block = unit[start:stop]
        per_seed: List[List[List[Neighbour]]] = [[[] for _ in columns] for _ in range(stop - start)]
        for mood, cols in enumerate(columns):
            if cols.size == 0:
                continue
            similarities = np.clip(block @ unit[cols].T, -1.0, 1.0)
            own = np.flatnonzero(moods[start:stop] == mood)
            if own.size:
                similarities[own, np.searchsorted(cols, start + own)] = -np.inf
            for i in range(stop - start):
                top = top_k_positions(similarities[i], k)
                per_seed[i][mood] = [(ids[rows[cols[j]]], float(similarities[i, j])) for j in top]
        lists[start:stop] = per_seed

    starts = range(0, rows.size, block_size)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(build_block, starts))
    else:
        for start in starts:
            build_block(start)

    simmap = SimilarityMap(k, catalog.mood_count, which_split, {ids[r]: lists[i] for i, r in enumerate(rows)})
    logger.info(f"Built similarity map over '{which_split}': {len(simmap)} seeds, K={k}")
    return simmap


@dataclass(eq=False)
class TrainingPair:
    """One seed/target pair; identity pairs reuse the seed as target."""
    seed_id: str
    target_id: str
    x_s: np.ndarray
    y_s: int
    y_t: int
    x_t: np.ndarray

    @property
    def is_identity(self) -> bool:
        return self.y_s == self.y_t


@dataclass(eq=False)
class PairBatch:
    """Row-aligned arrays for a batch of sampled pairs."""
    seed_rows: np.ndarray
    target_rows: np.ndarray
    y_s: np.ndarray
    y_t: np.ndarray

    @property
    def identity(self) -> np.ndarray:
        return self.y_s == self.y_t

    def __len__(self) -> int:
        return self.seed_rows.size


class PairSampler:
    """
    Draws a uniform target mood per seed (own mood included), then a uniform
    proxy target from that mood's list; identity pairs use the seed itself.
    """

    def __init__(self, simmap: SimilarityMap, catalog: Catalog):
        if simmap.mood_count != catalog.mood_count:
            raise ValidationError(f"Similarity map has m={simmap.mood_count}, catalog has m={catalog.mood_count}")
        self.simmap = simmap
        self.catalog = catalog
        self.seed_rows, self._candidate_rows, self._lengths = simmap.candidate_table(catalog)
        self._position = {seed_id: i for i, seed_id in enumerate(simmap.seeds)}
        self.empty_resamples = 0

    def positions(self, seed_ids: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self._position[s] for s in seed_ids], dtype=np.int64)
        except KeyError as e:
            raise ValidationError(f"Seed {e.args[0]!r} is not in the similarity map")

    def sample_positions(self, positions: np.ndarray, rng: np.random.Generator,
                         target_moods: Optional[Union[int, np.ndarray]] = None) -> PairBatch:
        positions = np.asarray(positions, dtype=np.int64)
        n = positions.size
        m = self.catalog.mood_count
        seed_rows = self.seed_rows[positions]
        y_s = self.catalog.moods[seed_rows]
        if target_moods is None:
            y_t = rng.integers(m, size=n)
        else:
            y_t = np.broadcast_to(np.asarray(target_moods, dtype=np.int64), (n,)).copy()
            if ((y_t < 0) | (y_t >= m)).any():
                raise ValidationError(f"Target mood out of range [0, {m})")

        empty = np.flatnonzero((y_t != y_s) & (self._lengths[positions, y_t] == 0))
        for i in empty:
            options = [
                mood for mood in range(m)
                if mood != y_t[i] and (mood == y_s[i] or self._lengths[positions[i], mood] > 0)
            ]
            y_t[i] = options[rng.integers(len(options))]
        if empty.size:
            self.empty_resamples += int(empty.size)
            logger.warning(f"Resampled target mood for {empty.size} seeds with empty candidate lists "
                           f"(total {self.empty_resamples})")

        lengths = self._lengths[positions, y_t]
        picks = np.minimum((rng.random(n) * lengths).astype(np.int64), np.maximum(lengths - 1, 0))
        targets = self._candidate_rows[positions, y_t, picks]
        target_rows = np.where(y_t == y_s, seed_rows, targets)
        return PairBatch(seed_rows=seed_rows, target_rows=target_rows, y_s=y_s, y_t=y_t)

    def sample(self, seed_id: str, rng: np.random.Generator, target_mood: Optional[int] = None) -> TrainingPair:
        batch = self.sample_positions(self.positions([seed_id]), rng, target_mood)
        seed_row, target_row = int(batch.seed_rows[0]), int(batch.target_rows[0])
        return TrainingPair(
            seed_id=self.catalog.ids[seed_row],
            target_id=self.catalog.ids[target_row],
            x_s=self.catalog.embeddings[seed_row],
            y_s=int(batch.y_s[0]),
            y_t=int(batch.y_t[0]),
            x_t=self.catalog.embeddings[target_row],
        )


def sample_pair(simmap: SimilarityMap, catalog: Catalog, seed_id: str, rng: np.random.Generator,
                target_mood: Optional[int] = None, sampler: Optional[PairSampler] = None) -> TrainingPair:
    """Draw one training pair for ``seed_id``; pass ``sampler`` to reuse tables and counters."""
    if seed_id not in simmap:
        raise ValidationError(f"Seed '{seed_id}' is not in the similarity map")
    sampler = sampler or PairSampler(simmap, catalog)
    return sampler.sample(seed_id, rng, target_mood)
