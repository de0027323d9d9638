#!/usr/bin/env python3
"""
Track Catalog
=============

Typed track records, the binary embedding store, JSONL metadata, multi-label
reduction and artist-disjoint, mood-stratified splitting.

Binary embedding file (little-endian):
    magic "EMB1" | u32 version=1 | u64 rows N | u32 dim d | N*d float32 row-major

Metadata file: one JSON object per line with ``id``, ``artist``, ``mood``,
``genre`` and ``instruments``; line i describes embedding row i.
"""

import json
import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .errors import CatalogFormatError, SplitError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

EMBEDDING_MAGIC = b"EMB1"
EMBEDDING_VERSION = 1
_EMBEDDING_HEADER = struct.Struct("<4sIQI")

DEFAULT_MOOD_COUNT = 4
SPLIT_NAMES = ("train", "val", "test")
DEFAULT_RATIOS = (0.8, 0.1, 0.1)
DEFAULT_TOLERANCE = 0.05


def derive_seeds(rng_seed: int, count: int) -> List[int]:
    """Derive ``count`` independent integer seeds from one master seed."""
    children = np.random.SeedSequence(rng_seed).spawn(count)
    return [int(child.generate_state(1)[0]) for child in children]


@dataclass(frozen=True)
class MoodLabel:
    """One mood out of ``count`` possible moods."""
    index: int
    count: int = DEFAULT_MOOD_COUNT

    def __post_init__(self):
        if self.count < 2:
            raise ValueError(f"Mood count must be at least 2, got {self.count}")
        if not 0 <= self.index < self.count:
            raise ValueError(f"Mood index {self.index} out of range [0, {self.count})")

    def one_hot(self) -> np.ndarray:
        """One-hot vector with a single 1 at ``index``."""
        return one_hot([self.index], self.count)[0]


def one_hot(indices: Sequence[int], count: int) -> np.ndarray:
    """Encode a batch of mood indices as float64 one-hot rows."""
    indices = np.asarray(indices, dtype=np.int64)
    encoded = np.zeros((indices.shape[0], count), dtype=np.float64)
    encoded[np.arange(indices.shape[0]), indices] = 1.0
    return encoded


@dataclass(frozen=True, eq=False)
class Track:
    """One catalog entry."""
    id: str
    artist_id: str
    embedding: np.ndarray
    mood: int
    genre: int
    instruments: FrozenSet[int] = frozenset()

    def mood_label(self, count: int = DEFAULT_MOOD_COUNT) -> MoodLabel:
        return MoodLabel(self.mood, count)

    def to_metadata(self) -> Dict:
        """Convert to the JSON object stored on one metadata line."""
        return {
            "id": self.id,
            "artist": self.artist_id,
            "mood": self.mood,
            "genre": self.genre,
            "instruments": sorted(self.instruments),
        }


class Catalog:
    """
    Immutable, validated collection of tracks sharing one embedding dimension.

    Row-aligned arrays (``embeddings``, ``moods``, ``genres``) are built once so
    downstream stages work on index arrays instead of track objects.
    """

    def __init__(self, tracks: Iterable[Track], mood_count: int = DEFAULT_MOOD_COUNT,
                 genre_count: Optional[int] = None, instrument_count: Optional[int] = None):
        self._tracks: Tuple[Track, ...] = tuple(tracks)
        if not self._tracks:
            raise CatalogFormatError("Catalog has no tracks")
        if mood_count < 2:
            raise CatalogFormatError(f"Mood count must be at least 2, got {mood_count}")

        self.dim = int(np.asarray(self._tracks[0].embedding).shape[-1])
        self.mood_count = int(mood_count)

        self._index: Dict[str, int] = {}
        for row, track in enumerate(self._tracks):
            if track.id in self._index:
                raise CatalogFormatError(f"Duplicate track id '{track.id}' at row {row}", row=row)
            self._index[track.id] = row

        for row, track in enumerate(self._tracks):
            if np.asarray(track.embedding).shape != (self.dim,):
                raise CatalogFormatError(f"Dimension mismatch at row {row}: expected {self.dim}", row=row)
        self.embeddings = np.stack([np.asarray(t.embedding) for t in self._tracks]).astype(np.float32, copy=False)
        _check_rows(self.embeddings)

        self.ids: List[str] = [t.id for t in self._tracks]
        self.artists: List[str] = [t.artist_id for t in self._tracks]
        self.moods = np.array([t.mood for t in self._tracks], dtype=np.int64)
        self.genres = np.array([t.genre for t in self._tracks], dtype=np.int64)
        self.instrument_sets: List[FrozenSet[int]] = [frozenset(t.instruments) for t in self._tracks]

        bad_mood = np.flatnonzero((self.moods < 0) | (self.moods >= self.mood_count))
        if bad_mood.size:
            row = int(bad_mood[0])
            raise CatalogFormatError(f"Mood out of range at row {row}", row=row)

        max_genre = int(self.genres.max())
        self.genre_count = int(genre_count) if genre_count is not None else max_genre + 1
        if int(self.genres.min()) < 0 or max_genre >= self.genre_count:
            raise CatalogFormatError(f"Genre ids must lie in [0, {self.genre_count})")

        max_instrument = max((max(s) for s in self.instrument_sets if s), default=-1)
        self.instrument_count = int(instrument_count) if instrument_count is not None else max_instrument + 1
        if max_instrument >= self.instrument_count or any(min(s) < 0 for s in self.instrument_sets if s):
            raise CatalogFormatError(f"Instrument ids must lie in [0, {self.instrument_count})")

        self._unit: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self._tracks)

    def __iter__(self) -> Iterator[Track]:
        return iter(self._tracks)

    def __contains__(self, track_id: str) -> bool:
        return track_id in self._index

    def __getitem__(self, track_id: str) -> Track:
        return self._tracks[self._index[track_id]]

    @property
    def tracks(self) -> Tuple[Track, ...]:
        return self._tracks

    def index_of(self, track_id: str) -> int:
        return self._index[track_id]

    def indices(self, track_ids: Iterable[str]) -> np.ndarray:
        """Row indices for ``track_ids`` in the given order."""
        return np.array([self._index[t] for t in track_ids], dtype=np.int64)

    def unit_embeddings(self) -> np.ndarray:
        """Row-normalized float64 embeddings, computed once."""
        if self._unit is None:
            raw = self.embeddings.astype(np.float64)
            self._unit = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        return self._unit

    def with_embeddings(self, embeddings: np.ndarray) -> "Catalog":
        """Copy of this catalog with every embedding replaced row by row."""
        tracks = [
            Track(t.id, t.artist_id, np.asarray(embeddings[i], dtype=np.float32), t.mood, t.genre, t.instruments)
            for i, t in enumerate(self._tracks)
        ]
        return Catalog(tracks, self.mood_count, self.genre_count, self.instrument_count)

    def label_counts(self) -> Dict[str, int]:
        return {
            "mood_count": self.mood_count,
            "genre_count": self.genre_count,
            "instrument_count": self.instrument_count,
        }


def _check_rows(embeddings: np.ndarray, path: Optional[str] = None):
    """Reject non-finite or zero-norm embedding rows, naming the first bad row."""
    finite = np.isfinite(embeddings).all(axis=1)
    if not finite.all():
        row = int(np.flatnonzero(~finite)[0])
        raise CatalogFormatError(f"Non-finite embedding at row {row}", path=path, row=row)
    norms = np.linalg.norm(embeddings.astype(np.float64), axis=1)
    if (norms == 0).any():
        row = int(np.flatnonzero(norms == 0)[0])
        raise CatalogFormatError(f"Zero-norm embedding at row {row}", path=path, row=row)


def read_embeddings(path: PathLike) -> np.ndarray:
    """Read an EMB1 file into an (N, d) float32 array."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _EMBEDDING_HEADER.size:
        raise CatalogFormatError("Truncated header", path=str(path))

    magic, version, rows, dim = _EMBEDDING_HEADER.unpack_from(data, 0)
    if magic != EMBEDDING_MAGIC:
        raise CatalogFormatError(f"Magic mismatch: expected {EMBEDDING_MAGIC!r}, found {magic!r}", path=str(path))
    if version != EMBEDDING_VERSION:
        raise CatalogFormatError(f"Version mismatch: expected {EMBEDDING_VERSION}, found {version}", path=str(path))
    if dim == 0:
        raise CatalogFormatError("Dimension mismatch: header declares d=0", path=str(path))

    payload = memoryview(data)[_EMBEDDING_HEADER.size:]
    row_bytes = dim * 4
    expected = rows * row_bytes
    if len(payload) < expected:
        row = len(payload) // row_bytes
        raise CatalogFormatError(f"Truncated payload at row {row}", path=str(path), row=row)
    if len(payload) > expected:
        raise CatalogFormatError(
            f"Dimension mismatch: {len(payload) - expected} trailing bytes after row {rows - 1}", path=str(path)
        )

    embeddings = np.frombuffer(payload, dtype="<f4", count=rows * dim).reshape(rows, dim).astype(np.float32)
    _check_rows(embeddings, path=str(path))
    return embeddings


def write_embeddings(path: PathLike, embeddings: np.ndarray):
    """Write an (N, d) array as an EMB1 file."""
    embeddings = np.ascontiguousarray(embeddings, dtype="<f4")
    if embeddings.ndim != 2:
        raise CatalogFormatError(f"Expected a 2-D embedding array, got shape {embeddings.shape}")
    rows, dim = embeddings.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_EMBEDDING_HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, rows, dim))
        f.write(embeddings.tobytes(order="C"))


def labels_sidecar_path(metadata_path: PathLike) -> Path:
    return Path(metadata_path).with_suffix(".labels.json")


def _read_jsonl(path: Path) -> List[Dict]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise CatalogFormatError(f"Malformed JSON on line {lineno}: {e.msg}", path=str(path), row=lineno)
    return records


def _validated_track(record: Dict, embedding: np.ndarray, lineno: int, mood_count: int, path: str) -> Track:
    for key, kind in (("id", str), ("artist", str), ("mood", int), ("genre", int)):
        value = record.get(key)
        if not isinstance(value, kind) or isinstance(value, bool):
            raise CatalogFormatError(f"Missing or invalid '{key}', line {lineno}", path=path, row=lineno)
    instruments = record.get("instruments", [])
    if not isinstance(instruments, list) or not all(isinstance(i, int) and i >= 0 for i in instruments):
        raise CatalogFormatError(f"Invalid 'instruments', line {lineno}", path=path, row=lineno)
    if not 0 <= record["mood"] < mood_count:
        raise CatalogFormatError(f"Mood out of range, line {lineno}", path=path, row=lineno)
    if record["genre"] < 0:
        raise CatalogFormatError(f"Genre out of range, line {lineno}", path=path, row=lineno)
    return Track(
        id=record["id"],
        artist_id=record["artist"],
        embedding=embedding,
        mood=record["mood"],
        genre=record["genre"],
        instruments=frozenset(instruments),
    )


def load_catalog(embeddings_path: PathLike, metadata_path: PathLike, mood_count: Optional[int] = None,
                 genre_count: Optional[int] = None, instrument_count: Optional[int] = None) -> Catalog:
    """
    Load and validate a catalog from an embedding file and its metadata.

    Label counts come from the arguments, then from the ``.labels.json``
    sidecar next to the metadata, then from the data itself.

    Raises:
        CatalogFormatError: on format, dimension, range or uniqueness violations
    """
    metadata_path = Path(metadata_path)
    embeddings = read_embeddings(embeddings_path)
    records = _read_jsonl(metadata_path)
    if len(records) != embeddings.shape[0]:
        raise CatalogFormatError(
            f"Metadata has {len(records)} lines but embeddings have {embeddings.shape[0]} rows",
            path=str(metadata_path),
        )

    sidecar = labels_sidecar_path(metadata_path)
    counts: Dict[str, int] = {}
    if sidecar.exists():
        with open(sidecar, "r", encoding="utf-8") as f:
            counts = json.load(f)
    mood_count = mood_count or counts.get("mood_count") or DEFAULT_MOOD_COUNT
    genre_count = genre_count if genre_count is not None else counts.get("genre_count")
    instrument_count = instrument_count if instrument_count is not None else counts.get("instrument_count")

    seen: Set[str] = set()
    tracks = []
    for lineno, (record, embedding) in enumerate(zip(records, embeddings), 1):
        track = _validated_track(record, embedding, lineno, mood_count, str(metadata_path))
        if track.id in seen:
            raise CatalogFormatError(f"Duplicate id '{track.id}', line {lineno}", path=str(metadata_path), row=lineno)
        seen.add(track.id)
        tracks.append(track)

    catalog = Catalog(tracks, mood_count, genre_count, instrument_count)
    logger.info(f"Loaded catalog: {len(catalog)} tracks, d={catalog.dim}, m={catalog.mood_count}")
    return catalog


def save_catalog(catalog: Catalog, embeddings_path: PathLike, metadata_path: PathLike):
    """Write a catalog as an EMB1 file, JSONL metadata and a label-count sidecar."""
    write_embeddings(embeddings_path, catalog.embeddings)
    metadata_path = Path(metadata_path)
    metadata_path.parent.mkdir(parents=True, exist_ok=True)
    with open(metadata_path, "w", encoding="utf-8") as f:
        for track in catalog:
            f.write(json.dumps(track.to_metadata()) + "\n")
    with open(labels_sidecar_path(metadata_path), "w", encoding="utf-8") as f:
        json.dump(catalog.label_counts(), f, indent=2)


def read_raw_metadata(path: PathLike) -> List[Dict]:
    """Read multi-labelled metadata (``moods`` / ``genres`` lists) from JSONL."""
    return _read_jsonl(Path(path))


def _candidates(record: Dict, plural: str, singular: str) -> List[int]:
    value = record.get(plural, record.get(singular))
    if value is None:
        return []
    if isinstance(value, int):
        return [value]
    return list(value)


def reduce_multilabels(raw: Sequence[Dict], rng_seed: int) -> List[Dict]:
    """
    Keep exactly one mood and one genre per track, chosen uniformly at random.

    Instruments stay multi-label and pass through unchanged.

    Raises:
        CatalogFormatError: if a record lacks an id or artist, or has no mood or
            no genre candidate
    """
    rng = np.random.default_rng(rng_seed)
    reduced = []
    for lineno, record in enumerate(raw, 1):
        for key in ("id", "artist"):
            if not isinstance(record.get(key), str):
                raise CatalogFormatError(f"Missing or invalid '{key}' in record {lineno}", row=lineno)
        track_id = record["id"]
        moods = _candidates(record, "moods", "mood")
        genres = _candidates(record, "genres", "genre")
        if not moods:
            raise CatalogFormatError(f"Track '{track_id}' has no mood candidates")
        if not genres:
            raise CatalogFormatError(f"Track '{track_id}' has no genre candidates")
        reduced.append({
            "id": record["id"],
            "artist": record["artist"],
            "mood": int(moods[rng.integers(len(moods))]),
            "genre": int(genres[rng.integers(len(genres))]),
            "instruments": list(record.get("instruments", [])),
        })
    return reduced


def ingest_multilabel(raw_metadata_path: PathLike, out_metadata_path: PathLike, rng_seed: int) -> List[Dict]:
    """Reduce a multi-labelled metadata file once and persist the single-label result."""
    reduced = reduce_multilabels(read_raw_metadata(raw_metadata_path), rng_seed)
    out_metadata_path = Path(out_metadata_path)
    out_metadata_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_metadata_path, "w", encoding="utf-8") as f:
        for record in reduced:
            f.write(json.dumps(record) + "\n")
    logger.info(f"Reduced {len(reduced)} multi-label records into {out_metadata_path}")
    return reduced


@dataclass
class SplitAssignment:
    """Track id -> split name, assigned at artist granularity."""
    assignments: Dict[str, str]
    names: Tuple[str, ...] = SPLIT_NAMES
    fold: Optional[int] = None
    warnings: List[str] = field(default_factory=list)

    def ids(self, name: str) -> List[str]:
        if name not in self.names:
            raise SplitError(f"Unknown split '{name}', expected one of {list(self.names)}")
        return [track_id for track_id, split in self.assignments.items() if split == name]

    def indices(self, catalog: Catalog, name: str) -> np.ndarray:
        return catalog.indices(self.ids(name))

    def artists(self, catalog: Catalog, name: str) -> Set[str]:
        return {catalog[track_id].artist_id for track_id in self.ids(name)}

    def mood_proportions(self, catalog: Catalog, name: str) -> np.ndarray:
        moods = catalog.moods[self.indices(catalog, name)]
        return np.bincount(moods, minlength=catalog.mood_count) / max(len(moods), 1)

    def check_catalog(self, catalog: Catalog):
        """Ensure this assignment covers exactly the catalog's tracks."""
        if set(self.assignments) != set(catalog.ids):
            raise SplitError("Split assignment does not partition the catalog")

    def to_dict(self) -> Dict[str, str]:
        return dict(self.assignments)

    def save(self, path: PathLike):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path: PathLike) -> "SplitAssignment":
        with open(path, "r", encoding="utf-8") as f:
            assignments = json.load(f)
        present = set(assignments.values())
        names = tuple(n for n in SPLIT_NAMES if n in present) + tuple(sorted(present - set(SPLIT_NAMES)))
        return cls(assignments=assignments, names=names)


def _resolve_names(count: int, names: Optional[Sequence[str]]) -> Tuple[str, ...]:
    if names is not None:
        if len(names) != count:
            raise SplitError(f"{len(names)} split names given for {count} ratios")
        return tuple(names)
    if count == len(SPLIT_NAMES):
        return SPLIT_NAMES
    return tuple(f"part{i}" for i in range(count))


def split_catalog(catalog: Catalog, ratios: Sequence[float] = DEFAULT_RATIOS, rng_seed: int = 0,
                  tolerance: float = DEFAULT_TOLERANCE, names: Optional[Sequence[str]] = None) -> SplitAssignment:
    """
    Artist-disjoint split with per-split mood proportions close to the global ones.

    Artists are processed largest first (seeded shuffle among equal sizes) and
    each goes to the split whose remaining per-mood track quota best matches
    the artist's mood histogram, breaking ties by the split's overall size
    deficit and then by split order.

    Raises:
        SplitError: if there are fewer artists than splits
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.ndim != 1 or ratios.size < 2 or (ratios <= 0).any():
        raise SplitError(f"Split ratios must be at least two positive numbers, got {ratios.tolist()}")
    ratios = ratios / ratios.sum()
    names = _resolve_names(ratios.size, names)
    n_splits = ratios.size

    artist_rows: Dict[str, List[int]] = defaultdict(list)
    for row, artist in enumerate(catalog.artists):
        artist_rows[artist].append(row)
    artists = sorted(artist_rows)
    if len(artists) < n_splits:
        raise SplitError(f"{len(artists)} artists cannot fill {n_splits} artist-disjoint splits")

    m = catalog.mood_count
    histograms = {a: np.bincount(catalog.moods[artist_rows[a]], minlength=m).astype(np.float64) for a in artists}
    warnings: List[str] = []

    majority = {a: int(np.argmax(histograms[a])) for a in artists}
    for mood in range(m):
        count = sum(1 for a in artists if majority[a] == mood)
        if 0 < count < n_splits:
            warnings.append(f"Mood {mood} is the majority mood of only {count} artists; stratification is degraded")

    rng = np.random.default_rng(rng_seed)
    order = [artists[i] for i in rng.permutation(len(artists))]
    order.sort(key=lambda a: -len(artist_rows[a]))

    global_hist = np.bincount(catalog.moods, minlength=m).astype(np.float64)
    quota = ratios[:, None] * global_hist[None, :]
    filled = np.zeros((n_splits, m))
    size_quota = ratios * len(catalog)
    sizes = np.zeros(n_splits)
    members: List[List[str]] = [[] for _ in range(n_splits)]

    for artist in order:
        hist = histograms[artist]
        weights = hist / hist.sum()
        relative_need = (quota - filled) / np.maximum(quota, 1e-12)
        mood_score = relative_need @ weights
        size_score = (size_quota - sizes) / size_quota
        best = max(range(n_splits), key=lambda s: (round(mood_score[s], 12), round(size_score[s], 12), -s))
        members[best].append(artist)
        filled[best] += hist
        sizes[best] += hist.sum()

    for s in range(n_splits):
        if members[s]:
            continue
        donor = max(range(n_splits), key=lambda t: (len(members[t]), -t))
        moved = min(members[donor], key=lambda a: (len(artist_rows[a]), a))
        members[donor].remove(moved)
        members[s].append(moved)
        warnings.append(f"Split '{names[s]}' was empty; moved artist '{moved}' from '{names[donor]}'")

    split_of_artist = {a: names[s] for s in range(n_splits) for a in members[s]}
    assignment = SplitAssignment(
        assignments={track_id: split_of_artist[catalog.artists[row]] for row, track_id in enumerate(catalog.ids)},
        names=names,
    )

    global_props = global_hist / global_hist.sum()
    for name in names:
        deviation = float(np.abs(assignment.mood_proportions(catalog, name) - global_props).max())
        if deviation > tolerance:
            warnings.append(
                f"Split '{name}' mood proportions deviate {deviation * 100:.1f} pp from global "
                f"(tolerance {tolerance * 100:.1f} pp)"
            )

    for message in warnings:
        logger.warning(message)
    assignment.warnings = warnings
    return assignment


def kfold_split(catalog: Catalog, k: int = 3, rng_seed: int = 0, ratios: Sequence[float] = DEFAULT_RATIOS,
                tolerance: float = DEFAULT_TOLERANCE) -> List[SplitAssignment]:
    """k independent artist-disjoint stratified splits drawn with derived seeds."""
    if k < 2:
        raise SplitError(f"k-fold splitting needs k >= 2, got {k}")
    folds = []
    for fold, seed in enumerate(derive_seeds(rng_seed, k)):
        assignment = split_catalog(catalog, ratios, seed, tolerance)
        assignment.fold = fold
        folds.append(assignment)
    return folds
