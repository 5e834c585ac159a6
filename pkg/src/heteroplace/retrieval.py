"""Signature databases, exhaustive nearest-neighbour queries and the ScanContext baseline."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .descriptor import PolarDescriptor, ring_key
from .formats import atomic_write_text


class EmptyDatabase(ValueError):
    pass


def _flat(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x.reshape(len(x), -1)


def pairwise_distances(queries, database, chunk_elems: int = 1 << 22) -> np.ndarray:
    """Euclidean distances between flattened rows, evaluated as sqrt(sum((q - d)^2)) in chunks."""
    q, d = _flat(queries), _flat(database)
    if q.shape[1] != d.shape[1]:
        raise ValueError(f"signature sizes differ: {q.shape[1]} vs {d.shape[1]}")
    out = np.empty((len(q), len(d)))
    step = max(1, chunk_elems // max(1, d.size))
    for i in range(0, len(q), step):
        diff = q[i : i + step, None, :] - d[None, :, :]
        out[i : i + step] = np.sqrt(np.sum(diff * diff, axis=-1))
    return out


@dataclass
class SignatureDatabase:
    ids: np.ndarray
    signatures: np.ndarray  # (N, h, w)
    xy: np.ndarray | None = None  # (N, 2) capture positions, when known
    session: str = ""

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.signatures = np.asarray(self.signatures, dtype=float)
        if self.signatures.ndim != 3 or len(self.signatures) != len(self.ids):
            raise ValueError("need one (h, w) signature per id")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("database ids must be unique")
        norms = np.sqrt(np.sum(_flat(self.signatures) ** 2, axis=1)) if len(self.ids) else np.zeros(0)
        if np.any((norms != 0) & (np.abs(norms - 1.0) > 1e-5)):
            raise ValueError("signatures must be unit-norm or all-zero")
        if self.xy is not None:
            self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
            if len(self.xy) != len(self.ids):
                raise ValueError("need one position per id")

    @classmethod
    def from_signatures(cls, signatures, xy=None, session: str = "") -> "SignatureDatabase":
        return cls(np.arange(len(signatures)), signatures, xy, session)

    def __len__(self):
        return len(self.ids)


def query_top_k(db: SignatureDatabase, q, k: int = 1) -> list[tuple[int, float]]:
    """The ``k`` nearest entries as (id, distance), ascending, ties to the lower id."""
    if len(db) == 0:
        raise EmptyDatabase("cannot query an empty database")
    if not 1 <= k <= len(db):
        raise ValueError(f"k must lie in [1, {len(db)}], got {k}")
    dist = pairwise_distances(np.asarray(q, dtype=float)[None], db.signatures)[0]
    order = np.lexsort((db.ids, dist))[:k]
    return [(int(db.ids[i]), float(dist[i])) for i in order]


def top1(db: SignatureDatabase, queries) -> tuple[np.ndarray, np.ndarray]:
    """Best database row index and distance for each query (ties to the lower id)."""
    if len(db) == 0:
        raise EmptyDatabase("cannot query an empty database")
    dist = pairwise_distances(queries, db.signatures)
    best = dist.min(axis=1, keepdims=True)
    masked = np.where(dist == best, db.ids[None, :], np.iinfo(np.int64).max)
    pick = np.argmin(masked, axis=1)
    return pick, dist[np.arange(len(dist)), pick]


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # (Q, N), similarity = -distance
    query_ids: np.ndarray
    db_ids: np.ndarray


def similarity_matrix(queries: SignatureDatabase, db: SignatureDatabase) -> SimilarityMatrix:
    if len(queries) == 0 or len(db) == 0:
        raise EmptyDatabase("similarity matrix needs non-empty query and database sets")
    return SimilarityMatrix(-pairwise_distances(queries.signatures, db.signatures), queries.ids.copy(), db.ids.copy())


def write_similarity_csv(path, sim: SimilarityMatrix):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_id"] + [int(i) for i in sim.db_ids])
    for qid, row in zip(sim.query_ids, sim.values):
        w.writerow([int(qid)] + [repr(float(v)) for v in row])
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------- ScanContext baseline


def _values(d) -> np.ndarray:
    return np.asarray(d.values if isinstance(d, PolarDescriptor) else d, dtype=float)


def shift_distances(a, b) -> np.ndarray:
    """Mean column cosine distance between ``roll(a, k)`` and ``b`` for every shift ``k``.

    Column pairs where both columns are empty count as distance 0, pairs with
    one empty column as 1.  Per-shift terms are summed in sorted order so the
    result does not depend on which argument comes first.
    """
    a, b = _values(a), _values(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"descriptor shapes differ: {a.shape} vs {b.shape}")
    s = a.shape[1]
    # column j of b pairs with column (j - k) of a under roll(a, k)
    idx = (np.arange(s)[None, :] - np.arange(s)[:, None]) % s  # (k, j)
    a_cols = a[:, idx]  # (rings, k, j)
    dot = np.sum(a_cols * b[:, None, :], axis=0)
    saa = np.sum(a * a, axis=0)[idx]
    sbb = np.broadcast_to(np.sum(b * b, axis=0)[None, :], dot.shape)
    denom = np.sqrt(saa * sbb)
    za, zb = saa == 0, sbb == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.clip(dot / denom, -1.0, 1.0)
    col = np.where(za & zb, 0.0, np.where(za | zb, 1.0, 1.0 - cos))
    return np.sum(np.sort(col, axis=1), axis=1) / s


def sc_distance(a, b) -> tuple[float, int]:
    """Aligned ScanContext distance and the best shift ``k`` with ``b ~ roll(a, k)`` (ties to smallest k)."""
    d = shift_distances(a, b)
    k = int(np.argmin(d))
    return float(d[k]), k


@dataclass
class DescriptorDatabase:
    ids: np.ndarray
    values: np.ndarray  # (N, rings, sectors)
    xy: np.ndarray | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3 or len(self.values) != len(self.ids):
            raise ValueError("need one (rings, sectors) descriptor per id")
        self.ring_keys = ring_key(self.values)

    @classmethod
    def from_values(cls, values, xy=None) -> "DescriptorDatabase":
        return cls(np.arange(len(values)), values, xy)

    def __len__(self):
        return len(self.ids)


def coarse_to_fine_query(db, q, candidate_frac: float = 0.01) -> tuple[int, float]:
    """Ring-key pre-filter to ``ceil(candidate_frac * N)`` entries, then the best aligned distance.

    Returns (id, distance); ties in either stage go to the lower id.
    """
    if not isinstance(db, DescriptorDatabase):
        db = DescriptorDatabase.from_values(db)
    if len(db) == 0:
        raise EmptyDatabase("cannot query an empty database")
    if not 0 < candidate_frac <= 1:
        raise ValueError("candidate_frac must lie in (0, 1]")
    q = _values(q)
    n = max(1, math.ceil(candidate_frac * len(db)))
    kd = db.ring_keys - ring_key(q)[None, :]
    coarse = np.sqrt(np.sum(kd * kd, axis=1))
    cand = np.lexsort((db.ids, coarse))[:n]
    fine = np.array([sc_distance(q, db.values[c])[0] for c in cand])
    order = np.lexsort((db.ids[cand], fine))
    best = cand[order[0]]
    return int(db.ids[best]), float(fine[order[0]])
