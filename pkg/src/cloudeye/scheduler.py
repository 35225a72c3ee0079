"""Online (K, Q) selection: distribution embedding, PQ lookup, budgeted choice."""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .core import BoundingBox
from .encode import ConfigEntry

VAR_FLOOR = 1e-4
DEFAULT_REFINE = 10  # ADC shortlist of refine*top_n, re-scored exactly
PQ_MAGIC = b"CEPQ"
PQ_VERSION = 1
_PQ_HEADER = struct.Struct("<4sBBHHHIH")


@dataclass(frozen=True)
class DistributionEmbedding:
    base: np.ndarray
    shifted: np.ndarray
    empty: bool = False

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.base, self.shifted])

    @classmethod
    def from_vector(cls, vec) -> "DistributionEmbedding":
        vec = np.asarray(vec, dtype=np.float64)
        half = vec.size // 2
        return cls(vec[:half], vec[half:], not vec.any())


def _grid_stats(cells: np.ndarray, cx, cy, area, width, height, g) -> np.ndarray:
    out = np.zeros((g * g, 4))
    n = len(cx)
    frame_area = float(width * height)
    for c in range(g * g):
        sel = cells == c
        if not sel.any():
            continue
        w = area[sel]
        out[c, 0] = float((w * cx[sel]).sum() / w.sum()) / width
        out[c, 1] = float((w * cy[sel]).sum() / w.sum()) / height
        out[c, 2] = min(1.0, float(w.sum()) / frame_area)
        out[c, 3] = sel.sum() / n
    return np.clip(out, 0.0, 1.0).reshape(-1)


def embed(boxes: Sequence[BoundingBox], width: int, height: int, grid_g: int = 4) -> DistributionEmbedding:
    """Per-cell (weighted mean cx, weighted mean cy, area share, count share) on two grids.

    The second grid is offset by half a cell on both axes so a target sitting
    on a cell boundary of one grid is well inside a cell of the other.
    """
    if grid_g < 2:
        raise ValueError("grid_g must be >= 2")
    dim = 4 * grid_g * grid_g
    if not boxes:
        return DistributionEmbedding(np.zeros(dim), np.zeros(dim), True)
    cx = np.array([b.center[0] for b in boxes])
    cy = np.array([b.center[1] for b in boxes])
    area = np.array([b.area for b in boxes])
    cw, ch = width / grid_g, height / grid_g

    def cell_ids(offset):
        col = np.clip(np.floor(cx / cw + offset), 0, grid_g - 1).astype(int)
        row = np.clip(np.floor(cy / ch + offset), 0, grid_g - 1).astype(int)
        return row * grid_g + col

    base = _grid_stats(cell_ids(0.0), cx, cy, area, width, height, grid_g)
    shifted = _grid_stats(cell_ids(0.5), cx, cy, area, width, height, grid_g)
    return DistributionEmbedding(base, shifted)


@dataclass(frozen=True)
class EmbeddingMetric:
    """Diagonal Mahalanobis over embedding components, averaged across both grids."""

    inv_var_base: np.ndarray
    inv_var_shifted: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "EmbeddingMetric":
        return cls(np.ones(dim), np.ones(dim))

    @classmethod
    def fit(cls, vectors: np.ndarray) -> "EmbeddingMetric":
        vectors = np.asarray(vectors, dtype=np.float64)
        var = np.maximum(vectors.var(axis=0), VAR_FLOOR) if len(vectors) else np.ones(vectors.shape[1])
        half = vectors.shape[1] // 2
        return cls(1.0 / var[:half], 1.0 / var[half:])

    @property
    def scale(self) -> np.ndarray:
        return np.sqrt(np.concatenate([self.inv_var_base, self.inv_var_shifted]))

    def distance(self, a: DistributionEmbedding, b: DistributionEmbedding) -> float:
        db = math.sqrt(float((((a.base - b.base) ** 2) * self.inv_var_base).sum()))
        ds = math.sqrt(float((((a.shifted - b.shifted) ** 2) * self.inv_var_shifted).sum()))
        return (db + ds) / 2.0


# -- product quantization -----------------------------------------------------

def _kmeans(x: np.ndarray, k: int, rng: np.random.Generator, iters: int = 25) -> np.ndarray:
    """k-means++ seeding then Lloyd; empty clusters are re-seeded from the worst-fit point."""
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        idx = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        centers[c] = x[idx]
        d2 = np.minimum(d2, ((x - centers[c]) ** 2).sum(axis=1))
    for _ in range(iters):
        dist = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        moved = False
        for c in range(k):
            sel = assign == c
            if sel.any():
                new = x[sel].mean(axis=0)
            else:
                new = x[int(dist.min(axis=1).argmax())]
            if not np.array_equal(new, centers[c]):
                moved = True
            centers[c] = new
        if not moved:
            break
    return centers


@dataclass
class PqIndex:
    metric: EmbeddingMetric
    vectors: np.ndarray  # (n, dim) raw embeddings
    entries: list[ConfigEntry] | None
    m: int
    ksub: int
    codebooks: np.ndarray | None = None  # (m, ksub, dsub) in whitened space
    codes: np.ndarray | None = None  # (n, m) uint8

    @property
    def exhaustive(self) -> bool:
        return self.codebooks is None

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def whiten(self, vec: np.ndarray) -> np.ndarray:
        return np.asarray(vec, dtype=np.float64) * self.metric.scale

    def exact_distances(self, query: DistributionEmbedding) -> np.ndarray:
        q = self.whiten(query.as_vector())
        diff = self.whiten(self.vectors) - q
        return (diff * diff).sum(axis=1)

    def adc_distances(self, query: DistributionEmbedding) -> np.ndarray:
        if self.exhaustive:
            return self.exact_distances(query)
        q = self.whiten(query.as_vector()).reshape(self.m, -1)
        table = ((self.codebooks - q[:, None, :]) ** 2).sum(axis=2)  # (m, ksub)
        return kernels.adc_scan(self.codes, table)

    def to_bytes(self) -> bytes:
        n, dim = self.vectors.shape
        dsub = dim // self.m
        head = _PQ_HEADER.pack(PQ_MAGIC, PQ_VERSION, 1 if self.exhaustive else 0, self.m, self.ksub,
                               dsub, n, dim)
        parts = [head, self.metric.inv_var_base.astype("<f8").tobytes(),
                 self.metric.inv_var_shifted.astype("<f8").tobytes()]
        if not self.exhaustive:
            parts.append(self.codebooks.astype("<f8").tobytes())
            parts.append(self.codes.astype(np.uint8).tobytes())
        parts.append(self.vectors.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes, entries: list[ConfigEntry] | None = None) -> "PqIndex":
        if len(blob) < _PQ_HEADER.size or blob[:4] != PQ_MAGIC:
            raise ValueError("not a CEPQ index")
        magic, ver, mode, m, ksub, dsub, n, dim = _PQ_HEADER.unpack_from(blob, 0)
        if ver != PQ_VERSION:
            raise ValueError(f"unsupported CEPQ version {ver}")
        off = _PQ_HEADER.size
        half = dim // 2

        def take(count, dtype):
            nonlocal off
            size = count * np.dtype(dtype).itemsize
            if off + size > len(blob):
                raise ValueError("truncated CEPQ index")
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).copy()
            off += size
            return arr

        metric = EmbeddingMetric(take(half, "<f8"), take(dim - half, "<f8"))
        codebooks = codes = None
        if mode == 0:
            codebooks = take(m * ksub * dsub, "<f8").reshape(m, ksub, dsub)
            codes = take(n * m, np.uint8).reshape(n, m)
        vectors = take(n * dim, "<f8").reshape(n, dim)
        if off != len(blob):
            raise ValueError("trailing bytes in CEPQ index")
        return cls(metric, vectors, entries, m, ksub, codebooks, codes)


def pq_build(entries: Sequence[ConfigEntry], m: int = 8, codebook_size: int = 16, seed: int = 0,
             metric: EmbeddingMetric | None = None) -> PqIndex:
    """Train per-subspace codebooks on the whitened embeddings and encode every entry.

    Fewer entries than ``codebook_size`` gives an exhaustive-scan index.
    """
    if not entries:
        raise ValueError("cannot index an empty configuration set")
    vectors = np.array([e.embedding for e in entries], dtype=np.float64)
    return pq_build_vectors(vectors, list(entries), m, codebook_size, seed, metric)


def pq_build_vectors(vectors: np.ndarray, entries, m: int = 8, codebook_size: int = 16, seed: int = 0,
                     metric: EmbeddingMetric | None = None) -> PqIndex:
    n, dim = vectors.shape
    if dim % m:
        raise ValueError(f"dimension {dim} not divisible by {m} subspaces")
    if not 1 <= codebook_size <= 256:
        raise ValueError("codebook_size must fit in a byte code")
    metric = metric or EmbeddingMetric.fit(vectors)
    index = PqIndex(metric, vectors, entries, m, codebook_size)
    if n < codebook_size:
        return index
    white = index.whiten(vectors).reshape(n, m, dim // m)
    rng = np.random.default_rng(seed)
    books = np.stack([_kmeans(white[:, j, :], codebook_size, rng) for j in range(m)])
    codes = np.empty((n, m), dtype=np.uint8)
    for j in range(m):
        d = ((white[:, j, None, :] - books[j][None]) ** 2).sum(axis=2)
        codes[:, j] = d.argmin(axis=1)
    index.codebooks, index.codes = books, codes
    return index


def rank(index: PqIndex, query: DistributionEmbedding, top_n: int, refine: int = DEFAULT_REFINE) -> np.ndarray:
    """Entry ids ordered by ADC distance (ties by id).

    ``refine > 0`` re-scores the best ``refine * top_n`` ADC hits with exact
    distances before cutting to ``top_n``.
    """
    d = index.adc_distances(query)
    order = np.lexsort((np.arange(d.size), d))
    if refine > 0 and not index.exhaustive:
        short = order[: max(top_n, refine * top_n)]
        exact = index.exact_distances(query)[short]
        order = short[np.lexsort((short, exact))]
    return order[:top_n]


def query_configs(index: PqIndex, query: DistributionEmbedding, top_n: int, refine: int = DEFAULT_REFINE) -> list[ConfigEntry]:
    if index.entries is None:
        raise ValueError("index has no attached entries")
    return [index.entries[i] for i in rank(index, query, top_n, refine)]


# -- budgeted selection -------------------------------------------------------

class Fallback(str, enum.Enum):
    SMALLEST_SIZE = "smallest_size"
    SKIP = "skip"


@dataclass(frozen=True)
class BudgetParams:
    bandwidth: float  # bytes / second
    latency: float  # seconds
    fallback: Fallback = Fallback.SMALLEST_SIZE

    def __post_init__(self):
        if self.bandwidth <= 0 or self.latency <= 0:
            raise ValueError("bandwidth and latency budget must be positive")

    def cost(self, e: ConfigEntry) -> float:
        return e.payload_size / self.bandwidth + e.t_cluster + e.t_encode

    def feasible(self, e: ConfigEntry) -> bool:
        return self.cost(e) <= self.latency


@dataclass(frozen=True)
class Selection:
    entry: ConfigEntry | None
    feasible: bool
    fallback: Fallback | None = None

    @property
    def upload(self) -> bool:
        return self.entry is not None


def select_config(candidates: Sequence[ConfigEntry], budget: BudgetParams) -> Selection:
    """Highest accuracy among entries meeting the latency budget.

    Ties go to the smaller payload, then the smaller K, then candidate order.
    """
    if not candidates:
        raise ValueError("no candidates to choose from")
    ok = [(i, e) for i, e in enumerate(candidates) if budget.feasible(e)]
    if ok:
        _, best = min(ok, key=lambda t: (-t[1].accuracy, t[1].payload_size, t[1].k, t[0]))
        return Selection(best, True)
    if budget.fallback is Fallback.SKIP:
        return Selection(None, False, Fallback.SKIP)
    _, smallest = min(enumerate(candidates), key=lambda t: (t[1].payload_size, -t[1].accuracy, t[1].k, t[0]))
    return Selection(smallest, False, Fallback.SMALLEST_SIZE)
