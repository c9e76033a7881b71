"""Exact dense retrieval over item texts.

File format (little-endian)::

    magic   8 bytes  b"REGESIDX"
    version u32
    dim     u32
    count   u32
    count x { id_len u32, id utf-8 bytes, dim x float32 }
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from reges.corpus import ItemCatalog
from reges.embed import Embedder, EmbedderConfig, EmbeddingError

logger = logging.getLogger(__name__)

MAGIC = b"REGESIDX"
VERSION = 1
_HEADER = struct.Struct("<8sIII")
_U32 = struct.Struct("<I")

# scores that agree to this many decimals rank as ties (then by item_id)
TIE_DECIMALS = 12


class IndexFormatError(RuntimeError):
    pass


@dataclass(frozen=True)
class RankedList:
    query_id: str
    hits: tuple[tuple[str, float], ...]

    @property
    def item_ids(self) -> list[str]:
        return [i for i, _ in self.hits]

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "hits": [[i, s] for i, s in self.hits]}

    @classmethod
    def from_dict(cls, d: dict) -> "RankedList":
        return cls(d["query_id"], tuple((str(i), float(s)) for i, s in d["hits"]))


class VectorIndex:
    """Exact full-scan cosine index. Entries keep catalog order."""

    mode = "exact"

    def __init__(self, ids: list[str], vectors: np.ndarray):
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise ValueError("ids and vectors disagree in length")
        if len(set(ids)) != len(ids):
            raise ValueError("item ids must be unique")
        self.ids = list(ids)
        self.vectors = vectors
        self.dim = int(vectors.shape[1])
        self._mat = vectors.astype(np.float64)
        self._norms = np.linalg.norm(self._mat, axis=1)
        # position of each entry in ascending-id order, for tie-breaking
        order = sorted(range(len(ids)), key=ids.__getitem__)
        self._id_rank = np.empty(len(ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(ids))

    def __len__(self) -> int:
        return len(self.ids)

    def scores(self, query: np.ndarray) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValueError(f"dimension mismatch: index dim {self.dim}, query shape {q.shape}")
        raw = (self._mat * q).sum(axis=1) / (self._norms * np.linalg.norm(q))
        return np.clip(raw, -1.0, 1.0)

    def retrieve(self, query: np.ndarray, k: int, query_id: str = "") -> RankedList:
        if k < 1:
            raise ValueError("k must be >= 1")
        scores = self.scores(query)
        keys = np.round(scores, TIE_DECIMALS)
        n = len(self.ids)
        k = min(k, n)
        if k < n:
            # everything tied with the k-th best must be considered for tie order
            kth = np.partition(-keys, k - 1)[k - 1]
            pool = np.nonzero(-keys <= kth)[0]
        else:
            pool = np.arange(n)
        order = pool[np.lexsort((self._id_rank[pool], -keys[pool]))][:k]
        return RankedList(query_id, tuple((self.ids[i], float(scores[i])) for i in order))

    def vector(self, item_id: str) -> np.ndarray:
        return self.vectors[self.ids.index(item_id)]


def build_index(catalog: ItemCatalog, embedder: EmbedderConfig | Embedder) -> VectorIndex:
    """Embed ``TITLE. ABSTRACT`` for every item, in catalog order."""
    if len(catalog) == 0:
        raise ValueError("empty catalog")
    if isinstance(embedder, EmbedderConfig):
        embedder = Embedder(embedder)
    ids = catalog.ids()
    texts = [catalog.index_text(i) for i in ids]
    batch = max(1, embedder.config.batch_size) * 8
    parts = []
    done = 0
    for start in range(0, len(texts), batch):
        chunk = texts[start : start + batch]
        try:
            parts.append(embedder(chunk))
        except EmbeddingError as exc:
            raise EmbeddingError(
                f"{exc} (embedded {done + exc.embedded} of {len(texts)} items)",
                exc.status,
                done + exc.embedded,
            ) from exc
        done += len(chunk)
    return VectorIndex(ids, np.vstack(parts))


def serialize_index(index: VectorIndex) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, index.dim, len(index.ids))]
    for item_id, vec in zip(index.ids, index.vectors):
        raw = item_id.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
        parts.append(vec.astype("<f4").tobytes())
    return b"".join(parts)


def save_index(index: VectorIndex, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize_index(index))
    return path


def deserialize_index(data: bytes) -> VectorIndex:
    if len(data) < _HEADER.size:
        raise IndexFormatError("truncated header")
    magic, version, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise IndexFormatError(f"bad magic {magic!r}; not an index file")
    if version != VERSION:
        raise IndexFormatError(f"index format version {version} unsupported (expected {VERSION})")
    off = _HEADER.size
    ids: list[str] = []
    vecs = np.empty((count, dim), dtype=np.float32)
    vec_bytes = 4 * dim
    for i in range(count):
        if off + 4 > len(data):
            raise IndexFormatError(f"truncated at entry {i}")
        (n,) = _U32.unpack_from(data, off)
        off += 4
        if off + n + vec_bytes > len(data):
            raise IndexFormatError(f"truncated at entry {i}")
        ids.append(data[off : off + n].decode("utf-8"))
        off += n
        vecs[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=off)
        off += vec_bytes
    if off != len(data):
        raise IndexFormatError(f"{len(data) - off} trailing bytes after {count} entries")
    return VectorIndex(ids, vecs)


def load_index(path: str | Path) -> VectorIndex:
    return deserialize_index(Path(path).read_bytes())
