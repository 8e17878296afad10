"""Per-image feature vectors, a hermetic toy encoder, and the MPAE cache file.

Cache layout (little-endian)::

    b"MPAE"  u32 version  u32 count  u32 dimension
    count x ( u16 id_len, id_len bytes UTF-8 id, dimension x float32 )

The backend tag is not part of the file; callers key cache files by
``(backend_tag, dimension)`` through :func:`cache_path`.
"""
from __future__ import annotations

import logging
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import ImageTensor, resize_nearest, save_image

log = logging.getLogger(__name__)

CACHE_MAGIC = b"MPAE"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_IDLEN = struct.Struct("<H")

TOY_TAG = "toy-pool16"
TOY_GRID = 16


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Embedding:
    sample_id: str
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float32).ravel()
        if not np.all(np.isfinite(v)):
            raise EmbeddingError(f"embedding for {self.sample_id!r} has non-finite values")
        if not np.linalg.norm(v.astype(np.float64)) > 0:
            raise EmbeddingError(f"embedding for {self.sample_id!r} has zero norm")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @property
    def dimension(self) -> int:
        return self.vector.size


@dataclass
class EmbeddingCache:
    backend_tag: str
    dimension: int
    entries: dict = field(default_factory=dict)

    def __post_init__(self):
        self._lock = threading.Lock()

    def get(self, sample_id: str) -> Optional[np.ndarray]:
        return self.entries.get(sample_id)

    def put(self, emb: Embedding) -> None:
        if emb.dimension != self.dimension:
            raise EmbeddingError(
                f"dimension {emb.dimension} does not match cache dimension {self.dimension}")
        with self._lock:
            self.entries[emb.sample_id] = emb.vector

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingCache):
            return NotImplemented
        return (self.dimension == other.dimension
                and self.entries.keys() == other.entries.keys()
                and all(np.array_equal(v, other.entries[k]) for k, v in self.entries.items()))


def cache_path(directory, backend_tag: str, dimension: int) -> Path:
    safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in backend_tag)
    return Path(directory) / f"embeddings-{safe}-{dimension}.mpae"


def cache_write(cache: EmbeddingCache, path) -> None:
    parts = [_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, len(cache.entries), cache.dimension)]
    for sid in sorted(cache.entries):
        raw = sid.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise EmbeddingError(f"id too long: {sid[:40]}...")
        vec = np.asarray(cache.entries[sid], dtype="<f4")
        if vec.size != cache.dimension:
            raise EmbeddingError(f"entry {sid!r} has dimension {vec.size}")
        parts += [_IDLEN.pack(len(raw)), raw, vec.tobytes()]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def cache_read(path, backend_tag: str = "") -> EmbeddingCache:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise EmbeddingError(f"{path}: truncated header")
    magic, version, count, dim = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise EmbeddingError(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise EmbeddingError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    entries = {}
    for _ in range(count):
        if off + _IDLEN.size > len(raw):
            raise EmbeddingError(f"{path}: truncated file")
        (n,) = _IDLEN.unpack_from(raw, off)
        off += _IDLEN.size
        end = off + n + 4 * dim
        if end > len(raw):
            raise EmbeddingError(f"{path}: truncated file")
        sid = raw[off:off + n].decode("utf-8")
        entries[sid] = np.frombuffer(raw, dtype="<f4", count=dim, offset=off + n).astype(np.float32)
        off = end
    if off != len(raw):
        raise EmbeddingError(f"{path}: {len(raw) - off} trailing bytes")
    if len(entries) != count:
        raise EmbeddingError(f"{path}: duplicate ids")
    return EmbeddingCache(backend_tag, dim, entries)


def _pool_edges(n: int, bins: int) -> np.ndarray:
    return (np.arange(bins) * n) // bins


def embed_toy(image: ImageTensor, sample_id: str = "") -> Embedding:
    """Grayscale, 16x16 average pool, flatten, L2-normalise."""
    g = image.gray()
    h, w = g.shape
    if h < TOY_GRID or w < TOY_GRID:
        g = resize_nearest(g, max(h, TOY_GRID), max(w, TOY_GRID))
        h, w = g.shape
    ey = _pool_edges(h, TOY_GRID)
    ex = _pool_edges(w, TOY_GRID)
    sums = np.add.reduceat(np.add.reduceat(g, ey, axis=0), ex, axis=1)
    counts = np.outer(np.diff(np.append(ey, h)), np.diff(np.append(ex, w)))
    v = (sums / counts).ravel()
    norm = np.linalg.norm(v)
    if norm == 0:
        # an all-black image has no direction; fall back to the uniform vector
        v = np.ones_like(v)
        norm = np.linalg.norm(v)
    return Embedding(sample_id, v / norm)


class ToyEmbedder:
    tag = TOY_TAG
    dimension = TOY_GRID * TOY_GRID

    def __init__(self, cache: Optional[EmbeddingCache] = None):
        self.cache = cache if cache is not None else EmbeddingCache(self.tag, self.dimension)
        self.calls = 0

    def embed(self, sample_id: str, image: ImageTensor) -> Embedding:
        hit = self.cache.get(sample_id)
        if hit is not None:
            return Embedding(sample_id, hit)
        self.calls += 1
        emb = embed_toy(image, sample_id)
        self.cache.put(emb)
        return emb


class ExternalEmbedder:
    """Embeddings from an out-of-process encoder speaking the NDJSON protocol.

    Images are written as PNG into ``work_dir`` and sent by path. Feature maps
    are pooled to one vector on the adapter side; this class only checks the
    vector and caches it.
    """

    def __init__(self, client, work_dir, cache: Optional[EmbeddingCache] = None,
                 tag: str = "external"):
        hello = client.hello_reply
        if hello.get("kind") != "embedder":
            raise EmbeddingError(f"backend is a {hello.get('kind')!r}, not an embedder")
        self.client = client
        self.dimension = int(hello["dim"])
        self.tag = tag
        self.work_dir = Path(work_dir)
        self.work_dir.mkdir(parents=True, exist_ok=True)
        if cache is None:
            cache = EmbeddingCache(tag, self.dimension)
        elif cache.dimension != self.dimension:
            raise EmbeddingError(
                f"cache dimension {cache.dimension} != backend dimension {self.dimension}")
        self.cache = cache
        self.calls = 0

    def embed(self, sample_id: str, image: ImageTensor) -> Embedding:
        hit = self.cache.get(sample_id)
        if hit is not None:
            return Embedding(sample_id, hit)
        path = self.work_dir / f"{sample_id}.png"
        save_image(image, path)
        self.calls += 1
        reply = self.client.request({"op": "embed", "id": sample_id, "image": str(path)})
        vec = reply.get("vector")
        if not isinstance(vec, list):
            raise EmbeddingError(f"malformed embed response for {sample_id!r}")
        arr = np.asarray(vec, dtype=np.float64)
        if arr.ndim != 1 or arr.size != self.dimension:
            raise EmbeddingError(
                f"backend returned dimension {arr.size}, expected {self.dimension}")
        emb = Embedding(sample_id, arr)
        self.cache.put(emb)
        return emb


def embed_external(image: ImageTensor, backend: ExternalEmbedder, sample_id: str = "") -> Embedding:
    return backend.embed(sample_id, image)
