"""Length-aware feature hashing of token streams.

Each token lands in one of eight length buckets (log base 1.4 of the byte
length, clamped), and within the bucket at a MurmurHash3 offset. Tokens of
very different lengths therefore never share a bin.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Dict, Iterable, Iterator, List, Sequence, Tuple, Union

import mmh3
import numpy as np
import scipy.sparse as sp

from .tokenizer import N_CHUNKS, ChunkPlan, TokenStream, plan_chunks, tokenize

N_BINS = 1024
N_BUCKETS = 8
FLAT_DIMS = N_CHUNKS * N_BINS
CHUNK_BUCKET_WIDTH = N_BINS // N_BUCKETS
FLAT_BUCKET_WIDTH = FLAT_DIMS // N_BUCKETS

HASH_SEED = 0
# Stored in model files; features from a different hash variant are not comparable.
HASH_VARIANT = "murmur3_x86_32:seed=0:lenlog=1.4:buckets=8"

_LOG_BASE = 1.4


def murmur3_32(key: bytes, seed: int = 0) -> int:
    """Reference MurmurHash3 x86 32-bit, returned unsigned."""
    c1 = 0xCC9E2D51
    c2 = 0x1B873593
    length = len(key)
    h = seed & 0xFFFFFFFF
    nblocks = length // 4
    for i in range(0, nblocks * 4, 4):
        k = key[i] | key[i + 1] << 8 | key[i + 2] << 16 | key[i + 3] << 24
        k = (k * c1) & 0xFFFFFFFF
        k = ((k << 15) | (k >> 17)) & 0xFFFFFFFF
        k = (k * c2) & 0xFFFFFFFF
        h ^= k
        h = ((h << 13) | (h >> 19)) & 0xFFFFFFFF
        h = (h * 5 + 0xE6546B64) & 0xFFFFFFFF

    tail = nblocks * 4
    k = 0
    rem = length & 3
    if rem >= 3:
        k ^= key[tail + 2] << 16
    if rem >= 2:
        k ^= key[tail + 1] << 8
    if rem >= 1:
        k ^= key[tail]
        k = (k * c1) & 0xFFFFFFFF
        k = ((k << 15) | (k >> 17)) & 0xFFFFFFFF
        k = (k * c2) & 0xFFFFFFFF
        h ^= k

    h ^= length
    h ^= h >> 16
    h = (h * 0x85EBCA6B) & 0xFFFFFFFF
    h ^= h >> 13
    h = (h * 0xC2B2AE35) & 0xFFFFFFFF
    h ^= h >> 16
    return h


def token_hash(token: bytes) -> int:
    return mmh3.hash(token, HASH_SEED, signed=False)


def length_bucket(token: bytes) -> int:
    if not token:
        raise ValueError("empty token has no length bucket")
    return int(min(8, max(1, math.log(len(token), _LOG_BASE)))) - 1


def token_bin(token: bytes, bucket_width: int = CHUNK_BUCKET_WIDTH) -> int:
    return length_bucket(token) * bucket_width + token_hash(token) % bucket_width


# token -> flat_bin * N_BINS + chunk_bin; a plain dict is several times cheaper
# per lookup than lru_cache, and both bins come out of one probe
_BIN_CACHE: Dict[bytes, int] = {}
_BIN_CACHE_LIMIT = 1 << 20


def _packed_bins(tokens: List[bytes]) -> np.ndarray:
    vals = list(map(_BIN_CACHE.get, tokens))
    if None in vals:
        if len(_BIN_CACHE) > _BIN_CACHE_LIMIT:
            _BIN_CACHE.clear()
        for i, v in enumerate(vals):
            if v is None:
                t = tokens[i]
                bucket, h = length_bucket(t), token_hash(t)
                v = ((bucket * FLAT_BUCKET_WIDTH + h % FLAT_BUCKET_WIDTH) * N_BINS
                     + bucket * CHUNK_BUCKET_WIDTH + h % CHUNK_BUCKET_WIDTH)
                _BIN_CACHE[t] = vals[i] = v
    return np.array(vals, dtype=np.int64)


def token_bins(tokens: Iterable[bytes], flat: bool = False) -> np.ndarray:
    """Vectorised ``token_bin`` over a token list, memoised per token."""
    packed = _packed_bins(list(tokens))
    return packed // N_BINS if flat else packed % N_BINS


@dataclass
class ChunkedBags:
    counts: np.ndarray  # (16, 1024)
    doc_token_count: int


@dataclass
class FlatBag:
    counts: np.ndarray  # (16384,)


def bag_chunks(stream: TokenStream, plan: ChunkPlan | None = None,
               n_bins: int = N_BINS) -> ChunkedBags:
    if plan is None:
        plan = plan_chunks(len(stream))
    steps = len(plan.ranges)
    width = n_bins // N_BUCKETS
    if width == CHUNK_BUCKET_WIDTH:
        bins = token_bins(stream.tokens)
    else:
        bins = np.fromiter((token_bin(t, width) for t in stream.tokens), dtype=np.int64)
    idx = [np.arange(a, b) for a, b in plan.ranges]
    owner = np.repeat(np.arange(steps), [b - a for a, b in plan.ranges])
    covered = np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)
    flat_index = owner * n_bins + bins[covered] if len(covered) else np.zeros(0, dtype=np.int64)
    counts = np.bincount(flat_index, minlength=steps * n_bins).astype(np.float64)
    return ChunkedBags(counts.reshape(steps, n_bins), len(stream))


def bag_flat(stream: TokenStream) -> FlatBag:
    bins = token_bins(stream.tokens, flat=True)
    return FlatBag(np.bincount(bins, minlength=FLAT_DIMS).astype(np.float64))


def featurize(document: bytes) -> Tuple[ChunkedBags, FlatBag]:
    """Both representations of one document from a single tokenization."""
    stream = tokenize(document)
    return bag_chunks(stream), bag_flat(stream)


# Feature cache: 16-byte header, then one record per document:
# 32-byte SHA256 digest + 16*1024 little-endian float32 counts.
CACHE_MAGIC = b"WIFEATC\x00"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<8sII")
_DIGEST_LEN = 32


class CacheFormatError(ValueError):
    pass


def document_digest(document: bytes) -> bytes:
    return hashlib.sha256(document).digest()


def write_feature_cache(path: Union[str, Path],
                        records: Iterable[Tuple[bytes, np.ndarray]]) -> int:
    """Write (sha256 digest, 16x1024 counts) records. Returns the record count."""
    records = list(records)
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, len(records)))
        for digest, counts in records:
            if len(digest) != _DIGEST_LEN:
                raise CacheFormatError(f"digest must be {_DIGEST_LEN} bytes")
            arr = np.asarray(counts, dtype="<f4")
            if arr.shape != (N_CHUNKS, N_BINS):
                raise CacheFormatError(f"counts must be {(N_CHUNKS, N_BINS)}, got {arr.shape}")
            fh.write(digest)
            fh.write(arr.tobytes(order="C"))
    return len(records)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CacheFormatError("truncated feature cache")
    return buf


def iter_feature_cache(path: Union[str, Path]) -> Iterator[Tuple[bytes, np.ndarray]]:
    with open(path, "rb") as fh:
        magic, version, count = _CACHE_HEADER.unpack(_read_exact(fh, _CACHE_HEADER.size))
        if magic != CACHE_MAGIC:
            raise CacheFormatError(f"bad magic {magic!r}")
        if version != CACHE_VERSION:
            raise CacheFormatError(f"unsupported cache version {version}")
        nbytes = N_CHUNKS * N_BINS * 4
        for _ in range(count):
            digest = _read_exact(fh, _DIGEST_LEN)
            counts = np.frombuffer(_read_exact(fh, nbytes), dtype="<f4").reshape(N_CHUNKS, N_BINS)
            yield digest, counts
        if fh.read(1):
            raise CacheFormatError("trailing bytes after last record")


def read_feature_cache(path: Union[str, Path]) -> List[Tuple[bytes, np.ndarray]]:
    return list(iter_feature_cache(path))


def document_indices(document: bytes) -> Tuple[np.ndarray, np.ndarray, int]:
    """Per-token indices into the rasterised 16x1024 tensor and the flat bag.

    Chunk indices cover only tokens kept by the chunk plan; flat indices
    cover every token.
    """
    stream = tokenize(document)
    if not stream.tokens:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, 0
    n = len(stream.tokens)
    packed = _packed_bins(stream.tokens)
    plan = plan_chunks(n)
    covered = np.concatenate([np.arange(a, b) for a, b in plan.ranges])
    owner = np.repeat(np.arange(len(plan.ranges)), [b - a for a, b in plan.ranges])
    return owner * N_BINS + packed[covered] % N_BINS, packed // N_BINS, n


def featurize_many(documents: Sequence[bytes], pool=None, need_chunked: bool = True,
                   need_flat: bool = True):
    """Dense float32 features for a batch: ``(B, 16, 1024)`` chunk counts and ``(B, 16384)`` bags.

    ``pool`` is an optional executor; results keep document order either way.
    """
    mapper = pool.map if pool is not None else map
    idx = list(mapper(document_indices, documents))
    chunked = flat = None
    if need_chunked:
        chunked = np.zeros((len(idx), FLAT_DIMS), dtype=np.float32)
        for row, (ci, _, _) in zip(chunked, idx):
            row += np.bincount(ci, minlength=FLAT_DIMS)
        chunked = chunked.reshape(len(idx), N_CHUNKS, N_BINS)
    if need_flat:
        flat = np.zeros((len(idx), FLAT_DIMS), dtype=np.float32)
        for row, (_, fi, _) in zip(flat, idx):
            row += np.bincount(fi, minlength=FLAT_DIMS)
    return chunked, flat


def _to_csr(index_lists: List[np.ndarray]) -> sp.csr_matrix:
    indptr = [0]
    cols, vals = [], []
    for ind in index_lists:
        u, c = np.unique(ind, return_counts=True)
        cols.append(u)
        vals.append(c.astype(np.float32))
        indptr.append(indptr[-1] + len(u))
    col = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    val = np.concatenate(vals) if vals else np.zeros(0, dtype=np.float32)
    return sp.csr_matrix((val, col, np.asarray(indptr)), shape=(len(index_lists), FLAT_DIMS))


def featurize_sparse(documents: Iterable[bytes], pool=None):
    """Sparse chunk and flat features plus per-document token counts."""
    mapper = pool.map if pool is not None else map
    idx = list(mapper(document_indices, documents))
    chunked = _to_csr([ci for ci, _, _ in idx])
    flat = _to_csr([fi for _, fi, _ in idx])
    return chunked, flat, np.array([n for _, _, n in idx], dtype=np.int64)
