"""Exact key-value datastore with squared-L2 top-k retrieval.

Keys are float32 rows kept contiguously; distances are accumulated in
float64. A query first ranks entries with a BLAS expansion
``|k|^2 - 2 k.q + |q|^2`` and keeps every entry that could belong to the
top-k given a rigorous bound on that expansion's rounding error. The
survivors are rescored exactly by summing squared coordinate differences
left to right, then ordered by (distance, insertion index). The result is
therefore identical to a plain linear scan, ties included.
"""

from dataclasses import dataclass
import struct

import numpy as np

from . import binfmt
from .errors import (
    DimensionMismatch,
    DuplicateOrigin,
    EmptyDatastore,
    InvalidArgument,
    VocabRangeError,
)

MAGIC = b"NKDS"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")

# Rows of the score matrix processed per BLAS call.
_QUERY_BLOCK = 256
_EPS64 = np.finfo(np.float64).eps


def _entry_dtype(dim):
    return np.dtype([("key", "<f4", (dim,)), ("value", "<u4"), ("origin", "<u4", (2,))])


@dataclass
class NeighborSet:
    """The neighbors of one query, nearest first.

    ``indices`` are insertion indices into the datastore; ``origins`` has
    shape ``(n, 2)``.
    """

    distances: np.ndarray
    values: np.ndarray
    origins: np.ndarray
    indices: np.ndarray
    k: int

    def __len__(self):
        return len(self.distances)

    def pairs(self):
        return [(float(d), int(v)) for d, v in zip(self.distances, self.values)]

    def truncate(self, k):
        """Top-``k`` prefix; equal to a fresh ``k`` query under the tie rule."""
        return NeighborSet(self.distances[:k], self.values[:k], self.origins[:k], self.indices[:k], k)


class Datastore:
    """Ordered collection of (key, value, origin) entries.

    Construction is single-writer; once populated the store is only read
    and can be queried from several threads.
    """

    def __init__(self, dim, vocab_size):
        if int(dim) < 1:
            raise InvalidArgument(f"dim must be >= 1, got {dim}")
        if int(vocab_size) < 2:
            raise InvalidArgument(f"vocab_size must be >= 2, got {vocab_size}")
        self.dim = int(dim)
        self.vocab_size = int(vocab_size)
        self._n = 0
        self._keys = np.empty((0, self.dim), dtype=np.float32)
        self._values = np.empty(0, dtype=np.uint32)
        self._origins = np.empty((0, 2), dtype=np.uint32)
        self._origin_index = {}
        self._norms = None
        self._keys64 = None
        self._crc = None

    def __len__(self):
        return self._n

    @property
    def keys(self):
        return self._keys[: self._n]

    @property
    def values(self):
        return self._values[: self._n]

    @property
    def origins(self):
        return self._origins[: self._n]

    def _reserve(self, extra):
        need = self._n + extra
        cap = len(self._values)
        if need <= cap:
            return
        cap = max(need, 2 * cap, 1024)
        keys = np.empty((cap, self.dim), dtype=np.float32)
        keys[: self._n] = self._keys[: self._n]
        values = np.empty(cap, dtype=np.uint32)
        values[: self._n] = self._values[: self._n]
        origins = np.empty((cap, 2), dtype=np.uint32)
        origins[: self._n] = self._origins[: self._n]
        self._keys, self._values, self._origins = keys, values, origins

    def add_entry(self, key, value, origin):
        self.add_entries(np.asarray(key, dtype=np.float32)[None, :], [value], [origin])
        return self

    def add_entries(self, keys, values, origins):
        """Append a block of entries; validated as a whole before any write."""
        keys = np.asarray(keys, dtype=np.float32)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise DimensionMismatch(f"keys must have shape (n, {self.dim}), got {keys.shape}")
        values = np.asarray(values, dtype=np.int64).reshape(-1)
        origins = np.asarray(origins, dtype=np.int64).reshape(-1, 2)
        n = keys.shape[0]
        if len(values) != n or len(origins) != n:
            raise InvalidArgument("keys, values and origins differ in length")
        if n and (values.min() < 0 or values.max() >= self.vocab_size):
            raise VocabRangeError(f"value out of range [0, {self.vocab_size})")
        if n and (origins.min() < 0 or origins.max() > 0xFFFFFFFF):
            raise InvalidArgument("origin components must fit in 32 bits")
        new = [(int(a), int(b)) for a, b in origins]
        seen = set()
        for o in new:
            if o in self._origin_index or o in seen:
                raise DuplicateOrigin(f"duplicate origin {o}")
            seen.add(o)
        self._reserve(n)
        self._keys[self._n : self._n + n] = keys
        self._values[self._n : self._n + n] = values
        self._origins[self._n : self._n + n] = origins
        for i, o in enumerate(new):
            self._origin_index[o] = self._n + i
        self._n += n
        self._norms = None
        self._keys64 = None
        self._crc = None
        return self

    def index_of(self, origin):
        return self._origin_index.get((int(origin[0]), int(origin[1])))

    # -- retrieval ---------------------------------------------------------

    def _key_norms(self):
        if self._norms is None:
            self._keys64 = self.keys.astype(np.float64)
            self._norms = np.einsum("ij,ij->i", self._keys64, self._keys64)
        return self._norms

    def query(self, q, k, exclude_origin=None):
        return self.query_batch([q], k, [exclude_origin])[0]

    def query_batch(self, qs, k, excludes=None):
        """Run ``query`` for each row of ``qs``; results are in input order."""
        k = int(k)
        if k < 1:
            raise InvalidArgument(f"k must be >= 1, got {k}")
        qs = np.asarray(qs, dtype=np.float32)
        if qs.size == 0 and (qs.ndim < 2 or qs.shape[0] == 0):
            return []
        if qs.ndim != 2 or qs.shape[1] != self.dim:
            raise DimensionMismatch(f"queries must have shape (m, {self.dim}), got {qs.shape}")
        if self._n == 0:
            raise EmptyDatastore("query against an empty datastore")
        if excludes is None:
            excludes = [None] * len(qs)
        if len(excludes) != len(qs):
            raise InvalidArgument("excludes must match the number of queries")
        skip = np.array(
            [-1 if e is None else (self.index_of(e) if self.index_of(e) is not None else -1) for e in excludes],
            dtype=np.int64,
        )
        out = []
        for start in range(0, len(qs), _QUERY_BLOCK):
            sl = slice(start, start + _QUERY_BLOCK)
            out.extend(self._search_block(qs[sl], k, skip[sl]))
        return out

    def _search_block(self, qs, k, skip):
        norms, k64 = self._key_norms(), self._keys64
        q64 = qs.astype(np.float64)
        qn = np.einsum("ij,ij->i", q64, q64)
        approx = norms[None, :] - 2.0 * (q64 @ k64.T) + qn[:, None]
        # Each expansion term carries at most ~dim ulps of its magnitude.
        slack = 4.0 * (self.dim + 4) * _EPS64 * (norms.max() + qn)
        m = len(qs)
        rows = np.arange(m)
        has_skip = skip >= 0
        approx[rows[has_skip], skip[has_skip]] = np.inf
        eligible = self._n - has_skip.astype(np.int64)
        kk = np.minimum(k, eligible)

        cand_q, cand_i = [], []
        for r in range(m):
            if kk[r] == 0:
                continue
            row = approx[r]
            if kk[r] < self._n:
                kth = np.partition(row, kk[r] - 1)[kk[r] - 1]
            else:
                kth = row[np.isfinite(row)].max()
            idx = np.flatnonzero(row <= kth + 2.0 * slack[r])
            if has_skip[r]:
                idx = idx[idx != skip[r]]
            cand_i.append(idx)
            cand_q.append(np.full(len(idx), r))
        if not cand_i:
            return [self._empty(k) for _ in range(m)]
        cand_i = np.concatenate(cand_i)
        cand_q = np.concatenate(cand_q)
        diff = k64[cand_i] - q64[cand_q]
        # cumsum accumulates strictly left to right, unlike np.sum.
        exact = np.cumsum(diff * diff, axis=1)[:, -1]
        order = np.lexsort((cand_i, exact, cand_q))
        cand_i, cand_q, exact = cand_i[order], cand_q[order], exact[order]
        bounds = np.searchsorted(cand_q, np.arange(m + 1))
        result = []
        for r in range(m):
            lo = bounds[r]
            hi = min(bounds[r + 1], lo + kk[r])
            idx = cand_i[lo:hi]
            result.append(
                NeighborSet(
                    distances=exact[lo:hi].copy(),
                    values=self._values[idx].copy(),
                    origins=self._origins[idx].copy(),
                    indices=idx.copy(),
                    k=k,
                )
            )
        return result

    def _empty(self, k):
        return NeighborSet(
            np.empty(0), np.empty(0, np.uint32), np.empty((0, 2), np.uint32), np.empty(0, np.int64), k
        )

    # -- persistence -------------------------------------------------------

    def to_bytes(self):
        recs = np.empty(self._n, dtype=_entry_dtype(self.dim))
        recs["key"] = self.keys
        recs["value"] = self.values
        recs["origin"] = self.origins
        header = _HEADER.pack(MAGIC, VERSION, self.dim, self.vocab_size, self._n)
        return binfmt.seal(header + recs.tobytes())

    def checksum(self):
        """CRC32 of the serialized store, as written in the file trailer."""
        if self._crc is None:
            data = self.to_bytes()
            self._crc = struct.unpack_from("<I", data, len(data) - 4)[0]
        return self._crc

    def save(self, path):
        binfmt.write_atomic(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, data):
        binfmt.check_prefix(data, MAGIC, VERSION, _HEADER.size)
        _, _, dim, vocab_size, n = _HEADER.unpack_from(data)
        dtype = _entry_dtype(dim)
        binfmt.check_body(data, _HEADER.size + n * dtype.itemsize)
        recs = np.frombuffer(data, dtype=dtype, count=n, offset=_HEADER.size)
        store = cls(dim, vocab_size)
        store._reserve(n)
        store._keys[:n] = recs["key"]
        store._values[:n] = recs["value"]
        store._origins[:n] = recs["origin"]
        store._n = n
        store._origin_index = {(int(a), int(b)): i for i, (a, b) in enumerate(store.origins)}
        if len(store._origin_index) != n:
            raise DuplicateOrigin("file contains duplicate origins")
        store._crc = struct.unpack_from("<I", data, len(data) - 4)[0]
        return store

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def build(dim, vocab_size):
    return Datastore(dim, vocab_size)
