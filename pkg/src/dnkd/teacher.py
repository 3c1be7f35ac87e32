"""Teacher distributions built from retrieved neighbors.

The neighbor cache keeps raw (distance, token) pairs so the temperature
can be swept without repeating retrieval.
"""

from dataclasses import dataclass
import math
import struct

import numpy as np

from . import binfmt
from .datastore import NeighborSet
from .errors import (
    ChecksumError,
    DimensionMismatch,
    EmptyNeighborSet,
    InvalidArgument,
    MissingInput,
)

MAGIC = b"NKNC"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")
# Padding for positions that retrieved fewer than k neighbors.
PAD_TOKEN = 0xFFFFFFFF


@dataclass
class SparseDistribution:
    """Probability mass over a small support; tokens ascending."""

    tokens: np.ndarray
    probs: np.ndarray
    vocab_size: int

    def as_dict(self):
        return {int(t): float(p) for t, p in zip(self.tokens, self.probs)}

    def mass(self, token):
        hit = np.flatnonzero(self.tokens == token)
        return float(self.probs[hit[0]]) if len(hit) else 0.0

    def dense(self):
        out = np.zeros(self.vocab_size)
        out[self.tokens] = self.probs
        return out


def _check_tau(tau):
    tau = float(tau)
    if not tau > 0 or not math.isfinite(tau):
        raise InvalidArgument(f"temperature must be positive and finite, got {tau}")
    return tau


def teacher_distribution(ns, tau, vocab_size):
    """Softmax of ``-d / tau`` over neighbors, summed per token."""
    tau = _check_tau(tau)
    if isinstance(ns, NeighborSet):
        d = np.asarray(ns.distances, dtype=np.float64)
        v = np.asarray(ns.values, dtype=np.int64)
    else:
        pairs = list(ns)
        d = np.array([p[0] for p in pairs], dtype=np.float64)
        v = np.array([p[1] for p in pairs], dtype=np.int64)
    if len(d) == 0:
        raise EmptyNeighborSet("teacher distribution needs at least one neighbor")
    if not np.all(np.isfinite(d)):
        raise InvalidArgument("non-finite neighbor distance")
    if v.min() < 0 or v.max() >= vocab_size:
        raise InvalidArgument("neighbor token outside the vocabulary")
    scores = -d / tau
    w = np.exp(scores - scores.max())
    tokens, inv = np.unique(v, return_inverse=True)
    mass = np.bincount(inv, weights=w, minlength=len(tokens))
    return SparseDistribution(tokens, mass / mass.sum(), int(vocab_size))


def entropy(dist):
    """Shannon entropy in nats."""
    p = np.asarray(dist.probs, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def teacher_slots(distances, tokens, tau):
    """Vectorized teacher for a cache slice.

    ``distances``/``tokens`` are ``(P, k)`` with padded slots marked by
    ``PAD_TOKEN``. Returns ``(P, k)`` token ids and probabilities where each
    token's aggregated mass sits in its first slot and repeated or padded
    slots carry zero. Row sums are 1.
    """
    tau = _check_tau(tau)
    d = np.asarray(distances, dtype=np.float64)
    t = np.asarray(tokens, dtype=np.int64)
    valid = t != PAD_TOKEN
    if not np.all(valid[:, 0]):
        raise EmptyNeighborSet("cache row without neighbors")
    scores = np.where(valid, -d / tau, -np.inf)
    w = np.exp(scores - scores.max(axis=1, keepdims=True))
    same = (t[:, :, None] == t[:, None, :]) & valid[:, :, None] & valid[:, None, :]
    agg = np.einsum("pij,pj->pi", same, w)
    k = t.shape[1]
    earlier = np.tril(np.ones((k, k), dtype=bool), -1)
    first = valid & ~np.any(same & earlier[None], axis=2)
    probs = np.where(first, agg, 0.0)
    probs /= probs.sum(axis=1, keepdims=True)
    return np.where(valid, t, 0), probs


@dataclass
class NeighborCache:
    """Per-position neighbors for a corpus, in corpus order."""

    origins: np.ndarray  # (P, 2) uint32
    distances: np.ndarray  # (P, k) float64, +inf where padded
    tokens: np.ndarray  # (P, k) uint32, PAD_TOKEN where padded
    k: int
    datastore_crc: int

    def __len__(self):
        return len(self.origins)

    def neighbor_set(self, row):
        valid = self.tokens[row] != PAD_TOKEN
        return NeighborSet(
            self.distances[row][valid],
            self.tokens[row][valid],
            np.zeros((int(valid.sum()), 2), np.uint32),
            np.full(int(valid.sum()), -1),
            self.k,
        )

    def truncate(self, k):
        if k > self.k:
            raise InvalidArgument(f"cache holds k={self.k}, cannot serve k={k}")
        return NeighborCache(self.origins, self.distances[:, :k], self.tokens[:, :k], k, self.datastore_crc)

    def require_store(self, store):
        if store.checksum() != self.datastore_crc:
            raise ChecksumError(
                f"neighbor cache was built from datastore {self.datastore_crc:08x}, "
                f"got {store.checksum():08x}"
            )

    def to_bytes(self):
        rec = np.dtype([("origin", "<u4", (2,)), ("nb", [("d", "<f8"), ("t", "<u4")], (self.k,))])
        recs = np.empty(len(self), dtype=rec)
        recs["origin"] = self.origins
        recs["nb"]["d"] = self.distances
        recs["nb"]["t"] = self.tokens
        header = _HEADER.pack(MAGIC, VERSION, self.k, self.datastore_crc, len(self))
        return binfmt.seal(header + recs.tobytes())

    def save(self, path):
        binfmt.write_atomic(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, data):
        binfmt.check_prefix(data, MAGIC, VERSION, _HEADER.size)
        _, _, k, crc, n = _HEADER.unpack_from(data)
        rec = np.dtype([("origin", "<u4", (2,)), ("nb", [("d", "<f8"), ("t", "<u4")], (k,))])
        binfmt.check_body(data, _HEADER.size + n * rec.itemsize)
        recs = np.frombuffer(data, dtype=rec, count=n, offset=_HEADER.size)
        return cls(
            np.array(recs["origin"], dtype=np.uint32),
            np.array(recs["nb"]["d"], dtype=np.float64),
            np.array(recs["nb"]["t"], dtype=np.uint32),
            int(k),
            int(crc),
        )

    @classmethod
    def load(cls, path):
        try:
            with open(path, "rb") as fh:
                return cls.from_bytes(fh.read())
        except FileNotFoundError:
            raise MissingInput(f"missing neighbor cache: {path}") from None


def precompute_neighbor_cache(store, keys, origins, k, self_exclude=False):
    """Retrieve ``k`` neighbors for every position ahead of training.

    ``keys`` holds one context vector per target position and ``origins``
    the matching (sentence, position) pairs. With ``self_exclude`` the
    entry sharing a position's origin is removed from its candidates.
    """
    keys = np.asarray(keys, dtype=np.float32)
    origins = np.asarray(origins, dtype=np.int64).reshape(-1, 2)
    if keys.ndim != 2 or keys.shape[1] != store.dim:
        raise DimensionMismatch(f"trace vectors must have dim {store.dim}, got {keys.shape}")
    if len(keys) != len(origins):
        raise MissingInput("every trace position needs an origin")
    if len(keys) == 0:
        raise MissingInput("no trace positions to cache")
    excludes = [tuple(o) for o in origins] if self_exclude else None
    results = store.query_batch(keys, k, excludes)
    dist = np.full((len(keys), k), np.inf)
    tok = np.full((len(keys), k), PAD_TOKEN, dtype=np.uint32)
    for i, ns in enumerate(results):
        dist[i, : len(ns)] = ns.distances
        tok[i, : len(ns)] = ns.values
    return NeighborCache(origins.astype(np.uint32), dist, tok, int(k), store.checksum())
