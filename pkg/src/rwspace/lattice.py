"""Lattice site bookkeeping: canonical step sets, packed site keys, and
L1-ball enumeration.

Sites are (S, d) int64 arrays. For O(log S) vectorized membership queries a
site is packed into a single uint64 key by concatenating offset coordinate
fields; packing is lexicographically monotone, so arrays sorted by key stay
sorted under constant shifts.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import WindowBoundsError


@dataclass(frozen=True)
class StepSet:
    """The 2d nearest-neighbor steps of Z^d in canonical order
    (+e1, -e1, +e2, -e2, ...). The order is part of every serialized
    artifact, so index <-> step mappings survive round trips."""

    d: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"dimension must be positive, got {self.d}")

    @property
    def count(self) -> int:
        return 2 * self.d

    @property
    def steps(self) -> np.ndarray:
        """(2d, d) int64 array of unit steps in canonical order."""
        return _steps_array(self.d)

    def index_of(self, z) -> int:
        z = np.asarray(z, dtype=np.int64)
        matches = np.nonzero((self.steps == z).all(axis=1))[0]
        if matches.size != 1:
            raise ValueError(f"{z.tolist()} is not a unit step in d={self.d}")
        return int(matches[0])

    def opposite(self, i: int) -> int:
        return i ^ 1  # +e_k and -e_k are adjacent in canonical order


@lru_cache(maxsize=None)
def _steps_array(d: int) -> np.ndarray:
    steps = np.zeros((2 * d, d), dtype=np.int64)
    for k in range(d):
        steps[2 * k, k] = 1
        steps[2 * k + 1, k] = -1
    steps.setflags(write=False)
    return steps


def coord_bits(d: int) -> int:
    return min(21, 62 // d)


def pack_sites(sites: np.ndarray, d: int) -> np.ndarray:
    """Pack (S, d) sites into sorted-order-preserving uint64 keys."""
    bits = coord_bits(d)
    half = 1 << (bits - 1)
    sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
    if np.any(np.abs(sites) >= half):
        raise WindowBoundsError(
            f"site coordinate exceeds packing range +-{half} in d={d}")
    keys = np.zeros(sites.shape[0], dtype=np.uint64)
    for k in range(d):
        keys = (keys << np.uint64(bits)) | (sites[:, k] + half).astype(np.uint64)
    return keys


def sort_sites(sites: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (sites_sorted, keys_sorted) with rows ordered by packed key."""
    sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
    keys = pack_sites(sites, d)
    order = np.argsort(keys, kind="stable")
    return sites[order], keys[order]


def lookup_rows(keys_sorted: np.ndarray, query_sites: np.ndarray, d: int,
                missing: str = "raise") -> np.ndarray:
    """Row indices of query sites in a key-sorted site array.

    missing="raise" raises WindowBoundsError naming the first absent site;
    missing="mask" returns -1 for absent sites instead.
    """
    q = pack_sites(query_sites, d)
    if len(keys_sorted) == 0:
        idx_c = np.zeros(len(q), dtype=np.intp)
        ok = np.zeros(len(q), dtype=bool)
    else:
        idx = np.searchsorted(keys_sorted, q)
        idx_c = np.minimum(idx, len(keys_sorted) - 1)
        ok = keys_sorted[idx_c] == q
    if missing == "mask":
        return np.where(ok, idx_c, -1)
    if not np.all(ok):
        bad = np.atleast_2d(np.asarray(query_sites))[np.nonzero(~ok)[0][0]]
        raise WindowBoundsError(f"site {bad.tolist()} not present in level")
    return idx_c


@lru_cache(maxsize=256)
def _l1_ball_cached(d: int, r: int) -> np.ndarray:
    if r < 0:
        return np.zeros((0, d), dtype=np.int64)
    grids = np.meshgrid(*([np.arange(-r, r + 1, dtype=np.int64)] * d),
                        indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    pts = pts[np.abs(pts).sum(axis=1) <= r]
    pts, _ = sort_sites(pts, d)
    pts.setflags(write=False)
    return pts


def l1_ball(d: int, r: int, center=None) -> np.ndarray:
    """All lattice sites with |x - center|_1 <= r, sorted by packed key."""
    pts = _l1_ball_cached(d, int(r))
    if center is None:
        return pts
    return pts + np.asarray(center, dtype=np.int64)


def l1_ball_size(d: int, r: int) -> int:
    return _l1_ball_cached(d, int(r)).shape[0]
