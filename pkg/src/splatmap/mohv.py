"""Multi-level occupancy hash voxels.

Level 0 is the coarsest, with voxel edge ``s_init``; each finer level halves the
edge. Every level owns a fixed table of ``n**3`` occupancy bits addressed by a
spatial hash of the integer voxel coordinate, so memory stays at ``L * n**3``
bits no matter how many points are inserted. Hash collisions can only make a
free voxel look occupied, which errs toward pruning.

An ``exact`` mode keeps true voxel-coordinate sets instead of hashed bits. It
exists as a reference for testing the hashed mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import LevelOutOfRange, NonPositiveScale

HASH_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)


@dataclass(frozen=True)
class MohvConfig:
    levels: int = 6
    s_init: float = 0.64
    n: int = 64

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if not self.s_init > 0:
            raise ValueError("s_init must be positive")
        if self.n < 2:
            raise ValueError("n must be >= 2")

    def voxel_size(self, level):
        return self.s_init / 2.0**level


def hash_slots(coords, n):
    """Vectorised spatial hash of integer coordinates ``(..., 3)`` into ``[0, n**3)``."""
    c = np.asarray(coords, dtype=np.int64).view(np.uint64)
    h = (c[..., 0] * HASH_PRIMES[0]) ^ (c[..., 1] * HASH_PRIMES[1]) ^ (c[..., 2] * HASH_PRIMES[2])
    return (h % np.uint64(n**3)).astype(np.int64)


def hash_slot(coord, n) -> int:
    return int(hash_slots(np.asarray(coord, dtype=np.int64).reshape(1, 3), n)[0])


class Mohv:
    def __init__(self, config: MohvConfig = MohvConfig(), mode: str = "hashed"):
        if mode not in ("hashed", "exact"):
            raise ValueError(f"unknown mode {mode!r}")
        self.config = config
        self.mode = mode
        slots = config.n**3
        if mode == "hashed":
            self._bits = np.zeros((config.levels, (slots + 7) // 8), dtype=np.uint8)
        else:
            self._sets = [set() for _ in range(config.levels)]

    @property
    def storage_bits(self) -> int:
        """Occupancy bits held by the hashed tables (fixed at construction)."""
        if self.mode != "hashed":
            raise ValueError("storage bound only applies to hashed mode")
        return self.config.levels * self.config.n**3

    @property
    def nbytes(self) -> int:
        return int(self._bits.nbytes) if self.mode == "hashed" else 0

    def _check_level(self, level):
        if not 0 <= level < self.config.levels:
            raise LevelOutOfRange(f"level {level} outside [0, {self.config.levels - 1}]")

    def voxel_coord(self, p, level):
        self._check_level(level)
        return voxel_coords(np.asarray(p, dtype=np.float64), self.config.voxel_size(level))

    def _coords(self, points, level):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.stack([voxel_coords(points, self.config.voxel_size(k))
                         for k in range(level + 1)], axis=1)  # (P, level+1, 3)

    def _keys(self, points, level):
        """Per-point, per-level keys for levels ``0..level``: slots or coordinate tuples."""
        coords = self._coords(points, level)
        if self.mode == "hashed":
            return hash_slots(coords, self.config.n).tolist()
        return [[tuple(c) for c in row] for row in coords.tolist()]

    def _is_set(self, k, key):
        if self.mode == "hashed":
            return bool(self._bits[k, key >> 3] & (1 << (key & 7)))
        return key in self._sets[k]

    def _set(self, k, key):
        if self.mode == "hashed":
            self._bits[k, key >> 3] |= np.uint8(1 << (key & 7))
        else:
            self._sets[k].add(key)

    def occupied(self, p, level) -> bool:
        """Raw occupancy of the single voxel at ``level`` containing ``p``."""
        self._check_level(level)
        return self._is_set(level, self._keys(p, level)[0][level])

    def update(self, p, level):
        """Mark the voxels containing ``p`` at every level from 0 to ``level``."""
        self._check_level(level)
        for k, key in enumerate(self._keys(p, level)[0]):
            self._set(k, key)

    def query(self, p, level) -> bool:
        """AND of occupancy over levels 0..``level`` at ``p``."""
        self._check_level(level)
        return all(self._is_set(k, key) for k, key in enumerate(self._keys(p, level)[0]))

    def filter_candidates(self, points, level):
        """Indices of points kept, scanning in order and marking each kept point at once."""
        self._check_level(level)
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            return []
        if self.mode == "hashed":
            slots = hash_slots(self._coords(points, level), self.config.n)
            return np.flatnonzero(_filter_hashed(self._bits, slots)).tolist()
        kept = []
        for i, keys in enumerate(self._keys(points, level)):
            if all(self._is_set(k, key) for k, key in enumerate(keys)):
                continue
            for k, key in enumerate(keys):
                self._set(k, key)
            kept.append(i)
        return kept

    def level_for_scale(self, scale) -> int:
        if not scale > 0:
            raise NonPositiveScale(f"scale must be positive, got {scale}")
        lvl = math.floor(math.log2(self.config.s_init / scale))
        return int(min(max(lvl, 0), self.config.levels - 1))


@numba.njit(cache=True)
def _filter_hashed(bits, slots):
    """Sequential check-then-mark over precomputed slots ``(P, levels)``."""
    kept = np.zeros(slots.shape[0], dtype=np.bool_)
    for i in range(slots.shape[0]):
        occupied = True
        for k in range(slots.shape[1]):
            key = slots[i, k]
            if not (bits[k, key >> 3] >> (key & 7)) & 1:
                occupied = False
                break
        if not occupied:
            kept[i] = True
            for k in range(slots.shape[1]):
                key = slots[i, k]
                bits[k, key >> 3] |= np.uint8(1 << (key & 7))
    return kept


def voxel_coords(points, voxel):
    return np.floor(np.asarray(points, dtype=np.float64) / voxel).astype(np.int64)


def voxel_coord(p, level, s_init):
    """Integer voxel coordinate of ``p`` at ``level`` for coarsest edge ``s_init``."""
    return voxel_coords(p, s_init / 2.0**level)
