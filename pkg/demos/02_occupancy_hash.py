"""Multi-level occupancy hashing turns a flood of candidate points into a sparse map.

Candidate Gaussians arrive with a level chosen from their size. A candidate is
kept only when its cell is not yet occupied at its own level; kept candidates
mark their cell at every coarser level as well. Storage is a fixed bit array.
"""

import numpy as np

from splatmap.mohv import Mohv, MohvConfig

cfg = MohvConfig(levels=4, s_init=0.5, n=64)
grid = Mohv(cfg)
rng = np.random.default_rng(0)
print(f"storage: {grid.storage_bits} bits for {cfg.levels} levels of {cfg.n}^3 slots")
for batch in range(4):
    pts = rng.uniform(-1.0, 1.0, (20_000, 3))
    level = cfg.levels - 1
    kept = grid.filter_candidates(pts, level)
    print(f"batch {batch}: {len(pts)} candidates at level {level} "
          f"(voxel {cfg.voxel_size(level):.4f}), kept {len(kept)}")
print("later batches keep fewer points because their voxels are already occupied")
