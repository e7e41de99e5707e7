"""Map a short synthetic orbit end to end and export the result.

A textured plane is observed by an orbiting camera with known poses and a
sparse tracker. The mapper seeds Gaussians, prunes them with the occupancy
hash and jointly optimizes map and keyframe poses. A smaller scene than the
acceptance run keeps this under a couple of minutes.
"""

import dataclasses
import sys
import tempfile
from pathlib import Path

from splatmap.io import export_ply
from splatmap.management import GroundTruthDepth
from splatmap.pipeline import PipelineConfig, run_pipeline
from splatmap.synth import PRESETS, synth_scene

frames = int(sys.argv[1]) if len(sys.argv) > 1 else 16
scene = synth_scene(dataclasses.replace(PRESETS["plane"], frames=frames, image_size=64))
report, mapper = run_pipeline(scene.frames, PipelineConfig(), GroundTruthDepth(scene.depth_maps))
for row in report.rows:
    tag = "kf" if row["keyframe"] else "  "
    print(f"frame {row['index']:3d} {row['split']:8s} {tag} PSNR {row['psnr']:6.2f}")
agg = report.aggregates
print(f"keyframes {report.n_keyframes}, Gaussians {len(mapper.map)}")
print(f"train PSNR {agg['train_psnr']:.2f}, held-out PSNR {agg['heldout_psnr']:.2f}")
out = Path(tempfile.mkdtemp()) / "plane.ply"
export_ply(mapper.map, out)
print(f"wrote {out} ({out.stat().st_size} bytes)")
