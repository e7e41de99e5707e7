"""Online Gaussian-splatting mapping from tracked camera poses and sparse points."""

from .consistency import OptimizerConfig, SelectionConfig
from .gaussians import Gaussian, GaussianMap
from .geometry import Intrinsics, Pose
from .management import FrameInput, GroundTruthDepth, ManagementConfig, NearestTrackedDepth
from .mohv import Mohv, MohvConfig
from .pipeline import Mapper, PipelineConfig, RunReport, run_pipeline
from .rasterizer import render, render_backward
from .synth import PRESETS, SynthConfig, synth_scene

__all__ = [
    "FrameInput", "Gaussian", "GaussianMap", "GroundTruthDepth", "Intrinsics", "ManagementConfig",
    "Mapper", "Mohv", "MohvConfig", "NearestTrackedDepth", "OptimizerConfig", "PRESETS",
    "PipelineConfig", "Pose", "RunReport", "SelectionConfig", "SynthConfig", "render",
    "render_backward", "run_pipeline", "synth_scene",
]
