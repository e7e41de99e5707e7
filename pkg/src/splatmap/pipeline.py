"""End-to-end online mapping driver and run reports."""

from __future__ import annotations

import json
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .consistency import (Keyframe, LocalBank, OptimizerConfig, SelectionConfig,
                          map_update_step, maybe_add_keyframe, post_refine)
from .gaussians import GaussianMap
from .management import (ManagementConfig, NearestTrackedDepth, SeedCandidates, densify,
                         error_compensation, seed_from_features)
from .metrics import mae, psnr, ssim
from .mohv import Mohv, MohvConfig
from .rasterizer import render

TIMING_STAGES = ("optimization", "view_selection", "depth_lookup", "mohv", "other")


@dataclass
class PipelineConfig:
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    mohv: MohvConfig = field(default_factory=MohvConfig)
    management: ManagementConfig = field(default_factory=ManagementConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    use_mohv: bool = True
    use_error_comp: bool = True
    auto_extent: bool = True
    heldout_every: int = 8
    post_refine_steps: int = 0
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)

    # flat key/value view used by config files and report echoes
    _SECTIONS = {"selection": "", "mohv": "mohv_", "management": "", "optimizer": ""}

    def to_flat(self) -> dict:
        out = {}
        for section, prefix in self._SECTIONS.items():
            for f in fields(getattr(self, section)):
                out[prefix + f.name] = getattr(getattr(self, section), f.name)
        for f in fields(self):
            if f.name not in self._SECTIONS:
                out[f.name] = getattr(self, f.name)
        return out

    @classmethod
    def flat_keys(cls):
        return cls().to_flat()

    @classmethod
    def from_flat(cls, values: dict) -> "PipelineConfig":
        """Build a config from flat keys; unknown keys raise ``KeyError``."""
        cfg = cls()
        known = cfg.to_flat()
        kw = {s: {} for s in cls._SECTIONS}
        top = {}
        for key, value in values.items():
            if key not in known:
                raise KeyError(key)
            for section, prefix in cls._SECTIONS.items():
                names = {f.name for f in fields(getattr(cfg, section))}
                name = key[len(prefix):] if key.startswith(prefix) else None
                if name in names and (prefix or not key.startswith("mohv_")):
                    kw[section][name] = value
                    break
            else:
                top[key] = value
        return cls(selection=SelectionConfig(**{**asdict(cfg.selection), **kw["selection"]}),
                   mohv=MohvConfig(**{**asdict(cfg.mohv), **kw["mohv"]}),
                   management=ManagementConfig(**{**asdict(cfg.management), **kw["management"]}),
                   optimizer=OptimizerConfig(**{**asdict(cfg.optimizer), **kw["optimizer"]}),
                   **top)


class StageTimer:
    """Accumulates wall time per named stage; nested stages are not double counted."""

    def __init__(self):
        self.totals = defaultdict(float)
        self._stack = []

    @contextmanager
    def __call__(self, name):
        now = time.perf_counter()
        if self._stack:
            parent, since = self._stack[-1]
            self.totals[parent] += now - since
        self._stack.append([name, now])
        try:
            yield
        finally:
            end = time.perf_counter()
            name, since = self._stack.pop()
            self.totals[name] += end - since
            if self._stack:
                self._stack[-1][1] = end


@dataclass
class RunReport:
    rows: list
    aggregates: dict
    gaussian_counts: list
    n_keyframes: int
    config: dict
    timings: dict = field(default_factory=dict)
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self, with_timings=False):
        d = {
            "rows": self.rows,
            "aggregates": self.aggregates,
            "gaussian_counts": self.gaussian_counts,
            "n_keyframes": self.n_keyframes,
            "config": jsonable(self.config),
            "extra": jsonable(self.extra),
        }
        if with_timings:
            d["timings"] = self.timings
            d["wall_time"] = self.wall_time
        return d

    def to_json(self, with_timings=False) -> str:
        return json.dumps(self.to_dict(with_timings), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(rows=d["rows"], aggregates=d["aggregates"], gaussian_counts=d["gaussian_counts"],
                   n_keyframes=d["n_keyframes"], config=d["config"], timings=d.get("timings", {}),
                   wall_time=d.get("wall_time", 0.0), extra=d.get("extra", {}))


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def aggregate_rows(rows, frames=None):
    """Mean metrics per split, in row order, optionally restricted to ``frames``."""
    out = {}
    for split in ("train", "heldout"):
        sel = [r for r in rows if r["split"] == split and (frames is None or r["index"] in frames)]
        for metric in ("psnr", "ssim", "mae"):
            out[f"{split}_{metric}"] = (float(np.mean([r[metric] for r in sel]))
                                        if sel else float("nan"))
    return out


class Mapper:
    """Online mapper: feeds frames through seeding, MOHV and joint optimisation."""

    def __init__(self, cfg: PipelineConfig = None, depth_provider=None):
        self.cfg = cfg or PipelineConfig()
        self.depth_provider = depth_provider or NearestTrackedDepth()
        self.map = GaussianMap()
        self.mohv = Mohv(self.cfg.mohv) if self.cfg.use_mohv else None
        self.keyframes: list[Keyframe] = []
        self.bank = LocalBank(self.cfg.selection.local_bank_size, self.cfg.selection.t_local)
        self.views = {}                   # frame index -> Keyframe-like view with refined pose
        self.rng = np.random.default_rng(self.cfg.seed)
        self.optimizer = OptimizerConfig(**asdict(self.cfg.optimizer))
        self.timer = StageTimer()
        self.gaussian_counts = []
        self.count_after = {}
        self.step_reports = []
        self.candidates_seen = 0
        self.post_steps = 0

    def is_heldout(self, frame):
        n = self.cfg.heldout_every
        return n > 0 and frame.index % n == n - 1

    def process_frame(self, frame) -> bool:
        """Run one frame through the online loop; returns whether it became a keyframe."""
        if self.is_heldout(frame):
            self._record_count(frame)
            return False
        timer = self.timer
        with timer("other"):
            if self.cfg.auto_extent and not self.keyframes and frame.n_tracked:
                self.optimizer.scene_extent = float(np.median(frame.tracked_depths))
            is_kf = maybe_add_keyframe(self.keyframes, frame, self.cfg.selection)
            if is_kf:
                kf = self.keyframes[-1]
                self.views[frame.index] = kf
                self._densify(kf)
                if len(self.map):
                    report = map_update_step(self.map, self.keyframes, self.bank, kf,
                                             self.cfg.selection, self.optimizer, self.rng,
                                             self.cfg.background, timer)
                    self.step_reports.append(report)
            view = self.views.get(frame.index)
            if view is None:
                view = Keyframe(frame=frame, err=self.cfg.selection.err_init)
            if self.bank.offer(view):
                self.views[frame.index] = view
        self._record_count(frame)
        return is_kf

    def _record_count(self, frame):
        self.gaussian_counts.append(len(self.map))
        self.count_after[frame.index] = len(self.map)

    def _densify(self, kf: Keyframe):
        frame = kf.frame
        mcfg = self.cfg.management
        cands = seed_from_features(frame)
        if self.cfg.use_error_comp:
            rendered = render(self.map, kf.pose, frame.K, self.cfg.background).image
            provider = _TimedProvider(self.depth_provider, self.timer)
            extra = error_compensation(frame, rendered, mcfg.k, mcfg.eps_e, provider,
                                       mcfg.grid_cells)
            cands = SeedCandidates.concat(cands, extra)
        self.candidates_seen += len(cands)
        with self.timer("mohv"):
            densify(self.map, self.mohv, frame, cands, mcfg)

    def finish(self, post_refine_steps=None):
        steps = self.cfg.post_refine_steps if post_refine_steps is None else post_refine_steps
        with self.timer("optimization"):
            post_refine(self.map, self.keyframes, steps, self.cfg.selection, self.optimizer,
                        self.rng, self.cfg.background, start=self.post_steps)
        self.post_steps += max(steps, 0)

    def eval_pose(self, frame):
        view = self.views.get(frame.index)
        return view.pose if view is not None else frame.pose

    def evaluate(self, frames):
        rows = []
        for frame in frames:
            out = render(self.map, self.eval_pose(frame), frame.K, self.cfg.background)
            img = np.clip(out.image, 0.0, 1.0)
            rows.append({
                "index": int(frame.index),
                "split": "heldout" if self.is_heldout(frame) else "train",
                "keyframe": frame.index in {kf.index for kf in self.keyframes},
                "psnr": psnr(img, frame.image),
                "ssim": ssim(img, frame.image),
                "mae": mae(img, frame.image),
                "gaussians": int(self.count_after.get(frame.index, len(self.map))),
            })
        return rows


class _TimedProvider:
    def __init__(self, inner, timer):
        self.inner = inner
        self.timer = timer

    def depths(self, frame, pixels):
        with self.timer("depth_lookup"):
            return self.inner.depths(frame, pixels)


def run_pipeline(frames, cfg: PipelineConfig = None, depth_provider=None,
                 post_refine_steps=None, extra=None):
    """Map a whole sequence and evaluate it; returns ``(RunReport, Mapper)``."""
    mapper = Mapper(cfg, depth_provider)
    t0 = time.perf_counter()
    for frame in frames:
        mapper.process_frame(frame)
    mapper.finish(post_refine_steps)
    wall = time.perf_counter() - t0
    rows = mapper.evaluate(frames)
    timings = {k: float(mapper.timer.totals.get(k, 0.0)) for k in TIMING_STAGES}
    report = RunReport(
        rows=rows,
        aggregates=aggregate_rows(rows),
        gaussian_counts=[int(c) for c in mapper.gaussian_counts],
        n_keyframes=len(mapper.keyframes),
        config=mapper.cfg.to_flat(),
        timings=timings,
        wall_time=wall,
        extra=dict(extra or {}),
    )
    report.extra.setdefault("final_gaussians", len(mapper.map))
    report.extra.setdefault("candidates_seen", mapper.candidates_seen)
    return report, mapper
