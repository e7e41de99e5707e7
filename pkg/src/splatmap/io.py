"""Sequence ingestion and artifact export.

Manifest (plain text, ``#`` starts a comment)::

    intrinsics fx fy cx cy width height
    tracker tracker.txt
    <index> tx ty tz qx qy qz qw <image> [<depth.npy>]

Frame lines use TUM trajectory syntax with the frame index in the timestamp
slot, so poses are world-from-camera. Relative paths resolve against the
manifest's directory. The tracker log holds one record per line,
``frame_index point_count`` followed by ``x y z u v d`` for every point.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvariantViolation, IoError, MissingImage, ParseError
from .gaussians import GaussianMap
from .geometry import Intrinsics, Pose
from .management import FrameInput

REPORT_COLUMNS = ("index", "split", "keyframe", "psnr", "ssim", "mae", "gaussians")

PLY_DTYPE = np.dtype([
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("opacity", "<f4"),
    ("scale_x", "<f4"), ("scale_y", "<f4"), ("scale_z", "<f4"),
    ("rot_w", "<f4"), ("rot_x", "<f4"), ("rot_y", "<f4"), ("rot_z", "<f4"),
])
_PLY_TYPES = {"<f4": "float", "|u1": "uchar"}


@dataclass
class ManifestFrame:
    index: int
    pose: Pose               # camera-from-world
    image_path: Path
    depth_path: Path | None = None


@dataclass
class SequenceManifest:
    intrinsics: Intrinsics
    frames: list
    tracker_path: Path | None = None
    path: Path | None = None


@dataclass
class TrackerRecord:
    index: int
    world: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    depths: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class Sequence:
    manifest: SequenceManifest
    tracker: dict            # frame index -> TrackerRecord
    frames: list             # FrameInput, manifest order
    depth_maps: dict         # frame index -> (H, W), only where the manifest names one


def _floats(tokens, path, lineno, what):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"non-numeric {what}: {' '.join(tokens)!r}", path, lineno) from None


def _content_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


def read_manifest(path) -> SequenceManifest:
    path = Path(path)
    if not path.is_file():
        raise ParseError("manifest not found", path)
    base = path.parent
    K = None
    tracker = None
    frames = []
    for lineno, tok in _content_lines(path):
        key = tok[0]
        if key == "intrinsics":
            if len(tok) != 7:
                raise ParseError(f"intrinsics needs 6 values, got {len(tok) - 1}", path, lineno)
            fx, fy, cx, cy, w, h = _floats(tok[1:], path, lineno, "intrinsics")
            if w != int(w) or h != int(h):
                raise ParseError("image size must be integral", path, lineno)
            try:
                K = Intrinsics(fx, fy, cx, cy, int(w), int(h))
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
        elif key == "tracker":
            if len(tok) != 2:
                raise ParseError("tracker line needs exactly one path", path, lineno)
            tracker = base / tok[1]
        else:
            if len(tok) not in (9, 10):
                raise ParseError(f"frame line needs index, 7 pose values and an image path "
                                 f"(got {len(tok)} fields)", path, lineno)
            try:
                index = int(tok[0])
            except ValueError:
                raise ParseError(f"bad frame index {tok[0]!r}", path, lineno) from None
            tx, ty, tz, qx, qy, qz, qw = _floats(tok[1:8], path, lineno, "pose")
            q = np.array([qw, qx, qy, qz])
            if not np.linalg.norm(q) > 0:
                raise ParseError("zero quaternion", path, lineno)
            world_from_cam = Pose(q / np.linalg.norm(q), np.array([tx, ty, tz]))
            if frames and index <= frames[-1].index:
                raise ParseError(f"frame index {index} is not increasing", path, lineno)
            frames.append(ManifestFrame(index, world_from_cam.inverse(), base / tok[8],
                                        base / tok[9] if len(tok) == 10 else None))
    if K is None:
        raise ParseError("missing intrinsics line", path)
    return SequenceManifest(intrinsics=K, frames=frames, tracker_path=tracker, path=path)


def read_tracker_log(path, known_indices=None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ParseError("tracker log not found", path)
    records = {}
    for lineno, tok in _content_lines(path):
        try:
            index, count = int(tok[0]), int(tok[1])
        except (ValueError, IndexError):
            raise ParseError("record must start with frame_index point_count", path, lineno) from None
        if count < 0 or len(tok) != 2 + 6 * count:
            raise ParseError(f"expected {count} points of 6 values, got {len(tok) - 2} values",
                             path, lineno)
        vals = np.array(_floats(tok[2:], path, lineno, "point"), dtype=np.float64).reshape(count, 6)
        if known_indices is not None and index not in known_indices:
            raise InvariantViolation(f"{path}:{lineno}: tracker record for unknown frame {index}")
        if index in records:
            raise InvariantViolation(f"{path}:{lineno}: duplicate tracker record for frame {index}")
        if np.any(vals[:, 5] <= 0):
            raise InvariantViolation(f"{path}:{lineno}: tracker depths must be positive")
        records[index] = TrackerRecord(index, vals[:, :3], vals[:, 3:5], vals[:, 5])
    return records


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingImage(f"image not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_image(path, image):
    data = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_sequence(path) -> Sequence:
    """Read a manifest, its tracker log and images into validated frames."""
    manifest = read_manifest(path)
    K = manifest.intrinsics
    indices = {f.index for f in manifest.frames}
    tracker = {}
    if manifest.tracker_path is not None:
        tracker = read_tracker_log(manifest.tracker_path, indices)
    frames, depth_maps = [], {}
    for mf in manifest.frames:
        image = read_image(mf.image_path)
        if image.shape[:2] != (K.height, K.width):
            raise InvariantViolation(f"{mf.image_path}: image is {image.shape[1]}x{image.shape[0]}, "
                                     f"intrinsics say {K.width}x{K.height}")
        rec = tracker.get(mf.index, TrackerRecord(mf.index))
        frames.append(FrameInput(index=mf.index, pose=mf.pose, K=K, image=image,
                                 tracked_world=rec.world, tracked_pixels=rec.pixels,
                                 tracked_depths=rec.depths))
        if mf.depth_path is not None:
            if not mf.depth_path.is_file():
                raise MissingImage(f"depth map not found: {mf.depth_path}")
            depth_maps[mf.index] = np.load(mf.depth_path)
    return Sequence(manifest=manifest, tracker=tracker, frames=frames, depth_maps=depth_maps)


def _fmt(x):
    return repr(float(x))


def write_sequence(out_dir, frames, depth_maps=None):
    """Write frames (and optional depth maps) as a manifest directory; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    depth_maps = depth_maps or {}
    if depth_maps:
        (out / "depth").mkdir(exist_ok=True)
    K = frames[0].K
    lines = ["# index tx ty tz qx qy qz qw image [depth]",
             "intrinsics " + " ".join(_fmt(v) for v in (K.fx, K.fy, K.cx, K.cy)) + f" {K.width} {K.height}",
             "tracker tracker.txt"]
    records = []
    for f in frames:
        image_rel = f"images/{f.index:06d}.png"
        write_image(out / image_rel, f.image)
        wfc = f.pose.inverse()
        w, x, y, z = wfc.rotation
        fields = [str(f.index), *(_fmt(v) for v in wfc.translation), *(_fmt(v) for v in (x, y, z, w)),
                  image_rel]
        if f.index in depth_maps:
            depth_rel = f"depth/{f.index:06d}.npy"
            np.save(out / depth_rel, depth_maps[f.index])
            fields.append(depth_rel)
        lines.append(" ".join(fields))
        pts = np.column_stack([f.tracked_world, f.tracked_pixels, f.tracked_depths])
        records.append(" ".join([str(f.index), str(len(pts)), *(_fmt(v) for v in pts.ravel())]))
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "tracker.txt").write_text("\n".join(records) + "\n", encoding="utf-8")
    return manifest


def _ply_header(count):
    props = "".join(f"property {_PLY_TYPES[PLY_DTYPE[name].str]} {name}\n" for name in PLY_DTYPE.names)
    return (f"ply\nformat binary_little_endian 1.0\nelement vertex {count}\n{props}end_header\n"
            ).encode("ascii")


def ply_record_size():
    return PLY_DTYPE.itemsize


def export_ply(gmap: GaussianMap, path):
    """Write the map as a binary little-endian PLY, one vertex per Gaussian."""
    n = len(gmap)
    rec = np.empty(n, dtype=PLY_DTYPE)
    if n:
        pos = gmap.positions
        rgb = np.clip(np.rint(gmap.colors * 255.0), 0, 255).astype(np.uint8)
        scales = gmap.scales
        q = gmap.rotations / np.linalg.norm(gmap.rotations, axis=1, keepdims=True)
        for i, name in enumerate(("x", "y", "z")):
            rec[name] = pos[:, i]
        for i, name in enumerate(("red", "green", "blue")):
            rec[name] = rgb[:, i]
        rec["opacity"] = gmap.opacities
        for i, name in enumerate(("scale_x", "scale_y", "scale_z")):
            rec[name] = scales[:, i]
        for i, name in enumerate(("rot_w", "rot_x", "rot_y", "rot_z")):
            rec[name] = q[:, i]
    try:
        with open(path, "wb") as fh:
            fh.write(_ply_header(n))
            fh.write(rec.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_ply(path):
    """Read a PLY written by :func:`export_ply` back into a structured array."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    if header[0] != "ply" or header[1] != "format binary_little_endian 1.0":
        raise ParseError("not a binary little-endian PLY", path)
    count = int(next(h for h in header if h.startswith("element vertex")).split()[-1])
    names = [h.split()[-1] for h in header if h.startswith("property")]
    if tuple(names) != PLY_DTYPE.names:
        raise ParseError(f"unexpected vertex layout {names}", path)
    return np.frombuffer(data[end:], dtype=PLY_DTYPE, count=count)


def ply_to_map(records) -> GaussianMap:
    r = records
    col = lambda *names: np.column_stack([r[n].astype(np.float64) for n in names])  # noqa: E731
    return GaussianMap.from_arrays(col("x", "y", "z"), col("scale_x", "scale_y", "scale_z"),
                                   col("rot_w", "rot_x", "rot_y", "rot_z"),
                                   r["opacity"].astype(np.float64),
                                   col("red", "green", "blue") / 255.0)


def export_frames(out_dir, images):
    """Write ``{index: image}`` as 8-bit PNGs named by frame index."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for index, image in sorted(images.items()):
            write_image(out / f"{int(index):06d}.png", image)
    except OSError as exc:
        raise IoError(f"cannot write frames to {out}: {exc}") from exc


def write_report_csv(report, path):
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REPORT_COLUMNS)
            for row in report.rows:
                writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                                 for c in REPORT_COLUMNS])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_synth(scene, out_dir):
    """Write a synthetic scene as a loadable sequence plus its ground-truth map."""
    out = Path(out_dir)
    manifest = write_sequence(out, scene.frames, scene.depth_maps)
    export_ply(scene.gt_map, out / "ground_truth.ply")
    return manifest


def ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {path}: {exc}") from exc
    return Path(path)
