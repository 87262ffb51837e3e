"""Multi-view scenes: on-disk layout, source selection, splits, synthetic data.

Scene directory layout::

    <scene>/
      cameras.txt        one line per view: K (9, row-major) R (9) t (3) near far
      images/NNN.png     8-bit RGB, NNN = zero-padded view index
      depths/NNN.bin     optional depth grids (see ``files``)

``cameras.txt`` may carry ``# key: value`` header lines; ``scale`` and
``rig`` are recognised.  Poses are world-to-camera.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, InvalidCameraError, SceneLoadError, SplitError
from .files import read_depth_grid, read_png, write_depth_grid, write_png
from .archive import atomic_write_bytes
from .geometry import CameraIntrinsics, CameraPose, CameraView

ALIGNMENT = 32
LEVEL_STRIDE = {"small": 1, "medium": 2, "large": 4}


class SceneWarning(UserWarning):
    pass


@dataclass
class SceneRecord:
    scene_id: str
    views: list
    depths: list | None = None
    scale: float = 1.0
    valid_size: tuple | None = None  # (H, W) before padding
    rig: str | None = None

    def __post_init__(self):
        if len(self.views) < 4:
            raise SceneLoadError(f"scene {self.scene_id!r} has {len(self.views)} views; at least 4 are required")
        if self.valid_size is None:
            k = self.views[0].intrinsics
            self.valid_size = (k.height, k.width)

    def __len__(self):
        return len(self.views)

    @property
    def centers(self) -> np.ndarray:
        return np.stack([v.pose.center for v in self.views])

    def valid_mask(self) -> np.ndarray:
        k = self.views[0].intrinsics
        mask = np.zeros((k.height, k.width), dtype=bool)
        mask[: self.valid_size[0], : self.valid_size[1]] = True
        return mask


# --------------------------------------------------------------------------
# loading and saving


def _pad_to(image: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = image.shape[:2]
    pad = [(0, height - h), (0, width - w)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pad, mode="edge")


def aligned_size(h: int, w: int, alignment: int = ALIGNMENT):
    return (-(-h // alignment) * alignment, -(-w // alignment) * alignment)


def _parse_cameras(path):
    header, rows = {}, []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    key, sep, value = line[1:].partition(":")
                    if sep:
                        header[key.strip()] = value.strip()
                    continue
                values = [float(tok) for tok in line.split()]
                if len(values) != 23:
                    raise SceneLoadError(f"{path}:{lineno}: expected 23 numbers, found {len(values)}")
                rows.append(values)
    except OSError as exc:
        raise SceneLoadError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise SceneLoadError(f"{path}: malformed number ({exc})") from exc
    return header, rows


def load_scene(path, alignment: int = ALIGNMENT) -> SceneRecord:
    """Read a scene directory, padding images to multiples of ``alignment``."""
    path = os.fspath(path)
    header, rows = _parse_cameras(os.path.join(path, "cameras.txt"))
    if not rows:
        raise SceneLoadError(f"{path}: cameras.txt lists no views")
    views, depths, raw_sizes = [], [], set()
    for i, row in enumerate(rows):
        image = read_png(os.path.join(path, "images", f"{i:03d}.png"))
        h, w = image.shape[:2]
        raw_sizes.add((h, w))
        H, W = aligned_size(h, w, alignment)
        K = np.array(row[0:9]).reshape(3, 3)
        R = np.array(row[9:18]).reshape(3, 3)
        t = np.array(row[18:21])
        near, far = row[21], row[22]
        if not np.isfinite(row).all():
            raise CalibrationError(f"{path}: view {i} has non-finite calibration")
        try:
            pose = CameraPose(R, t)
        except InvalidCameraError as exc:
            raise CalibrationError(f"{path}: view {i}: {exc}") from exc
        try:
            intrinsics = CameraIntrinsics.from_matrix(K, W, H)
            view = CameraView(_pad_to(image, H, W), intrinsics, pose, near, far, meta={"index": i})
        except InvalidCameraError as exc:
            raise CalibrationError(f"{path}: view {i}: {exc}") from exc
        views.append(view)
        depth_path = os.path.join(path, "depths", f"{i:03d}.bin")
        depths.append(_pad_to(read_depth_grid(depth_path), H, W) if os.path.exists(depth_path) else None)
    if len(raw_sizes) != 1:
        raise SceneLoadError(f"{path}: views have different image sizes {sorted(raw_sizes)}")
    (h, w), = raw_sizes
    if (h, w) != (views[0].intrinsics.height, views[0].intrinsics.width):
        warnings.warn(f"{path}: images padded from {h}x{w} to a multiple of {alignment}", SceneWarning)
    have = [d is not None for d in depths]
    if any(have) and not all(have):
        warnings.warn(f"{path}: depth maps present for only {sum(have)} of {len(depths)} views", SceneWarning)
    focal = {(v.intrinsics.fx, v.intrinsics.fy) for v in views}
    if len(focal) > 1:
        warnings.warn(f"{path}: views use {len(focal)} different focal lengths", SceneWarning)
    return SceneRecord(
        scene_id=header.get("scene_id", os.path.basename(os.path.normpath(path))),
        views=views,
        depths=depths if all(have) else None,
        scale=float(header.get("scale", 1.0)),
        valid_size=(h, w),
        rig=header.get("rig"),
    )


def _fmt(x) -> str:
    return repr(float(x))


def save_scene(scene: SceneRecord, path):
    """Write ``scene`` in the directory layout; images are cropped to ``valid_size``."""
    path = os.fspath(path)
    h, w = scene.valid_size
    lines = [f"# scene_id: {scene.scene_id}", f"# scale: {scene.scale!r}"]
    if scene.rig:
        lines.append(f"# rig: {scene.rig}")
    lines.append("# K(9) R(9) t(3) near far")
    for i, view in enumerate(scene.views):
        values = list(view.intrinsics.K.ravel()) + list(view.pose.R.ravel()) + list(view.pose.t) + [view.near, view.far]
        lines.append(" ".join(_fmt(x) for x in values))
        write_png(os.path.join(path, "images", f"{i:03d}.png"), view.image[:h, :w])
        if scene.depths is not None:
            write_depth_grid(os.path.join(path, "depths", f"{i:03d}.bin"), scene.depths[i][:h, :w])
    atomic_write_bytes(os.path.join(path, "cameras.txt"), ("\n".join(lines) + "\n").encode())


def read_dtu_camera(path, width: int, height: int, depth_planes: int = 192):
    """Parse an MVSNet/DTU style ``*_cam.txt`` into ``(intrinsics, pose, near, far)``."""
    try:
        with open(path) as fh:
            tokens = fh.read().split()
    except OSError as exc:
        raise SceneLoadError(f"cannot read {path}: {exc}") from exc
    try:
        e = tokens.index("extrinsic")
        i = tokens.index("intrinsic")
        extrinsic = np.array([float(x) for x in tokens[e + 1 : e + 17]]).reshape(4, 4)
        K = np.array([float(x) for x in tokens[i + 1 : i + 10]]).reshape(3, 3)
        rest = [float(x) for x in tokens[i + 10 :]]
    except (ValueError, IndexError) as exc:
        raise SceneLoadError(f"{path}: malformed DTU camera file") from exc
    near, interval = rest[0], rest[1]
    planes = int(rest[2]) if len(rest) > 2 else depth_planes
    far = rest[3] if len(rest) > 3 else near + interval * (planes - 1)
    try:
        pose = CameraPose(extrinsic[:3, :3], extrinsic[:3, 3])
        intrinsics = CameraIntrinsics.from_matrix(K, width, height)
    except InvalidCameraError as exc:
        raise CalibrationError(f"{path}: {exc}") from exc
    return intrinsics, pose, near, far


def convert_dtu_scene(image_paths, camera_paths, out, scene_id="dtu"):
    """Write DTU-convention images and cameras in the scene directory layout."""
    views = []
    for i, (img_path, cam_path) in enumerate(zip(image_paths, camera_paths)):
        image = read_png(img_path)
        h, w = image.shape[:2]
        k, pose, near, far = read_dtu_camera(cam_path, w, h)
        views.append(CameraView(image, k, pose, near, far, meta={"index": i}))
    scene = SceneRecord(scene_id, views)
    save_scene(scene, out)
    return scene


# --------------------------------------------------------------------------
# source selection and difficulty splits


def _nearest(scene: SceneRecord, target: int, candidates, count: int):
    centers = scene.centers
    dist = np.linalg.norm(centers - centers[target], axis=1)
    ranked = sorted(candidates, key=lambda j: (round(float(dist[j]), 9), j))
    return ranked[:count]


def select_sources(scene: SceneRecord, target: int, count: int = 3) -> list:
    """The ``count`` views nearest to ``target`` by camera center, ties by id."""
    if count >= len(scene):
        raise SplitError(f"cannot pick {count} sources from {len(scene)} views")
    return _nearest(scene, target, [j for j in range(len(scene)) if j != target], count)


@dataclass
class SplitSpec:
    level: str
    assignments: dict = field(default_factory=dict)  # target id -> tuple of source ids

    @property
    def targets(self):
        return sorted(self.assignments)


def difficulty_sources(scene: SceneRecord, target: int, level: str, count: int = 3) -> list:
    """Sources restricted to rig indices ``target + k * stride``.

    The stride is 1, 2 and 4 for the small, medium and large levels (skip
    none, one, or three views), so on an evenly spaced rig the source gap
    grows by 2x and 4x.
    """
    if level not in LEVEL_STRIDE:
        raise SplitError(f"unknown difficulty level {level!r}")
    stride = LEVEL_STRIDE[level]
    candidates = [j for j in range(len(scene)) if j != target and (j - target) % stride == 0]
    if len(candidates) < count:
        raise SplitError(f"view {target}: only {len(candidates)} candidate sources at level {level!r}")
    return _nearest(scene, target, candidates, count)


def make_difficulty_split(scene: SceneRecord, level: str, targets=None, count: int = 3) -> SplitSpec:
    if targets is None:
        targets = range(len(scene))
        skip_short = True
    else:
        skip_short = False
    split = SplitSpec(level)
    for t in targets:
        try:
            split.assignments[int(t)] = tuple(difficulty_sources(scene, int(t), level, count))
        except SplitError:
            if not skip_short:
                raise
    if not split.assignments:
        raise SplitError(f"scene {scene.scene_id!r} has too few views for a {level!r} split")
    return split


def mean_source_gap(scene: SceneRecord, split: SplitSpec) -> float:
    centers = scene.centers
    gaps = [np.linalg.norm(centers[s] - centers[t]) for t, src in split.assignments.items() for s in src]
    return float(np.mean(gaps))


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SyntheticLayout:
    rig: str = "line"
    num_views: int = 16
    width: int = 64
    height: int = 64
    focal: float = 64.0
    spacing: float = 0.2  # line rig: distance between neighbouring cameras
    radius: float = 0.4  # ring rig: circle radius
    back_depth: float = 4.0
    num_boxes: int = 2
    box_depth: tuple = (2.4, 3.2)
    box_size: tuple = (0.5, 0.9)
    max_frequency: float = 2.0


class _Texture:
    """Smooth view-independent albedo: a base color plus low-frequency waves."""

    def __init__(self, rng: np.random.Generator, max_frequency: float):
        self.base = rng.uniform(0.25, 0.75, size=3)
        self.freq = rng.uniform(0.5, max_frequency, size=(3, 2)) * rng.choice([-1, 1], size=(3, 2))
        self.phase = rng.uniform(0, 2 * math.pi, size=(3, 3))
        self.amp = rng.uniform(0.1, 0.22, size=(3, 3))

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = np.empty(a.shape + (3,))
        for c in range(3):
            val = self.base[c]
            for k in range(3):
                fa, fb = self.freq[k]
                val = val + self.amp[k, c] * np.sin(2 * math.pi * (fa * a + fb * b) + self.phase[k, c])
            out[..., c] = val
        return np.clip(out, 0.0, 1.0)


def _rig_poses(layout: SyntheticLayout):
    n = layout.num_views
    if layout.rig == "line":
        xs = (np.arange(n) - (n - 1) / 2) * layout.spacing
        centers = np.stack([xs, np.zeros(n), np.zeros(n)], axis=1)
    elif layout.rig == "ring":
        ang = 2 * math.pi * np.arange(n) / n
        centers = np.stack([layout.radius * np.cos(ang), layout.radius * np.sin(ang), np.zeros(n)], axis=1)
    else:
        raise ValueError(f"unknown rig {layout.rig!r}")
    # Parallel optical axes along +z, as on a planar capture rig.
    return [CameraPose(np.eye(3), -c) for c in centers]


def _trace(origins, dirs, boxes, layout: SyntheticLayout):
    """Nearest hit along each ray: distance, surface id and 2D surface coords."""
    n = len(dirs)
    best = np.full(n, np.inf)
    surface = np.full(n, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_back = (layout.back_depth - origins[:, 2]) / dirs[:, 2]
    hit = t_back > 0
    best[hit] = t_back[hit]
    surface[hit] = 0
    for b, (lo, hi) in enumerate(boxes):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - origins) / dirs
            t2 = (hi - origins) / dirs
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        inside = (tmax >= tmin) & (tmin > 0) & (tmin < best)
        best[inside] = tmin[inside]
        surface[inside] = b + 1
    points = origins + best[:, None] * dirs
    return best, surface, points


def _shade_and_texture(points, surface, boxes, textures):
    colors = np.zeros(points.shape)
    light = np.array([0.3, -0.5, -0.8])
    light /= np.linalg.norm(light)
    back = surface == 0
    colors[back] = textures[0](points[back, 0], points[back, 1]) * 0.9
    for b, (lo, hi) in enumerate(boxes):
        sel = surface == b + 1
        if not sel.any():
            continue
        p = points[sel]
        # Face normal from the coordinate closest to a slab boundary.
        dist = np.stack([np.abs(p - lo), np.abs(p - hi)], axis=1)  # (n, 2, 3)
        flat = dist.reshape(len(p), 6).argmin(axis=1)
        axis = flat % 3
        sign = np.where(flat < 3, -1.0, 1.0)
        normal = np.zeros_like(p)
        normal[np.arange(len(p)), axis] = sign
        shade = 0.55 + 0.45 * np.clip(-(normal @ light), 0, 1)
        ua = np.where(axis == 0, p[:, 1], p[:, 0])
        ub = np.where(axis == 2, p[:, 1], p[:, 2])
        colors[sel] = textures[b + 1](ua, ub) * shade[:, None]
    return colors


def generate_synthetic_scene(seed: int = 0, layout: SyntheticLayout = SyntheticLayout(), scene_id=None) -> SceneRecord:
    """Analytically rendered boxes in front of a textured back wall.

    Returns exact per-pixel camera-frame depth.  ``near`` is 95% of the
    smallest depth seen by any view and ``far`` 105% of the largest ray
    length, so both depth and ray-distance ranges are covered.
    """
    rng = np.random.default_rng(seed)
    boxes = []
    for _ in range(layout.num_boxes):
        size = rng.uniform(*layout.box_size, size=3)
        center = np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.45, 0.45), rng.uniform(*layout.box_depth)])
        boxes.append((center - size / 2, center + size / 2))
    textures = [_Texture(rng, layout.max_frequency) for _ in range(layout.num_boxes + 1)]
    k = CameraIntrinsics(layout.focal, layout.focal, (layout.width - 1) / 2, (layout.height - 1) / 2,
                         layout.width, layout.height)
    poses = _rig_poses(layout)
    v, u = np.mgrid[0 : layout.height, 0 : layout.width]
    cam_dirs = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u, dtype=float)], axis=-1).reshape(-1, 3)
    images, depths, dists = [], [], []
    for pose in poses:
        dirs = cam_dirs @ pose.R
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(pose.center, dirs.shape)
        t, surface, points = _trace(origins, dirs, boxes, layout)
        colors = _shade_and_texture(points, surface, boxes, textures)
        depth = (points - pose.center) @ pose.R[2]
        images.append(colors.reshape(layout.height, layout.width, 3))
        depths.append(depth.reshape(layout.height, layout.width))
        dists.append(t)
    near = 0.95 * min(d.min() for d in depths)
    far = 1.05 * max(d.max() for d in dists)
    views = [CameraView(img, k, pose, near, far, meta={"index": i}) for i, (img, pose) in enumerate(zip(images, poses))]
    return SceneRecord(scene_id or f"synthetic-{seed:04d}", views, depths, scale=1.0, rig=layout.rig)


def make_synthetic_dataset(out, scenes: int = 2, seed: int = 0, layout: SyntheticLayout = SyntheticLayout()):
    paths = []
    for i in range(scenes):
        scene = generate_synthetic_scene(seed + i, layout, scene_id=f"scene{i:03d}")
        p = os.path.join(os.fspath(out), scene.scene_id)
        save_scene(scene, p)
        paths.append(p)
    return paths


def load_dataset(root) -> list:
    """Every scene directory (containing ``cameras.txt``) under ``root``."""
    root = os.fspath(root)
    if os.path.exists(os.path.join(root, "cameras.txt")):
        return [load_scene(root)]
    try:
        entries = sorted(os.listdir(root))
    except OSError as exc:
        raise SceneLoadError(f"cannot list {root}: {exc}") from exc
    scenes = [load_scene(os.path.join(root, e)) for e in entries if os.path.exists(os.path.join(root, e, "cameras.txt"))]
    if not scenes:
        raise SceneLoadError(f"no scene directories found under {root}")
    return scenes
