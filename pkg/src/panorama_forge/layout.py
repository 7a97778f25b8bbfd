"""Rasterize BEV layout sequences into 19-channel perspective control images.

Channel layout of every pixel::

    [0:10]  one-hot depth bin of the nearest box silhouette
    [10:13] box wireframe colour (category palette)
    [13:16] road polyline colour (lane-type palette)
    [16:19] camera-ray pseudo-colour in [0, 255]
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from skimage.draw import line as bresenham_line
from skimage.draw import polygon as fill_polygon

from . import tensorio
from .geometry import direction_field, pose_pseudocolor
from .scene import BOX_EDGES, CameraCalib, ObjectBox3D, SceneSequence

NUM_CHANNELS = 19
DEPTH_BINS = 10
DEPTH = slice(0, 10)
BOX = slice(10, 13)
ROAD = slice(13, 16)
POSE = slice(16, 19)

NEAR_CLIP = 1e-3
DEFAULT_DMAX = 50.0

DEFAULT_PALETTE = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 1.0, 0.0),
    (1.0, 0.0, 1.0),
    (0.0, 1.0, 1.0),
    (1.0, 0.5, 0.0),
    (0.5, 0.0, 1.0),
    (0.0, 0.5, 0.25),
    (0.5, 0.5, 0.5),
)
LANE_PALETTE = {
    "divider": (1.0, 1.0, 1.0),
    "boundary": (1.0, 0.0, 0.0),
    "crossing": (0.0, 0.0, 1.0),
}


@dataclass(frozen=True)
class ProjectedBox:
    """Near-clipped wireframe of a box in pixel space.

    ``edges[i]`` holds the two (u, v) endpoints of edge ``i``; ``depths[i]``
    the matching depths along the optical axis.
    """

    edges: np.ndarray  # (n, 2, 2)
    depths: np.ndarray  # (n, 2)

    @property
    def empty(self) -> bool:
        return len(self.edges) == 0

    @property
    def nearest_depth(self) -> float:
        return float(self.depths.min()) if len(self.depths) else math.inf


_EMPTY = ProjectedBox(np.zeros((0, 2, 2)), np.zeros((0, 2)))


def _to_frustum(points_ego: np.ndarray, calib: CameraCalib) -> np.ndarray:
    """Ego-frame points (n, 3) -> frustum coordinates (u*d, v*d, d) (n, 3)."""
    homo = np.concatenate([points_ego, np.ones((len(points_ego), 1))], axis=1)
    f = homo @ (calib.K @ np.linalg.inv(calib.E)).T
    return f[:, :3] / f[:, 3:4]


def _clip_segment(fa: np.ndarray, fb: np.ndarray):
    """Clip a frustum-space segment to depth >= NEAR_CLIP; None when fully behind."""
    da, db = fa[2], fb[2]
    if da < NEAR_CLIP and db < NEAR_CLIP:
        return None
    if da < NEAR_CLIP:
        fa = fa + (fb - fa) * ((NEAR_CLIP - da) / (db - da))
        fa[2] = NEAR_CLIP
    elif db < NEAR_CLIP:
        fb = fb + (fa - fb) * ((NEAR_CLIP - db) / (da - db))
        fb[2] = NEAR_CLIP
    return fa, fb


def project_box(box: ObjectBox3D, calib: CameraCalib, width: int, height: int) -> ProjectedBox:
    f = _to_frustum(box.corners(), calib)
    edges, depths = [], []
    for a, b in BOX_EDGES:
        seg = _clip_segment(f[a], f[b])
        if seg is None:
            continue
        pa, pb = seg
        edges.append([pa[:2] / pa[2], pb[:2] / pb[2]])
        depths.append([pa[2], pb[2]])
    if not edges:
        return _EMPTY
    edges = np.asarray(edges, dtype=np.float64)
    uv = edges.reshape(-1, 2)
    if uv[:, 0].max() < 0 or uv[:, 0].min() > width - 1 or uv[:, 1].max() < 0 or uv[:, 1].min() > height - 1:
        return _EMPTY
    return ProjectedBox(edges, np.asarray(depths, dtype=np.float64))


def _clip_to_rect(p0, p1, width, height):
    """Liang-Barsky clip of a 2D segment to [0, width-1] x [0, height-1]."""
    x0, y0 = p0
    dx, dy = p1[0] - x0, p1[1] - y0
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, x0), (dx, width - 1 - x0), (-dy, y0), (dy, height - 1 - y0)):
        if p == 0:
            if q < 0:
                return None
            continue
        r = q / p
        if p < 0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 > t1:
            return None
    return (x0 + t0 * dx, y0 + t0 * dy), (x0 + t1 * dx, y0 + t1 * dy)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def segment_pixels(p0, p1, width: int, height: int):
    """Integer Bresenham pixels (rows, cols) of a segment, clipped to the image."""
    clipped = _clip_to_rect(p0, p1, width, height)
    if clipped is None:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    (x0, y0), (x1, y1) = clipped
    rr, cc = bresenham_line(_round_half_up(y0), _round_half_up(x0), _round_half_up(y1), _round_half_up(x1))
    keep = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
    return rr[keep], cc[keep]


def _convex_hull(points: np.ndarray) -> np.ndarray:
    pts = sorted(set(map(tuple, points)))
    if len(pts) <= 2:
        return np.asarray(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1])


def wireframe_mask(proj: ProjectedBox, width: int, height: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    for (p0, p1) in proj.edges:
        rr, cc = segment_pixels(p0, p1, width, height)
        mask[rr, cc] = True
    return mask


def box_silhouette(proj: ProjectedBox, width: int, height: int) -> np.ndarray:
    """Filled projected footprint of a box (hull fill plus its wireframe pixels)."""
    mask = wireframe_mask(proj, width, height)
    if proj.empty:
        return mask
    hull = _convex_hull(proj.edges.reshape(-1, 2))
    if len(hull) >= 3:
        rr, cc = fill_polygon(hull[:, 1], hull[:, 0], shape=(height, width))
        mask[rr, cc] = True
    return mask


def depth_bin(depth: float, d_max: float) -> int | None:
    """Bin index of ``depth`` among 10 uniform bins over (0, d_max]; None outside."""
    if not 0 < depth <= d_max:
        return None
    return min(DEPTH_BINS - 1, max(0, math.ceil(depth / d_max * DEPTH_BINS) - 1))


def _draw_roads(img, roads, calib, width, height):
    for road in roads:
        pts = np.asarray(road.points, dtype=np.float64)
        f = _to_frustum(np.concatenate([pts, np.zeros((len(pts), 1))], axis=1), calib)
        color = LANE_PALETTE[road.lane_type]
        for i in range(len(f) - 1):
            seg = _clip_segment(f[i], f[i + 1])
            if seg is None:
                continue
            pa, pb = seg
            rr, cc = segment_pixels(pa[:2] / pa[2], pb[:2] / pb[2], width, height)
            img[rr, cc, ROAD] = color


def rasterize_frame(
    scene: SceneSequence,
    frame: int,
    view: int,
    width: int,
    height: int,
    d_max: float = DEFAULT_DMAX,
    categories: Sequence = DEFAULT_PALETTE,
) -> np.ndarray:
    """Render one (frame, view) control image of shape (height, width, 19).

    Boxes are painted far-to-near so the nearest silhouette owns a pixel's
    depth bin and box colour; a nearer silhouette also hides farther edges.
    """
    if not 0 <= frame < scene.num_frames:
        raise IndexError(f"frame {frame} out of range [0, {scene.num_frames})")
    if not 0 <= view < scene.num_views:
        raise IndexError(f"view {view} out of range [0, {scene.num_views})")
    if width < 8 or height < 8:
        raise ValueError(f"image must be at least 8x8, got {width}x{height}")
    if not d_max > 0:
        raise ValueError("d_max must be positive")
    fr = scene.frames[frame]
    calib = fr.cameras[view]
    img = np.zeros((height, width, NUM_CHANNELS), dtype=np.float64)
    img[..., POSE] = pose_pseudocolor(direction_field(calib, width, height))
    _draw_roads(img, fr.roads, calib, width, height)

    projected = []
    for idx, box in enumerate(fr.boxes):
        proj = project_box(box, calib, width, height)
        if not proj.empty:
            projected.append((proj.nearest_depth, idx, box, proj))
    # Farthest first; ties resolved by file order for determinism.
    projected.sort(key=lambda item: (-item[0], item[1]))
    for depth, _, box, proj in projected:
        sil = box_silhouette(proj, width, height)
        b = depth_bin(depth, d_max)
        if b is not None:
            img[sil, DEPTH] = 0.0
            img[sil, b] = 1.0
        img[sil, BOX] = 0.0
        img[wireframe_mask(proj, width, height), BOX] = categories[box.category_id % len(categories)]
    return img


@dataclass(frozen=True)
class ControlTensor:
    data: np.ndarray  # (V, T, H, W, 19) float32

    @property
    def views(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self):
        return self.data.shape

    def validate(self) -> None:
        d = self.data
        if d.ndim != 5 or d.shape[-1] != NUM_CHANNELS:
            raise ValueError(f"control tensor must be (V, T, H, W, 19), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("control tensor has non-finite values")
        lo = d[..., :16]
        if lo.min(initial=0) < 0 or lo.max(initial=0) > 1:
            raise ValueError("depth/box/road channels must lie in [0, 1]")
        pose = d[..., POSE]
        if pose.min(initial=0) < 0 or pose.max(initial=0) > 255:
            raise ValueError("pose channels must lie in [0, 255]")
        if np.any(d[..., DEPTH].sum(-1) > 1):
            raise ValueError("depth channels must be one-hot")

    def save(self, path) -> None:
        tensorio.save(path, self.data)

    @classmethod
    def load(cls, path) -> "ControlTensor":
        ct = cls(tensorio.load(path))
        ct.validate()
        return ct


def _worker_count() -> int:
    env = os.environ.get("PANORAMA_FORGE_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def render_sequence(
    scene: SceneSequence,
    width: int,
    height: int,
    d_max: float = DEFAULT_DMAX,
    palette: Sequence = DEFAULT_PALETTE,
    workers: int | None = None,
    frames: Sequence[int] | None = None,
) -> ControlTensor:
    """Rasterize every (frame, view) of ``scene`` into one ControlTensor."""
    frame_ids = list(range(scene.num_frames)) if frames is None else list(frames)
    out = np.zeros((scene.num_views, len(frame_ids), height, width, NUM_CHANNELS), dtype=np.float32)
    jobs = [(ti, t, v) for ti, t in enumerate(frame_ids) for v in range(scene.num_views)]

    def run(job):
        ti, t, v = job
        out[v, ti] = rasterize_frame(scene, t, v, width, height, d_max, palette)

    workers = workers or _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, jobs))
    else:
        for job in jobs:
            run(job)
    return ControlTensor(out)


def quantize_u8(x: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(x, 0, 255) + 0.5).astype(np.uint8)


def preview_groups(ct: ControlTensor, view: int, frame: int) -> dict:
    """8-bit RGB previews of each channel group of one control image."""
    img = ct.data[view, frame].astype(np.float64)
    occ = img[..., DEPTH]
    # near bins bright, empty pixels black
    shade = np.where(occ.max(axis=-1) > 0, 1.0 - np.argmax(occ, axis=-1) / DEPTH_BINS, 0.0)
    depth = np.repeat(shade[..., None], 3, axis=-1)
    return {
        "depth": quantize_u8(depth * 255.0),
        "boxes": quantize_u8(img[..., BOX] * 255.0),
        "roads": quantize_u8(img[..., ROAD] * 255.0),
        "pose": quantize_u8(img[..., POSE]),
    }
