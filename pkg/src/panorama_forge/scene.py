"""Annotation data model for BEV layout sequences and its JSON codec.

World (ego) frame is z-up; yaw rotates about +z. Camera frame follows the
pinhole convention (z forward). ``extrinsic`` maps camera -> ego.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

LANE_TYPES = ("divider", "boundary", "crossing")

# Known attribute tags get their own embedding row; everything else shares
# the reserved bucket.
ATTRIBUTE_VOCAB = (
    "sunny", "rainy", "cloudy", "foggy", "snowy",
    "day", "night", "dawn", "dusk",
    "urban", "highway", "rural", "parking", "intersection",
)
_RESERVED_TAG = "<unk>"
_BIAS_TAG = "<bias>"


class SceneError(ValueError):
    """Base class for scene-file failures."""


class SceneSyntaxError(SceneError):
    def __init__(self, msg: str, line: int, col: int):
        super().__init__(f"line {line}, column {col}: {msg}")
        self.line = line
        self.col = col


class SceneSchemaError(SceneError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


class SceneInvariantError(SceneError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


def _check_matrix(values: Sequence[float], path: str) -> None:
    m = np.asarray(values, dtype=np.float64).reshape(4, 4)
    if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
        raise SceneInvariantError(path, f"bottom row must be (0,0,0,1), got {tuple(m[3])}")
    if abs(np.linalg.det(m)) <= 1e-9:
        raise SceneInvariantError(path, "matrix is not invertible (|det| <= 1e-9)")


@dataclass(frozen=True)
class CameraCalib:
    intrinsic: tuple  # 16 floats, row-major homogeneous K
    extrinsic: tuple  # 16 floats, row-major camera-to-ego E

    def __post_init__(self):
        object.__setattr__(self, "intrinsic", tuple(float(x) for x in np.ravel(self.intrinsic)))
        object.__setattr__(self, "extrinsic", tuple(float(x) for x in np.ravel(self.extrinsic)))
        for name in ("intrinsic", "extrinsic"):
            if len(getattr(self, name)) != 16:
                raise SceneSchemaError(name, "expected 16 values")
        _check_matrix(self.intrinsic, "intrinsic")
        _check_matrix(self.extrinsic, "extrinsic")

    @property
    def K(self) -> np.ndarray:
        return np.asarray(self.intrinsic, dtype=np.float64).reshape(4, 4)

    @property
    def E(self) -> np.ndarray:
        return np.asarray(self.extrinsic, dtype=np.float64).reshape(4, 4)

    @classmethod
    def from_matrices(cls, K, E) -> "CameraCalib":
        return cls(tuple(np.asarray(K, dtype=np.float64).ravel()), tuple(np.asarray(E, dtype=np.float64).ravel()))


@dataclass(frozen=True)
class ObjectBox3D:
    center: tuple
    size: tuple  # (length, width, height)
    yaw: float
    category_id: int
    track_id: int

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(x) for x in self.center))
        object.__setattr__(self, "size", tuple(float(x) for x in self.size))
        object.__setattr__(self, "yaw", float(self.yaw))
        if len(self.center) != 3 or len(self.size) != 3:
            raise SceneSchemaError("center/size", "expected 3 components")
        if not all(math.isfinite(x) for x in self.center + self.size + (self.yaw,)):
            raise SceneInvariantError("box", "non-finite value")
        if not all(s > 0 for s in self.size):
            raise SceneInvariantError("size", f"components must be > 0, got {self.size}")
        if not -math.pi <= self.yaw < math.pi:
            raise SceneInvariantError("yaw", f"must lie in [-pi, pi), got {self.yaw}")

    def corners(self) -> np.ndarray:
        """The 8 corners in the ego frame, shape (8, 3).

        Order: bottom face (z-) counter-clockwise from (+l, +w), then top face.
        """
        l, w, h = self.size
        x = np.array([1, -1, -1, 1, 1, -1, -1, 1], dtype=np.float64) * l / 2
        y = np.array([1, 1, -1, -1, 1, 1, -1, -1], dtype=np.float64) * w / 2
        z = np.array([-1, -1, -1, -1, 1, 1, 1, 1], dtype=np.float64) * h / 2
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        pts = np.stack([c * x - s * y, s * x + c * y, z], axis=1)
        return pts + np.asarray(self.center)


BOX_EDGES = (
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
)


@dataclass(frozen=True)
class RoadPolyline:
    points: tuple  # ((x, y), ...) on the ground plane
    lane_type: str

    def __post_init__(self):
        object.__setattr__(self, "points", tuple((float(p[0]), float(p[1])) for p in self.points))
        if len(self.points) < 2:
            raise SceneInvariantError("points", "a polyline needs at least 2 points")
        if not all(math.isfinite(c) for p in self.points for c in p):
            raise SceneInvariantError("points", "non-finite coordinate")
        if self.lane_type not in LANE_TYPES:
            raise SceneInvariantError("lane_type", f"unknown lane type {self.lane_type!r}")


@dataclass(frozen=True)
class Frame:
    cameras: tuple
    boxes: tuple = ()
    roads: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "roads", tuple(self.roads))


@dataclass(frozen=True)
class SceneSequence:
    frames: tuple
    attributes: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if not self.frames:
            raise SceneInvariantError("frames", "at least one frame is required")
        nviews = len(self.frames[0].cameras)
        if nviews < 1:
            raise SceneInvariantError("frames[0].cameras", "at least one view is required")
        for i, fr in enumerate(self.frames):
            if len(fr.cameras) != nviews:
                raise SceneInvariantError(
                    f"frames[{i}].cameras", f"expected {nviews} views like frame 0, got {len(fr.cameras)}"
                )

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def num_views(self) -> int:
        return len(self.frames[0].cameras)

    # Short aliases used throughout the pipeline.
    T = num_frames
    V = num_views


# -- parsing ---------------------------------------------------------------


def _reject_constant(name):
    raise ValueError(f"non-finite constant {name} is not allowed")


def _syntax_error(exc: json.JSONDecodeError) -> SceneSyntaxError:
    return SceneSyntaxError(exc.msg, exc.lineno, exc.colno)


class _Reader:
    """Typed field access that reports the JSON path of the first problem."""

    def obj(self, value, path, keys):
        if not isinstance(value, dict):
            raise SceneSchemaError(path, f"expected object, got {type(value).__name__}")
        missing = [k for k in keys if k not in value]
        if missing:
            raise SceneSchemaError(f"{path}.{missing[0]}", "missing required key")
        extra = sorted(set(value) - set(keys))
        if extra:
            raise SceneSchemaError(f"{path}.{extra[0]}", "unknown key")
        return value

    def arr(self, value, path, length=None):
        if not isinstance(value, list):
            raise SceneSchemaError(path, f"expected array, got {type(value).__name__}")
        if length is not None and len(value) != length:
            raise SceneSchemaError(path, f"expected {length} elements, got {len(value)}")
        return value

    def num(self, value, path):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SceneSchemaError(path, f"expected number, got {type(value).__name__}")
        if not math.isfinite(value):
            raise SceneInvariantError(path, "non-finite number")
        return float(value)

    def int(self, value, path):
        if isinstance(value, bool) or not isinstance(value, int):
            raise SceneSchemaError(path, f"expected integer, got {type(value).__name__}")
        return value

    def str(self, value, path):
        if not isinstance(value, str):
            raise SceneSchemaError(path, f"expected string, got {type(value).__name__}")
        return value

    def nums(self, value, path, length):
        return [self.num(x, f"{path}[{i}]") for i, x in enumerate(self.arr(value, path, length))]


def _rebrand(exc: SceneError, path: str) -> SceneError:
    """Prefix a value-level invariant error with its location in the file."""
    inner = getattr(exc, "path", "")
    full = f"{path}.{inner}" if inner else path
    msg = str(exc).split(": ", 1)[-1]
    return type(exc)(full, msg)


def _parse_document(doc: Any) -> SceneSequence:
    r = _Reader()
    top = r.obj(doc, "$", ("views", "frames", "attributes"))
    views = r.int(top["views"], "$.views")
    if views < 1:
        raise SceneInvariantError("$.views", "must be >= 1")
    attrs = tuple(r.str(a, f"$.attributes[{i}]") for i, a in enumerate(r.arr(top["attributes"], "$.attributes")))
    frames_raw = r.arr(top["frames"], "$.frames")
    if not frames_raw:
        raise SceneInvariantError("$.frames", "at least one frame is required")
    frames = []
    for fi, fr in enumerate(frames_raw):
        fp = f"$.frames[{fi}]"
        fr = r.obj(fr, fp, ("cameras", "boxes", "roads"))
        cams_raw = r.arr(fr["cameras"], f"{fp}.cameras")
        if len(cams_raw) != views:
            raise SceneInvariantError(f"{fp}.cameras", f"expected {views} views, got {len(cams_raw)}")
        cams = []
        for ci, cam in enumerate(cams_raw):
            cp = f"{fp}.cameras[{ci}]"
            cam = r.obj(cam, cp, ("intrinsic", "extrinsic"))
            k = r.nums(cam["intrinsic"], f"{cp}.intrinsic", 16)
            e = r.nums(cam["extrinsic"], f"{cp}.extrinsic", 16)
            try:
                cams.append(CameraCalib(tuple(k), tuple(e)))
            except SceneError as exc:
                raise _rebrand(exc, cp) from None
        boxes = []
        for bi, box in enumerate(r.arr(fr["boxes"], f"{fp}.boxes")):
            bp = f"{fp}.boxes[{bi}]"
            box = r.obj(box, bp, ("center", "size", "yaw", "category_id", "track_id"))
            vals = dict(
                center=tuple(r.nums(box["center"], f"{bp}.center", 3)),
                size=tuple(r.nums(box["size"], f"{bp}.size", 3)),
                yaw=r.num(box["yaw"], f"{bp}.yaw"),
                category_id=r.int(box["category_id"], f"{bp}.category_id"),
                track_id=r.int(box["track_id"], f"{bp}.track_id"),
            )
            if vals["category_id"] < 0:
                raise SceneInvariantError(f"{bp}.category_id", "must be >= 0")
            try:
                boxes.append(ObjectBox3D(**vals))
            except SceneError as exc:
                raise _rebrand(exc, bp) from None
        roads = []
        for ri, road in enumerate(r.arr(fr["roads"], f"{fp}.roads")):
            rp = f"{fp}.roads[{ri}]"
            road = r.obj(road, rp, ("points", "lane_type"))
            pts = [tuple(r.nums(p, f"{rp}.points[{pi}]", 2)) for pi, p in enumerate(r.arr(road["points"], f"{rp}.points"))]
            lane = r.str(road["lane_type"], f"{rp}.lane_type")
            try:
                roads.append(RoadPolyline(tuple(pts), lane))
            except SceneError as exc:
                raise _rebrand(exc, rp) from None
        frames.append(Frame(tuple(cams), tuple(boxes), tuple(roads)))
    return SceneSequence(tuple(frames), attrs)


def parse_scene(data) -> SceneSequence:
    """Parse scene JSON (``bytes`` or ``str``) into a validated sequence.

    Raises:
        SceneSyntaxError: malformed JSON (carries ``line``/``col``).
        SceneSchemaError: missing/unknown key, wrong type or arity.
        SceneInvariantError: value-level violation such as a singular matrix.
    """
    if isinstance(data, (bytes, bytearray)):
        try:
            text = bytes(data).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SceneSyntaxError(f"invalid UTF-8: {exc.reason}", 1, exc.start + 1) from None
    else:
        text = data
    try:
        doc = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise _syntax_error(exc) from None
    except ValueError as exc:
        raise SceneSchemaError("$", str(exc)) from None
    return _parse_document(doc)


def load_scene(path) -> SceneSequence:
    with open(path, "rb") as fh:
        return parse_scene(fh.read())


def scene_to_dict(scene: SceneSequence) -> dict:
    return {
        "views": scene.num_views,
        "frames": [
            {
                "cameras": [{"intrinsic": list(c.intrinsic), "extrinsic": list(c.extrinsic)} for c in fr.cameras],
                "boxes": [
                    {
                        "center": list(b.center),
                        "size": list(b.size),
                        "yaw": b.yaw,
                        "category_id": b.category_id,
                        "track_id": b.track_id,
                    }
                    for b in fr.boxes
                ],
                "roads": [{"points": [list(p) for p in r.points], "lane_type": r.lane_type} for r in fr.roads],
            }
            for fr in scene.frames
        ],
        "attributes": list(scene.attributes),
    }


def serialize_scene(scene: SceneSequence, indent=None) -> bytes:
    # json float repr is shortest round-trip, so parse(serialize(s)) == s.
    return json.dumps(scene_to_dict(scene), indent=indent, allow_nan=False).encode("utf-8")


# -- text attributes -------------------------------------------------------


def _tag_row(tag: str, dim: int) -> np.ndarray:
    seed = zlib.crc32(f"{tag}|{dim}".encode("utf-8"))
    return np.random.default_rng(seed).standard_normal(dim)


def text_attribute_embedding(attributes: Iterable[str], dim: int) -> np.ndarray:
    """Deterministic unit-norm embedding of a bag of attribute tags.

    Stand-in for a text encoder: each known tag owns a seeded Gaussian row,
    unknown tags share one reserved row, and a bias row keeps the empty bag
    well-defined.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if isinstance(attributes, str):
        attributes = (attributes,)
    vec = _tag_row(_BIAS_TAG, dim)
    for tag in attributes:
        key = tag.strip().lower()
        vec = vec + _tag_row(key if key in ATTRIBUTE_VOCAB else _RESERVED_TAG, dim)
    norm = np.linalg.norm(vec)
    if norm == 0.0:  # only reachable for dim == 1 with cancelling rows
        vec, norm = np.ones(dim), math.sqrt(dim)
    return vec / norm
