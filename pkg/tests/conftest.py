import math
import os
import sys

import numpy as np
import pytest

from panorama_forge.scene import CameraCalib, Frame, ObjectBox3D, RoadPolyline, SceneSequence

HERE = os.path.dirname(__file__)
GOLDEN = os.path.join(HERE, "golden")

# camera axes (x right, y down, z forward) expressed in the z-up ego frame
CAM_TO_EGO = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def intrinsics(width, height, fov_deg=90.0):
    f = (width / 2) / math.tan(math.radians(fov_deg) / 2)
    return np.array([[f, 0, width / 2, 0], [0, f, height / 2, 0], [0, 0, 1, 0], [0, 0, 0, 1.0]])


def extrinsic(yaw, height=1.5, offset=(0.0, 0.0)):
    c, s = math.cos(yaw), math.sin(yaw)
    rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    E = np.eye(4)
    E[:3, :3] = rz @ CAM_TO_EGO
    E[:3, 3] = (offset[0], offset[1], height)
    return E


def rig(views, width=512, height=256, fov_deg=90.0):
    K = intrinsics(width, height, fov_deg)
    return tuple(CameraCalib.from_matrices(K, extrinsic(2 * math.pi * v / views)) for v in range(views))


def street_scene(views=2, frames=2, width=512, height=256, attributes=("sunny", "daytime")):
    """A car ahead moving forward, a truck to the left, two lane lines."""
    cams = rig(views, width, height)
    out = []
    for t in range(frames):
        boxes = (
            ObjectBox3D((12.0 + 0.5 * t, 0.5, 0.8), (4.2, 1.8, 1.6), 0.1, 0, 1),
            ObjectBox3D((25.0, 6.0, 1.5), (8.0, 2.5, 3.0), -0.2, 1, 2),
        )
        roads = (
            RoadPolyline(((0.0, -2.0), (20.0, -2.0), (45.0, -1.5)), "divider"),
            RoadPolyline(((0.0, 3.5), (45.0, 3.5)), "boundary"),
        )
        out.append(Frame(cams, boxes, roads))
    return SceneSequence(tuple(out), tuple(attributes))


@pytest.fixture
def scene2():
    return street_scene()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, seconds, detail in sorted(results, key=lambda r: r[0]):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"{status} criterion {number}: {title} [{seconds:.1f}s] {detail}")
