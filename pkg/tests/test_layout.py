import gzip
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import GOLDEN, extrinsic, intrinsics, rig, street_scene
from panorama_forge import tensorio
from panorama_forge.geometry import direction_field, pose_pseudocolor
from panorama_forge.layout import (
    BOX,
    DEFAULT_PALETTE,
    DEPTH,
    NUM_CHANNELS,
    POSE,
    ROAD,
    ControlTensor,
    box_silhouette,
    depth_bin,
    preview_groups,
    project_box,
    quantize_u8,
    rasterize_frame,
    render_sequence,
    segment_pixels,
    wireframe_mask,
)
from panorama_forge.scene import CameraCalib, Frame, ObjectBox3D, RoadPolyline, SceneSequence, load_scene

W, H = 128, 64


def one_view(boxes=(), roads=(), frames=1, width=W, height=H):
    cams = rig(1, width, height)
    return SceneSequence([Frame(cams, boxes, roads)] * frames)


def project_point(p, calib):
    f = calib.K @ np.linalg.inv(calib.E) @ np.append(p, 1.0)
    return f[0] / f[2], f[1] / f[2], f[2]


# -- golden files -------------------------------------------------------------


@pytest.mark.parametrize("name", ["single_box", "occlusion", "ring"])
def test_golden_bit_exact(name):
    scene = load_scene(os.path.join(GOLDEN, f"{name}.json"))
    with open(os.path.join(GOLDEN, f"{name}.pnc.gz"), "rb") as fh:
        expected = gzip.decompress(fh.read())
    got = tensorio.dumps(render_sequence(scene, W, H, 50.0).data)
    assert got == expected


# -- projection -----------------------------------------------------------------


def test_box_on_optical_axis_projects_symmetrically():
    calib = rig(1, W, H)[0]
    box = ObjectBox3D((10.0, 0.0, 1.5), (2.0, 2.0, 2.0), 0.0, 0, 0)  # camera sits at 1.5 m
    proj = project_box(box, calib, W, H)
    f = W / 2  # 90 degree field of view
    near, far = f / 9.0, f / 11.0
    got = {tuple(np.round(p, 9)) for p in proj.edges.reshape(-1, 2)}
    expected = {(round(64 + su * s, 9), round(32 + sv * s, 9)) for s in (near, far) for su in (-1, 1) for sv in (-1, 1)}
    assert got == expected
    assert sorted(set(np.round(proj.depths.ravel(), 9))) == [9.0, 11.0]
    assert box_silhouette(proj, W, H)[32, 64]


def test_projection_matches_pinhole_formula_for_rotated_box():
    calib = rig(1, W, H)[0]
    box = ObjectBox3D((15.0, 2.0, 1.0), (4.0, 2.0, 1.5), 0.7, 0, 0)
    proj = project_box(box, calib, W, H)
    corners = {tuple(np.round(project_point(c, calib)[:2], 9)) for c in box.corners()}
    assert {tuple(np.round(p, 9)) for p in proj.edges.reshape(-1, 2)} == corners


def test_box_behind_camera_is_empty():
    calib = rig(1, W, H)[0]
    assert project_box(ObjectBox3D((-10.0, 0.0, 1.5), (2.0, 2.0, 2.0), 0.0, 0, 0), calib, W, H).empty


def test_straddling_box_clipped_and_finite():
    calib = rig(1, W, H)[0]
    proj = project_box(ObjectBox3D((0.0, 0.0, 1.5), (4.0, 2.0, 2.0), 0.0, 0, 0), calib, W, H)
    assert not proj.empty
    assert np.isfinite(proj.edges).all() and np.isfinite(proj.depths).all()
    assert proj.depths.min() == pytest.approx(1e-3)
    assert len(proj.edges) < 12  # the rear face is fully behind the near plane


def test_segment_pixels_bresenham_and_clipping():
    # slope 0.4: exact rows 0, .4, .8, 1.2, 1.6, 2 round to 0, 0, 1, 1, 2, 2
    rr, cc = segment_pixels((0.0, 0.0), (5.0, 2.0), 10, 10)
    assert [(int(r), int(c)) for r, c in zip(rr, cc)] == [(0, 0), (0, 1), (1, 2), (1, 3), (2, 4), (2, 5)]
    rr, cc = segment_pixels((-10.0, 5.0), (20.0, 5.0), 10, 10)
    assert list(cc) == list(range(10)) and set(rr) == {5}
    rr, _ = segment_pixels((-5.0, -5.0), (-1.0, -1.0), 10, 10)
    assert rr.size == 0


# -- depth binning --------------------------------------------------------------


@pytest.mark.parametrize("depth, expected", [
    (14.0, 2), (12.0, 2), (0.001, 0), (5.0, 0), (5.0000001, 1), (49.99, 9), (50.0, 9), (0.0, None), (50.01, None),
])
def test_depth_bin_edges(depth, expected):
    assert depth_bin(depth, 50.0) == expected


def test_single_box_depth_channel():
    calib = rig(1, W, H)[0]
    box = ObjectBox3D((16.0, 0.0, 1.5), (4.0, 2.0, 2.0), 0.0, 3, 0)  # nearest face at 14 m
    img = rasterize_frame(one_view([box]), 0, 0, W, H, 50.0)
    sil = box_silhouette(project_box(box, calib, W, H), W, H)
    occ = img[..., DEPTH]
    assert np.all(occ[sil, 2] == 1.0)
    assert np.all(occ[sil].sum(-1) == 1.0)
    assert np.all(occ[~sil] == 0.0)
    edges = wireframe_mask(project_box(box, calib, W, H), W, H)
    np.testing.assert_array_equal(img[edges][:, BOX], np.tile(DEFAULT_PALETTE[3], (edges.sum(), 1)))


def test_near_box_overwrites_far_box():
    calib = rig(1, W, H)[0]
    near = ObjectBox3D((11.0, 0.0, 1.5), (2.0, 2.0, 2.0), 0.0, 1, 0)  # nearest face 10 m
    far = ObjectBox3D((33.0, 0.0, 1.5), (6.0, 8.0, 6.0), 0.0, 2, 1)  # nearest face 30 m
    for order in ([near, far], [far, near]):
        img = rasterize_frame(one_view(order), 0, 0, W, H, 50.0)
        s_near = box_silhouette(project_box(near, calib, W, H), W, H)
        s_far = box_silhouette(project_box(far, calib, W, H), W, H)
        overlap = s_near & s_far
        assert overlap.sum() > 20
        assert np.all(img[overlap][:, DEPTH].argmax(-1) == depth_bin(10.0, 50.0))
        assert np.all(img[s_far & ~s_near][:, DEPTH].argmax(-1) == depth_bin(30.0, 50.0))
        colours = img[overlap][:, BOX]
        lit = colours.max(-1) > 0
        assert lit.any()
        assert np.all(colours[lit] == DEFAULT_PALETTE[1])


def test_empty_scene_only_pose():
    calib = rig(1, W, H)[0]
    img = rasterize_frame(one_view(), 0, 0, W, H)
    assert np.all(img[..., :16] == 0)
    np.testing.assert_array_equal(img[..., POSE], pose_pseudocolor(direction_field(calib, W, H)))


def test_road_painted_with_lane_colour():
    road = RoadPolyline(((3.0, -1.5), (30.0, -1.5)), "boundary")
    img = rasterize_frame(one_view(roads=[road]), 0, 0, W, H)
    painted = img[..., ROAD].max(-1) > 0
    assert painted.sum() > 10
    np.testing.assert_array_equal(np.unique(img[painted][:, ROAD], axis=0), [[1.0, 0.0, 0.0]])
    # the road is to the right of the camera and below the horizon
    rows, cols = np.nonzero(painted)
    assert rows.min() > H // 2 - 1 and cols.min() >= W // 2


def test_translation_along_axis_never_decreases_bin():
    bins = []
    for x in np.arange(4.0, 60.0, 1.5):
        img = rasterize_frame(one_view([ObjectBox3D((x, 0.0, 1.5), (2.0, 2.0, 2.0), 0.0, 0, 0)]), 0, 0, W, H, 50.0)
        occ = img[32, 64, DEPTH]
        bins.append(int(occ.argmax()) if occ.any() else 10)
    assert bins == sorted(bins)
    assert bins[0] == 0 and bins[-1] == 10


# -- sequences ------------------------------------------------------------------


def test_full_resolution_shape():
    ct = render_sequence(street_scene(views=6, frames=8), 512, 256)
    assert ct.shape == (6, 8, 256, 512, 19)
    ct.validate()


def test_static_scene_identical_slices():
    ct = render_sequence(one_view([ObjectBox3D((12.0, 1.0, 1.0), (4.0, 2.0, 1.5), 0.2, 0, 0)], frames=3), W, H)
    assert np.array_equal(ct.data[:, 0], ct.data[:, 1]) and np.array_equal(ct.data[:, 0], ct.data[:, 2])


def test_threaded_render_identical():
    scene = street_scene(views=3, frames=2, width=W, height=H)
    a = render_sequence(scene, W, H, workers=1).data
    b = render_sequence(scene, W, H, workers=4).data
    assert a.tobytes() == b.tobytes()


def test_rasterize_rejects_bad_arguments():
    scene = one_view()
    with pytest.raises(IndexError):
        rasterize_frame(scene, 1, 0, W, H)
    with pytest.raises(IndexError):
        rasterize_frame(scene, 0, 3, W, H)
    with pytest.raises(ValueError):
        rasterize_frame(scene, 0, 0, 7, H)
    with pytest.raises(ValueError):
        rasterize_frame(scene, 0, 0, W, H, d_max=0.0)


def test_control_tensor_file_roundtrip(tmp_path):
    ct = render_sequence(street_scene(views=2, frames=1, width=64, height=32), 64, 32)
    ct.save(tmp_path / "c.pnc")
    back = ControlTensor.load(tmp_path / "c.pnc")
    assert back.data.tobytes() == ct.data.tobytes()


def test_control_tensor_validate_catches_bad_ranges():
    data = np.zeros((1, 1, 8, 8, NUM_CHANNELS), np.float32)
    data[0, 0, 0, 0, 11] = 1.5
    with pytest.raises(ValueError):
        ControlTensor(data).validate()
    data[0, 0, 0, 0, 11] = 0
    data[0, 0, 0, 0, :2] = 1
    with pytest.raises(ValueError):
        ControlTensor(data).validate()


def test_quantize_round_half_up():
    np.testing.assert_array_equal(quantize_u8(np.array([0.5, 1.5, 2.4999, 254.5, -3, 300])), [1, 2, 2, 255, 0, 255])


def test_previews_are_u8_rgb():
    ct = render_sequence(street_scene(views=1, frames=1, width=W, height=H), W, H)
    groups = preview_groups(ct, 0, 0)
    assert set(groups) == {"depth", "boxes", "roads", "pose"}
    assert all(g.dtype == np.uint8 and g.shape == (H, W, 3) for g in groups.values())


# -- randomised invariants ------------------------------------------------------

WS, HS = 32, 16


@st.composite
def random_layout(draw):
    V = draw(st.integers(1, 2))
    K = intrinsics(WS, HS, draw(st.floats(50, 130)))
    cams = []
    for _ in range(V):
        yaw = draw(st.floats(-math.pi, math.pi))
        cams.append(CameraCalib.from_matrices(K, extrinsic(yaw, draw(st.floats(0.3, 3.0)))))
    coord = st.floats(-40, 40)
    boxes = [ObjectBox3D((draw(coord), draw(coord), draw(st.floats(-1, 3))),
                         tuple(draw(st.floats(0.2, 12)) for _ in range(3)),
                         draw(st.floats(-math.pi, math.pi, exclude_max=True)), draw(st.integers(0, 25)), i)
             for i in range(draw(st.integers(0, 5)))]
    roads = [RoadPolyline(tuple((draw(coord), draw(coord)) for _ in range(draw(st.integers(2, 4)))),
                          draw(st.sampled_from(["divider", "boundary", "crossing"])))
             for _ in range(draw(st.integers(0, 3)))]
    return SceneSequence([Frame(cams, boxes, roads)]), draw(st.floats(1.0, 80.0))


@settings(max_examples=1000, deadline=None)
@given(random_layout())
def test_random_scenes_respect_channel_invariants(case):
    scene, d_max = case
    ct = render_sequence(scene, WS, HS, d_max)
    d = ct.data
    assert d.shape == (scene.num_views, 1, HS, WS, NUM_CHANNELS)
    assert np.isfinite(d).all()
    assert d[..., :16].min() >= 0 and d[..., :16].max() <= 1
    assert d[..., POSE].min() >= 0 and d[..., POSE].max() <= 255
    assert set(np.unique(d[..., DEPTH].sum(-1))) <= {0.0, 1.0}
    ct.validate()


@settings(max_examples=200, deadline=None)
@given(random_layout())
def test_overlaps_take_the_nearest_box(case):
    scene, d_max = case
    calib = scene.frames[0].cameras[0]
    img = rasterize_frame(scene, 0, 0, WS, HS, d_max)
    projected = [(project_box(b, calib, WS, HS), b) for b in scene.frames[0].boxes]
    projected = [(p.nearest_depth, box_silhouette(p, WS, HS), b) for p, b in projected if not p.empty]
    if len(projected) < 2:
        return
    depth = np.full((HS, WS), np.inf)
    for d, sil, _ in projected:
        depth[sil] = np.minimum(depth[sil], d)
    covered = sum(sil.astype(int) for _, sil, _ in projected) >= 2
    for r, c in zip(*np.nonzero(covered)):
        expected = depth_bin(depth[r, c], d_max)
        occ = img[r, c, DEPTH]
        if expected is None:
            continue  # nearest box lies beyond d_max; bins come from nothing nearer
        assert occ.argmax() == expected and occ.sum() == 1
