import json
import struct

import numpy as np
import pytest
from PIL import Image

from xmcl.data import (Box, CameraModel, CloudPolicy, ImagePolicy, PairFormatError, Plane, SceneConfig,
                       Texture, augment_cloud, augment_image, flip_image, augment_pair, generate_scene, load_pair_dir,
                       match_points_to_pixels, project_point, project_points, quantize_image, read_corr,
                       read_manifest, read_points, render_scene, save_pair_dir, write_manifest)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(11)


def flat_texture(v):
    return Texture(v, np.zeros((1, 3)), np.zeros(1), np.zeros(1))


def test_projection_matches_homogeneous_matrix(rng):
    cam = CameraModel.looking_forward(32, 64, 40.0, (0.5, -0.2, 1.5), yaw=0.3)
    k = np.array([[cam.focal, 0, cam.cx], [0, cam.focal, cam.cy], [0, 0, 1.0]])
    p_mat = k @ np.hstack([cam.rotation, cam.translation[:, None]])
    pts = cam.center + rng.uniform(-5, 5, (50, 3)) + 8.0 * (cam.rotation.T @ [0, 0, 1.0])
    h = np.hstack([pts, np.ones((50, 1))]) @ p_mat.T
    row, col, depth = project_points(pts, cam)
    front = h[:, 2] > 0
    np.testing.assert_allclose(col[front], h[front, 0] / h[front, 2], rtol=1e-12)
    np.testing.assert_allclose(row[front], h[front, 1] / h[front, 2], rtol=1e-12)
    np.testing.assert_allclose(depth, h[:, 2], rtol=1e-12, atol=1e-12)


def test_world_axes_convention():
    cam = CameraModel.looking_forward(32, 64, 40.0, (0, 0, 1.5))
    # straight ahead lands on the principal point; +y (left) lands left, +z (up) lands up
    r, c, d = project_point([10.0, 0, 1.5], cam)
    assert (r, c, d) == pytest.approx((cam.cy, cam.cx, 10.0))
    assert project_point([10.0, 1.0, 1.5], cam)[1] < cam.cx
    assert project_point([10.0, 0, 2.5], cam)[0] < cam.cy
    assert project_point([-1.0, 0, 1.5], cam) is None


def test_camera_rejects_non_rotation():
    with pytest.raises(ValueError, match="orthonormal"):
        CameraModel(40, 1, 1, 4, 4, np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_zbuffer_occlusion_box_hides_wall():
    cam = CameraModel.looking_forward(16, 16, 12.0, (0, 0, 1.5))
    wall = Plane(np.array([-1.0, 0, 0]), -10.0, flat_texture(0.3))
    box = Box(np.array([4.0, -0.5, 1.0]), np.array([5.0, 0.5, 2.0]), flat_texture(0.9))
    # a point on the box face, a wall point straight behind it, and a wall point off to the side
    pts = np.array([[4.0, 0.0, 1.5], [10.0, 0.0, 1.5 + 1e-3], [10.0, 3.0, 1.5]])
    corr = match_points_to_pixels([wall, box], pts, cam)
    owners = set(corr[:, 2].tolist())
    assert 0 in owners and 2 in owners and 1 not in owners


def test_rendered_scene_correspondences_are_consistent(scene):
    row, col, depth = project_points(scene.xyz[scene.correspondences[:, 2]], scene.camera)
    assert np.all(depth > 0)
    np.testing.assert_array_equal(np.floor(row + 0.5), scene.correspondences[:, 0])
    np.testing.assert_array_equal(np.floor(col + 0.5), scene.correspondences[:, 1])
    pix = scene.correspondences[:, 0] * scene.camera.width + scene.correspondences[:, 1]
    assert len(np.unique(pix)) == len(pix)
    # the owner is the nearest candidate at its pixel
    all_r, all_c, all_d = project_points(scene.xyz, scene.camera)
    for k, (r, c, _) in enumerate(scene.correspondences[:40]):
        same = (np.floor(all_r + 0.5) == r) & (np.floor(all_c + 0.5) == c)
        assert depth[k] <= all_d[same].min() + 1e-12
    assert len(scene.correspondences) >= SceneConfig().min_correspondences


def test_attrs_track_image_texture(scene):
    r, c, i = scene.correspondences.T
    corr = np.corrcoef(scene.image[0, r, c], scene.attrs[i, 0])[0, 1]
    assert corr > 0.5


def test_generation_is_deterministic():
    a, b = generate_scene(5), generate_scene(5)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.xyz, b.xyz)
    np.testing.assert_array_equal(a.correspondences, b.correspondences)
    assert not np.array_equal(a.xyz, generate_scene(6).xyz)


def test_crop_then_map_hits_identical_intensities(scene):
    policy = ImagePolicy(max_shift=4, flip_prob=0.5, scale_range=(1, 1), shift_range=(0, 0), blur_prob=0.0)
    for seed in range(10):
        aug, pmap = augment_image(scene.image, seed, policy)
        ok = pmap[..., 0] >= 0
        rr, cc = np.nonzero(ok)
        np.testing.assert_array_equal(aug[0, pmap[rr, cc, 0], pmap[rr, cc, 1]], scene.image[0, rr, cc])


def test_flip_is_an_involution(scene):
    np.testing.assert_array_equal(flip_image(flip_image(scene.image)), scene.image)


def test_crop_larger_than_image_rejected(scene):
    with pytest.raises(ValueError, match="crops away"):
        augment_image(scene.image, 0, ImagePolicy(max_shift=64))


def test_cloud_index_map(scene):
    pol = CloudPolicy(max_rotation_deg=0.0, jitter_sigma=0.0, keep_fraction=0.5)
    xyz, attrs, idx = augment_cloud(scene.xyz, scene.attrs, 3, pol)
    assert len(np.unique(idx)) == len(idx) == round(0.5 * len(scene.xyz))
    np.testing.assert_array_equal(xyz, scene.xyz[idx])
    np.testing.assert_array_equal(attrs, scene.attrs[idx])
    with pytest.raises(ValueError):
        augment_cloud(scene.xyz, scene.attrs, 3, pol, keep=len(scene.xyz) + 1)


def test_augmented_pair_rows_point_to_the_same_physical_location(scene):
    pair = augment_pair(scene, 4, ImagePolicy(blur_prob=0.0, scale_range=(1, 1), shift_range=(0, 0)),
                        CloudPolicy(max_rotation_deg=0.0, jitter_sigma=0.0))
    s = pair.surviving
    np.testing.assert_array_equal(pair.img_aug[0, s[:, 3], s[:, 4]], scene.image[0, s[:, 0], s[:, 1]])
    np.testing.assert_array_equal(pair.xyz_aug[s[:, 5]], scene.xyz[s[:, 2]])


def test_pair_directory_roundtrip(scene, tmp_path):
    d = save_pair_dir(scene, tmp_path)
    back = load_pair_dir(d)
    np.testing.assert_array_equal(back.image, quantize_image(scene.image) / 65535.0)
    np.testing.assert_array_equal(back.xyz, scene.xyz)
    np.testing.assert_array_equal(back.attrs, scene.attrs)
    np.testing.assert_array_equal(back.correspondences, scene.correspondences)
    assert back.camera.to_dict() == scene.camera.to_dict()
    assert back.scene_id == scene.scene_id
    # second save of the loaded sample is byte-identical
    d2 = save_pair_dir(back, tmp_path / "again")
    for name in ("image.pgm", "points.bin", "corr.txt", "camera.json"):
        assert (d / name).read_bytes() == (d2 / name).read_bytes()


def test_pgm_parses_with_independent_reader(scene, tmp_path):
    d = save_pair_dir(scene, tmp_path)
    with Image.open(d / "image.pgm") as im:
        arr = np.array(im).astype(np.int64)
    np.testing.assert_array_equal(arr, quantize_image(scene.image[0]))


def test_points_bin_layout(scene, tmp_path):
    d = save_pair_dir(scene, tmp_path)
    raw = (d / "points.bin").read_bytes()
    assert raw[:4] == b"XPC1"
    p, a = struct.unpack("<II", raw[4:12])
    assert (p, a) == (len(scene.xyz), 1)
    vals = np.frombuffer(raw[12:], "<f8").reshape(p, 4)
    np.testing.assert_array_equal(vals[:, :3], scene.xyz)


def _broken(tmp_path, scene, name, mutate):
    d = save_pair_dir(scene, tmp_path)
    mutate(d / name)
    return d


@pytest.mark.parametrize("name,mutate,match", [
    ("points.bin", lambda p: p.write_bytes(b"XPC2" + p.read_bytes()[4:]), "bad magic"),
    ("points.bin", lambda p: p.write_bytes(p.read_bytes()[:-8]), "size mismatch"),
    ("image.pgm", lambda p: p.write_bytes(p.read_bytes().replace(b"65535", b"255", 1)), "65535"),
    ("image.pgm", lambda p: p.write_bytes(p.read_bytes()[:-10]), "truncated"),
    ("image.pgm", lambda p: p.write_bytes(b"P2" + p.read_bytes()[2:]), "P5"),
    ("corr.txt", lambda p: p.write_text("1 2 3\n4 x 5\n"), r"corr.txt:2: non-integer"),
    ("corr.txt", lambda p: p.write_text("1 2\n"), r"corr.txt:1: expected"),
    ("corr.txt", lambda p: p.write_text("0 0 999999\n"), r"corr.txt:1: point index 999999 missing"),
    ("corr.txt", lambda p: p.write_text("99 0 1\n"), r"corr.txt:1: pixel"),
    ("camera.json", lambda p: p.write_text("{}"), "camera.json"),
    ("camera.json", lambda p: p.write_text(json.dumps({**json.loads(p.read_text()), "image_size": [8, 8]})),
     "disagrees"),
])
def test_malformed_files_are_rejected(scene, tmp_path, name, mutate, match):
    d = _broken(tmp_path, scene, name, mutate)
    with pytest.raises(PairFormatError, match=match):
        load_pair_dir(d)


def test_pair_dir_name_checked(scene, tmp_path):
    d = save_pair_dir(scene, tmp_path)
    bad = d.rename(tmp_path / "scene_x")
    with pytest.raises(PairFormatError, match="non-integer"):
        load_pair_dir(bad)


def test_manifest_checksum_detects_edits(tmp_path):
    write_manifest(tmp_path, [{"id": 1, "seed": 10}, {"id": 2, "seed": 11}])
    assert read_manifest(tmp_path)[1]["seed"] == 11
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["scenes"][0]["seed"] = 12
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(PairFormatError, match="checksum"):
        read_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(PairFormatError, match="line 1"):
        read_manifest(tmp_path)


def test_read_corr_skips_blank_lines(tmp_path):
    p = tmp_path / "corr.txt"
    p.write_text("1 2 3\n\n4 5 6\n")
    assert read_corr(p).tolist() == [[1, 2, 3], [4, 5, 6]]


def test_points_reader_rejects_short_header(tmp_path):
    p = tmp_path / "points.bin"
    p.write_bytes(b"XPC1\x01")
    with pytest.raises(PairFormatError, match="truncated"):
        read_points(p)


def test_plane_layout_scene_renders():
    s = generate_scene(3, SceneConfig(layout="plane"))
    assert len(s.correspondences) > 64


def test_render_requires_closed_scene():
    cam = CameraModel.looking_forward(8, 8, 6.0)
    with pytest.raises(ValueError, match="no surface"):
        render_scene([], cam, SceneConfig(height=8, width=8), np.random.default_rng(0))
