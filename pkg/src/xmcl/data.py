"""Synthetic image / point-cloud scenes with exact pixel-point correspondences.

World frame: x forward, y left, z up. Scenes are a ground plane, a back wall,
boxes and spheres with procedural reflectance textures. The image is ray
cast through pixel centers; the cloud is a LiDAR-style set of first hits from
a sensor mounted near the camera. A point corresponds to a pixel when the
camera sees it (nothing closer along the camera ray) and it is the nearest
visible point landing on that rounded pixel.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kernels

CAM_FROM_WORLD_AXES = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
_VIS_TOL = 1e-6


class PairFormatError(ValueError):
    """Malformed pair-directory file; the message names file and line/offset."""


class InsufficientCorrespondences(ValueError):
    pass


# --------------------------------------------------------------------------
# camera
# --------------------------------------------------------------------------

@dataclass
class CameraModel:
    focal: float
    cx: float  # principal point, column
    cy: float  # principal point, row
    height: int
    width: int
    rotation: np.ndarray  # world -> camera, 3x3
    translation: np.ndarray  # world -> camera

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("CameraModel rotation must be orthonormal with determinant 1")

    @classmethod
    def looking_forward(cls, height: int, width: int, focal: float, center=(0.0, 0.0, 1.5),
                        yaw: float = 0.0) -> "CameraModel":
        c, s = np.cos(yaw), np.sin(yaw)
        world_from_body = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        rot = CAM_FROM_WORLD_AXES @ world_from_body.T
        center = np.asarray(center, dtype=np.float64)
        return cls(focal, (width - 1) / 2.0, (height - 1) / 2.0, height, width, rot, -rot @ center)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "focal": self.focal,
            "principal_point": [self.cx, self.cy],
            "image_size": [self.height, self.width],
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(float(d["focal"]), float(d["principal_point"][0]), float(d["principal_point"][1]),
                   int(d["image_size"][0]), int(d["image_size"][1]),
                   np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
                   np.array(d["translation"], dtype=np.float64))

    def pixel_rays(self) -> np.ndarray:
        """Unit world-frame ray directions through every pixel center, ``[H*W, 3]``."""
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        d_cam = np.stack([(cols.ravel() - self.cx) / self.focal,
                          (rows.ravel() - self.cy) / self.focal,
                          np.ones(rows.size)], axis=1)
        d = d_cam @ self.rotation
        return d / np.linalg.norm(d, axis=1, keepdims=True)


def project_points(xyz: np.ndarray, cam: CameraModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized pinhole projection: continuous ``(row, col)`` and camera depth.

    Points with depth <= 0 get NaN pixel coordinates.
    """
    p = np.asarray(xyz, dtype=np.float64).reshape(-1, 3) @ cam.rotation.T + cam.translation
    depth = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        col = cam.focal * p[:, 0] / depth + cam.cx
        row = cam.focal * p[:, 1] / depth + cam.cy
    behind = depth <= 0
    row[behind] = np.nan
    col[behind] = np.nan
    return row, col, depth


def project_point(xyz, cam: CameraModel) -> tuple[float, float, float] | None:
    """Project one world point; ``None`` marks a point at or behind the camera."""
    row, col, depth = project_points(np.asarray(xyz, dtype=np.float64)[None], cam)
    if depth[0] <= 0:
        return None
    return float(row[0]), float(col[0]), float(depth[0])


def round_pixel(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


# --------------------------------------------------------------------------
# primitives and ray casting
# --------------------------------------------------------------------------

@dataclass
class Texture:
    base: float
    freqs: np.ndarray  # [K, 3] cycles per meter
    phases: np.ndarray  # [K]
    amps: np.ndarray  # [K]

    @classmethod
    def random(cls, rng: np.random.Generator, n: int = 3) -> "Texture":
        dirs = rng.standard_normal((n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return cls(float(rng.uniform(0.25, 0.75)), dirs * rng.uniform(0.15, 0.7, (n, 1)),
                   rng.uniform(0, 2 * np.pi, n), rng.uniform(0.1, 0.25, n))

    def __call__(self, p: np.ndarray) -> np.ndarray:
        v = self.base + (self.amps * np.sin(2 * np.pi * p @ self.freqs.T + self.phases)).sum(axis=1)
        return np.clip(v, 0.0, 1.0)


@dataclass
class Plane:
    normal: np.ndarray
    offset: float  # normal . p = offset
    texture: Texture

    def intersect(self, o: np.ndarray, d: np.ndarray):
        denom = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - o @ self.normal) / denom
        t = np.where((np.abs(denom) > 1e-12) & (t > 1e-9), t, np.inf)
        n = np.broadcast_to(self.normal, d.shape)
        return t, n


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    texture: Texture

    def intersect(self, o: np.ndarray, d: np.ndarray):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (self.lo - o) * inv
            t2 = (self.hi - o) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        tmin = np.where(np.isnan(tmin), -np.inf, tmin)
        tmax = np.where(np.isnan(tmax), np.inf, tmax)
        t_near = tmin.max(axis=1)
        t_far = tmax.min(axis=1)
        hit = (t_near <= t_far) & (t_far > 1e-9)
        t = np.where(hit, np.where(t_near > 1e-9, t_near, t_far), np.inf)
        axis = np.argmax(tmin, axis=1)
        n = np.zeros_like(d)
        n[np.arange(len(d)), axis] = -np.sign(d[np.arange(len(d)), axis])
        return t, n


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    texture: Texture

    def intersect(self, o: np.ndarray, d: np.ndarray):
        oc = o - self.center
        b = (oc * d).sum(axis=1)
        c = (oc * oc).sum(axis=1) - self.radius ** 2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        t = np.where(disc >= 0, t, np.inf)
        p = o + d * np.where(np.isfinite(t), t, 0.0)[:, None]
        n = (p - self.center) / self.radius
        return t, n


def cast_rays(prims: list, origins: np.ndarray, dirs: np.ndarray):
    """First hit of each ray: distance, primitive id (-1 for none), normal."""
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    best_t = np.full(len(dirs), np.inf)
    best_id = np.full(len(dirs), -1, dtype=np.int64)
    best_n = np.zeros_like(dirs)
    for k, prim in enumerate(prims):
        t, n = prim.intersect(origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_id = np.where(closer, k, best_id)
        best_n = np.where(closer[:, None], n, best_n)
    return best_t, best_id, best_n


def shade(prims: list, points: np.ndarray, prim_id: np.ndarray) -> np.ndarray:
    """Reflectance of each hit point from its primitive's texture."""
    out = np.zeros(len(points))
    for k, prim in enumerate(prims):
        sel = prim_id == k
        if sel.any():
            out[sel] = prim.texture(points[sel])
    return out


# --------------------------------------------------------------------------
# scenes
# --------------------------------------------------------------------------

@dataclass
class SceneConfig:
    height: int = 32
    width: int = 64
    focal: float = 40.0
    n_points: int = 1024
    n_boxes: int = 4
    n_spheres: int = 2
    wall_distance: float = 18.0
    camera_height: float = 1.5
    lidar_offset: tuple[float, float, float] = (-0.3, 0.0, 0.3)
    lidar_fov_margin_deg: float = 4.0
    intensity_noise: float = 0.02
    min_correspondences: int = 64
    layout: str = "random"  # random | plane

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "lidar_offset" in d:
            d["lidar_offset"] = tuple(d["lidar_offset"])
        return cls(**d)


@dataclass
class SceneSample:
    image: np.ndarray  # [1, H, W] in [0, 1]
    xyz: np.ndarray  # [P, 3]
    attrs: np.ndarray  # [P, A]
    correspondences: np.ndarray  # [K, 3] int64 rows of (row, col, point_index)
    camera: CameraModel
    scene_id: int = 0
    rng_seed: int | None = None

    def __post_init__(self):
        self.correspondences = np.asarray(self.correspondences, dtype=np.int64).reshape(-1, 3)
        validate_correspondences(self.correspondences, self.image.shape[-2:], self.xyz.shape[0])


def validate_correspondences(corr: np.ndarray, hw, n_points: int, source: str = "correspondences") -> None:
    h, w = hw
    for line, (r, c, i) in enumerate(corr, start=1):
        if not (0 <= r < h and 0 <= c < w):
            raise PairFormatError(f"{source}:{line}: pixel ({r}, {c}) outside {h}x{w} image")
        if not 0 <= i < n_points:
            raise PairFormatError(f"{source}:{line}: point index {i} missing (cloud has {n_points} points)")
    if len(np.unique(corr[:, 2])) != len(corr):
        raise PairFormatError(f"{source}: a point index appears more than once")


def _random_primitives(rng: np.random.Generator, cfg: SceneConfig) -> list:
    prims: list = [
        Plane(np.array([0.0, 0.0, 1.0]), 0.0, Texture.random(rng)),
        Plane(np.array([-1.0, 0.0, 0.0]), -cfg.wall_distance, Texture.random(rng)),
    ]
    if cfg.layout == "plane":
        return prims[1:]
    for _ in range(cfg.n_boxes):
        cx, cy = rng.uniform(4.0, 14.0), rng.uniform(-5.0, 5.0)
        sx, sy, sz = rng.uniform(0.6, 2.0), rng.uniform(0.6, 2.5), rng.uniform(0.5, 3.0)
        lo = np.array([cx - sx / 2, cy - sy / 2, 0.0])
        prims.append(Box(lo, lo + np.array([sx, sy, sz]), Texture.random(rng)))
    for _ in range(cfg.n_spheres):
        r = rng.uniform(0.4, 1.2)
        c = np.array([rng.uniform(4.0, 14.0), rng.uniform(-5.0, 5.0), r + rng.uniform(0.0, 1.0)])
        prims.append(Sphere(c, r, Texture.random(rng)))
    return prims


def render_scene(prims: list, cam: CameraModel, cfg: SceneConfig, rng: np.random.Generator,
                 scene_id: int = 0, seed: int | None = None, lidar_dirs: np.ndarray | None = None) -> SceneSample:
    """Ray cast the image and the LiDAR cloud for a primitive list, then match them."""
    cam_c = cam.center
    t, pid, normal = cast_rays(prims, cam_c, cam.pixel_rays())
    if np.isinf(t).any():
        raise ValueError("render_scene: some pixels see no surface; close the scene with a wall")
    dirs = cam.pixel_rays()
    hits = cam_c + dirs * t[:, None]
    refl = shade(prims, hits, pid)
    sun = np.array([-0.4, 0.3, 0.87])
    sun /= np.linalg.norm(sun)
    lambert = np.abs(normal @ sun)
    image = np.clip(refl * (0.55 + 0.45 * lambert), 0.0, 1.0).reshape(1, cam.height, cam.width)

    lidar_o = cam_c + np.asarray(cfg.lidar_offset, dtype=np.float64)
    if lidar_dirs is None:
        lidar_dirs = _lidar_directions(rng, cam, cfg)
    lt, lid, _ = cast_rays(prims, lidar_o, lidar_dirs)
    keep = np.isfinite(lt)
    xyz = lidar_o + lidar_dirs[keep] * lt[keep, None]
    attrs = shade(prims, xyz, lid[keep])
    if cfg.intensity_noise > 0:
        attrs = np.clip(attrs + rng.normal(0.0, cfg.intensity_noise, attrs.shape), 0.0, 1.0)
    corr = match_points_to_pixels(prims, xyz, cam)
    return SceneSample(image, xyz, attrs[:, None], corr, cam, scene_id, seed)


def _lidar_directions(rng: np.random.Generator, cam: CameraModel, cfg: SceneConfig) -> np.ndarray:
    margin = np.deg2rad(cfg.lidar_fov_margin_deg)
    half_h = np.arctan((cam.width / 2) / cam.focal) + margin
    half_v = np.arctan((cam.height / 2) / cam.focal) + margin
    az = rng.uniform(-half_h, half_h, cfg.n_points)
    el = rng.uniform(-half_v, half_v, cfg.n_points)
    body = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)
    # body frame follows the camera heading
    fwd = cam.rotation.T @ np.array([0.0, 0.0, 1.0])
    yaw = np.arctan2(fwd[1], fwd[0])
    c, s = np.cos(yaw), np.sin(yaw)
    return body @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).T


def camera_visible(prims: list, xyz: np.ndarray, cam: CameraModel) -> np.ndarray:
    """True where nothing lies between the camera center and the point."""
    c = cam.center
    v = xyz - c
    dist = np.linalg.norm(v, axis=1)
    t, _, _ = cast_rays(prims, c, v / dist[:, None])
    return t >= dist * (1.0 - _VIS_TOL)


def match_points_to_pixels(prims: list, xyz: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Correspondences ``(row, col, point_index)`` sorted by point index."""
    row, col, depth = project_points(xyz, cam)
    valid = (depth > 0) & camera_visible(prims, xyz, cam)
    r = np.where(valid, round_pixel(np.nan_to_num(row)), -1)
    c = np.where(valid, round_pixel(np.nan_to_num(col)), -1)
    _, owner = kernels.zbuffer(r, c, depth, valid, cam.height, cam.width)
    rr, cc = np.nonzero(owner >= 0)
    idx = owner[rr, cc]
    order = np.argsort(idx)
    return np.stack([rr[order], cc[order], idx[order]], axis=1).astype(np.int64)


def point_zbuffer(sample: SceneSample) -> np.ndarray:
    """Depth z-buffer of the points that own a pixel (inf elsewhere)."""
    zbuf = np.full((sample.camera.height, sample.camera.width), np.inf)
    _, _, depth = project_points(sample.xyz[sample.correspondences[:, 2]], sample.camera)
    zbuf[sample.correspondences[:, 0], sample.correspondences[:, 1]] = depth
    return zbuf


def generate_scene(seed: int, cfg: SceneConfig | None = None, scene_id: int | None = None) -> SceneSample:
    """Deterministic random scene for ``seed``."""
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(seed)
    cam = CameraModel.looking_forward(cfg.height, cfg.width, cfg.focal, (0.0, 0.0, cfg.camera_height))
    prims = _random_primitives(rng, cfg)
    sample = render_scene(prims, cam, cfg, rng, scene_id=seed if scene_id is None else scene_id, seed=seed)
    if len(sample.correspondences) < cfg.min_correspondences:
        raise InsufficientCorrespondences(
            f"scene seed {seed}: {len(sample.correspondences)} correspondences < {cfg.min_correspondences}")
    return sample


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

@dataclass
class ImagePolicy:
    max_shift: int = 4
    flip_prob: float = 0.0
    scale_range: tuple[float, float] = (0.8, 1.2)
    shift_range: tuple[float, float] = (-0.1, 0.1)
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.3, 0.8)

    @classmethod
    def identity(cls) -> "ImagePolicy":
        return cls(0, 0.0, (1.0, 1.0), (0.0, 0.0), 0.0, (0.0, 0.0))


@dataclass
class CloudPolicy:
    max_rotation_deg: float = 10.0
    jitter_sigma: float = 0.01
    keep_fraction: float = 0.9

    @classmethod
    def identity(cls) -> "CloudPolicy":
        return cls(0.0, 0.0, 1.0)


def translate_image(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape[-2:]
    src_r = slice(max(0, -dy), min(h, h - dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_r = slice(max(0, dy), min(h, h + dy))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[..., dst_r, dst_c] = img[..., src_r, src_c]
    return out


def flip_image(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def augment_image(img: np.ndarray, seed: int, policy: ImagePolicy) -> tuple[np.ndarray, np.ndarray]:
    """Translate-crop, flip, intensity affine, blur.

    Returns the augmented image and a ``[H, W, 2]`` map sending each original
    pixel to its augmented location, ``-1`` where the pixel was cropped away.
    """
    h, w = img.shape[-2:]
    if policy.max_shift >= min(h, w):
        raise ValueError(f"augment_image: shift {policy.max_shift} crops away the whole {h}x{w} image")
    rng = np.random.default_rng(seed)
    dy, dx = (rng.integers(-policy.max_shift, policy.max_shift + 1, 2) if policy.max_shift else (0, 0))
    flip = rng.random() < policy.flip_prob
    a = rng.uniform(*policy.scale_range)
    b = rng.uniform(*policy.shift_range)
    blur = rng.random() < policy.blur_prob
    sigma = rng.uniform(*policy.blur_sigma)

    out = translate_image(img, int(dy), int(dx))
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    nr, nc = rows + dy, cols + dx
    if flip:
        out = flip_image(out)
        nc = w - 1 - nc
    alive = (rows + dy >= 0) & (rows + dy < h) & (cols + dx >= 0) & (cols + dx < w)
    pix_map = np.where(alive[..., None], np.stack([nr, nc], axis=-1), -1).astype(np.int64)
    if a != 1.0 or b != 0.0:
        out = np.clip(out * a + b, 0.0, 1.0)
    if blur and sigma > 0:
        out = np.stack([gaussian_filter(ch, sigma, mode="nearest") for ch in out])
    return out, pix_map


def rotate_z(xyz: np.ndarray, theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return xyz @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).T


def augment_cloud(xyz: np.ndarray, attrs: np.ndarray, seed: int, policy: CloudPolicy,
                  keep: int | None = None):
    """Rotate about the vertical axis, jitter, subsample without replacement.

    Returns ``(xyz', attrs', index_map)`` where ``index_map[j]`` is the
    original index of augmented point ``j``.
    """
    p = xyz.shape[0]
    k = int(round(policy.keep_fraction * p)) if keep is None else int(keep)
    if k > p:
        raise ValueError(f"augment_cloud: cannot keep {k} of {p} points")
    rng = np.random.default_rng(seed)
    theta = np.deg2rad(rng.uniform(-policy.max_rotation_deg, policy.max_rotation_deg))
    jitter = rng.normal(0.0, 1.0, xyz.shape) * policy.jitter_sigma
    idx = np.sort(rng.choice(p, size=k, replace=False)) if k < p else np.arange(p)
    out = xyz if theta == 0.0 else rotate_z(xyz, theta)
    if policy.jitter_sigma > 0:
        out = out + jitter
    return out[idx], attrs[idx], idx


@dataclass
class AugmentedPair:
    sample: SceneSample
    img_aug: np.ndarray
    pix_map: np.ndarray
    xyz_aug: np.ndarray
    attrs_aug: np.ndarray
    index_map: np.ndarray
    # rows: (row, col, point_index, aug_row, aug_col, aug_point_index)
    surviving: np.ndarray = field(default_factory=lambda: np.zeros((0, 6), np.int64))


def augment_pair(sample: SceneSample, seed: int, img_policy: ImagePolicy, cloud_policy: CloudPolicy) -> AugmentedPair:
    ss = np.random.SeedSequence(seed).spawn(2)
    img_seed = int(ss[0].generate_state(1)[0])
    pc_seed = int(ss[1].generate_state(1)[0])
    img_aug, pix_map = augment_image(sample.image, img_seed, img_policy)
    xyz_aug, attrs_aug, idx_map = augment_cloud(sample.xyz, sample.attrs, pc_seed, cloud_policy)
    inverse = np.full(sample.xyz.shape[0], -1, dtype=np.int64)
    inverse[idx_map] = np.arange(len(idx_map))
    corr = sample.correspondences
    mapped = pix_map[corr[:, 0], corr[:, 1]]
    aug_pt = inverse[corr[:, 2]]
    ok = (mapped[:, 0] >= 0) & (aug_pt >= 0)
    surviving = np.concatenate([corr[ok], mapped[ok], aug_pt[ok, None]], axis=1)
    return AugmentedPair(sample, img_aug, pix_map, xyz_aug, attrs_aug, idx_map, surviving)


def sample_rows(n_available: int, n: int, seed: int) -> np.ndarray:
    """``n`` distinct row indices, drawn without replacement."""
    if n > n_available:
        raise InsufficientCorrespondences(f"need {n} correspondences, only {n_available} survive")
    if n == n_available:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n_available, size=n, replace=False))


# --------------------------------------------------------------------------
# pair directory format
# --------------------------------------------------------------------------

POINTS_MAGIC = b"XPC1"


def quantize_image(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)


def write_pgm16(path: Path, img: np.ndarray) -> None:
    q = quantize_image(img[0] if img.ndim == 3 else img)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(q.astype(">u2").tobytes())


def read_pgm16(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PairFormatError(f"{path}: truncated header at offset {pos}")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise PairFormatError(f"{path}: offset 0: expected P5 magic, got {tokens[0]!r}")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise PairFormatError(f"{path}: bad header field ({exc})") from exc
    if maxval != 65535:
        raise PairFormatError(f"{path}: expected 16-bit maxval 65535, got {maxval}")
    need = 2 * w * h
    if len(raw) - pos < need:
        raise PairFormatError(f"{path}: truncated pixel data at offset {len(raw)} (need {need} bytes from {pos})")
    q = np.frombuffer(raw[pos:pos + need], dtype=">u2").reshape(h, w)
    return (q.astype(np.float64) / 65535.0)[None]


def write_points(path: Path, xyz: np.ndarray, attrs: np.ndarray) -> None:
    p, a = xyz.shape[0], attrs.shape[1]
    body = np.concatenate([xyz, attrs], axis=1).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(POINTS_MAGIC)
        fh.write(struct.pack("<II", p, a))
        fh.write(body.tobytes())


def read_points(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != POINTS_MAGIC:
        raise PairFormatError(f"{path}: offset 0: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise PairFormatError(f"{path}: truncated header at offset {len(raw)}")
    p, a = struct.unpack_from("<II", raw, 4)
    need = 12 + 8 * p * (3 + a)
    if len(raw) != need:
        raise PairFormatError(f"{path}: size mismatch at offset {len(raw)}: expected {need} bytes for P={p}, A={a}")
    vals = np.frombuffer(raw[12:], dtype="<f8").astype(np.float64).reshape(p, 3 + a)
    return vals[:, :3].copy(), vals[:, 3:].copy()


def write_corr(path: Path, corr: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r, c, i in corr:
            fh.write(f"{r} {c} {i}\n")


def read_corr(path: Path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise PairFormatError(f"{path}:{line_no}: expected 'row col point_index', got {line.strip()!r}")
            try:
                rows.append([int(x) for x in parts])
            except ValueError:
                raise PairFormatError(f"{path}:{line_no}: non-integer field in {line.strip()!r}") from None
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def save_pair_dir(sample: SceneSample, root: str | Path) -> Path:
    d = Path(root) / f"scene_{sample.scene_id}"
    d.mkdir(parents=True, exist_ok=True)
    write_pgm16(d / "image.pgm", sample.image)
    write_points(d / "points.bin", sample.xyz, sample.attrs)
    write_corr(d / "corr.txt", sample.correspondences)
    (d / "camera.json").write_text(json.dumps(sample.camera.to_dict(), indent=2) + "\n", encoding="utf-8")
    return d


def load_pair_dir(path: str | Path, rng_seed: int | None = None) -> SceneSample:
    d = Path(path)
    name = d.name
    if not name.startswith("scene_"):
        raise PairFormatError(f"{d}: directory name must be scene_<id>")
    try:
        scene_id = int(name[len("scene_"):])
    except ValueError:
        raise PairFormatError(f"{d}: non-integer scene id") from None
    image = read_pgm16(d / "image.pgm")
    xyz, attrs = read_points(d / "points.bin")
    corr = read_corr(d / "corr.txt")
    try:
        cam = CameraModel.from_dict(json.loads((d / "camera.json").read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise PairFormatError(f"{d / 'camera.json'}: {exc}") from exc
    if (cam.height, cam.width) != image.shape[-2:]:
        raise PairFormatError(f"{d / 'camera.json'}: image_size {cam.height}x{cam.width} "
                              f"disagrees with image.pgm {image.shape[-2]}x{image.shape[-1]}")
    validate_correspondences(corr, image.shape[-2:], xyz.shape[0], source=str(d / "corr.txt"))
    return SceneSample(image, xyz, attrs, corr, cam, scene_id, rng_seed)


def _manifest_checksum(entries: list[dict]) -> str:
    return hashlib.sha256(json.dumps(entries, sort_keys=True).encode("utf-8")).hexdigest()


def write_manifest(root: str | Path, entries: list[dict], config: dict | None = None) -> Path:
    path = Path(root) / "manifest.json"
    doc = {"scenes": entries, "checksum": _manifest_checksum(entries)}
    if config is not None:
        doc["scene_config"] = config
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


def read_manifest(root: str | Path) -> list[dict]:
    path = Path(root) / "manifest.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise PairFormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    entries = doc.get("scenes")
    if not isinstance(entries, list) or doc.get("checksum") != _manifest_checksum(entries):
        raise PairFormatError(f"{path}: manifest checksum mismatch (corrupted or hand-edited)")
    return entries


def load_dataset(root: str | Path) -> list[SceneSample]:
    return [load_pair_dir(Path(root) / f"scene_{e['id']}", e.get("seed")) for e in read_manifest(root)]


def scene_config_dict(cfg: SceneConfig) -> dict:
    d = asdict(cfg)
    d["lidar_offset"] = list(cfg.lidar_offset)
    return d
