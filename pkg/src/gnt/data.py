"""Procedural scenes, a ground-truth raytracer, and dataset io.

Scenes are a handful of spheres and axis-aligned boxes with flat or
lambertian shading under one directional light (optional Phong
highlight), raytraced analytically so every dataset ships with exact
images and depth maps. Datasets serialize to a directory holding
scene.json plus one PPM image (and one PFM depth map) per frame.

Depth maps store the ray parameter of the first hit (euclidean distance
along the unit ray); the raytracer reports misses as inf and datasets
store them clamped to the far plane.

File formats:
- PPM: binary P6, maxval 255, values round(255 * v).
- PFM: grayscale 'Pf', scale -1.0 (little-endian), rows bottom-to-top
  as the format prescribes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Camera, rays_for_pixels
from .tensor import ContractError

__all__ = [
    "Sphere",
    "Box",
    "SceneSpec",
    "Dataset",
    "generate_scene",
    "raytrace_gt",
    "ring_cameras",
    "make_dataset",
    "save_dataset",
    "load_dataset",
    "write_ppm",
    "read_ppm",
    "write_pfm",
    "read_pfm",
]

_EPS = 1e-9


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "albedo", np.asarray(self.albedo, dtype=np.float64).reshape(3))
        if self.radius <= 0:
            raise ContractError("sphere radius must be positive")

    @property
    def bound_radius(self) -> float:
        return float(np.linalg.norm(self.center) + self.radius)

    @property
    def aabb(self):
        return self.center - self.radius, self.center + self.radius


@dataclass(frozen=True)
class Box:
    low: np.ndarray
    high: np.ndarray
    albedo: np.ndarray

    def __post_init__(self):
        low = np.asarray(self.low, dtype=np.float64).reshape(3)
        high = np.asarray(self.high, dtype=np.float64).reshape(3)
        if np.any(high <= low):
            raise ContractError("box high must exceed low on every axis")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)
        object.__setattr__(self, "albedo", np.asarray(self.albedo, dtype=np.float64).reshape(3))

    @property
    def bound_radius(self) -> float:
        corner = np.maximum(np.abs(self.low), np.abs(self.high))
        return float(np.linalg.norm(corner))

    @property
    def aabb(self):
        return self.low.copy(), self.high.copy()


@dataclass(frozen=True)
class SceneSpec:
    """Primitive list plus lighting model.

    ``light_dir`` is the direction light travels (unit); ``shading`` is
    'flat' (albedo regardless of geometry) or 'lambertian'
    (albedo * intensity * cos incidence). ``specular`` adds a white
    Phong highlight on top of lambertian shading. Rays that miss every
    primitive return ``background``.
    """

    primitives: tuple
    light_dir: np.ndarray = field(default_factory=lambda: np.array([0.3, 1.0, -0.2]))
    light_intensity: float = 1.0
    shading: str = "lambertian"
    specular: bool = False
    spec_strength: float = 0.35
    spec_power: float = 24.0
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.primitives:
            raise ContractError("scene needs at least one primitive")
        if self.shading not in ("flat", "lambertian"):
            raise ContractError(f"shading must be 'flat' or 'lambertian', got {self.shading!r}")
        d = np.asarray(self.light_dir, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if n < _EPS:
            raise ContractError("light direction must be nonzero")
        object.__setattr__(self, "light_dir", d / n)
        object.__setattr__(self, "primitives", tuple(self.primitives))
        bg = np.asarray(self.background, dtype=np.float64).reshape(3)
        if bg.min() < 0.0 or bg.max() > 1.0:
            raise ContractError("background color must lie in [0, 1]")
        object.__setattr__(self, "background", bg)

    @property
    def bound_radius(self) -> float:
        return max(p.bound_radius for p in self.primitives)

    @property
    def bounds(self):
        """World-space AABB enclosing every primitive: (low, high)."""
        los, his = zip(*(p.aabb for p in self.primitives))
        return np.min(los, axis=0), np.max(his, axis=0)


def generate_scene(seed: int, n_prims: int = 3, shading: str = "lambertian", specular: bool = False) -> SceneSpec:
    """Random non-overlapping primitives inside the unit ball.

    Deterministic in the seed; placement rejects overlaps against the
    circumscribed spheres of already placed primitives. Centers are
    pushed outward from the origin so a surrounding camera ring sees
    the primitives at distinct depths, and every albedo gets one
    dominant channel so neighbouring primitives contrast strongly.
    """
    if n_prims < 1:
        raise ContractError("need at least one primitive")
    rng = np.random.default_rng(seed)
    placed: list = []
    spheres_meta: list[tuple[np.ndarray, float]] = []
    attempts = 0
    while len(placed) < n_prims:
        attempts += 1
        if attempts > 200 * n_prims:
            raise ContractError("could not place primitives without overlap")
        radius = rng.uniform(0.28, 0.42)
        albedo = rng.uniform(0.10, 0.40, 3)
        albedo[rng.integers(0, 3)] = rng.uniform(0.70, 0.95)
        is_sphere = rng.random() < 0.55
        if is_sphere:
            reach = radius
        else:
            half = rng.uniform(0.55, 0.80, 3) * radius
            # A corner can stick out past the placement radius, so
            # containment and rejection use the circumscribed sphere.
            # Cap it so a run of boxy draws cannot crowd out the rest.
            reach = float(np.linalg.norm(half))
            if reach > 0.45:
                half *= 0.45 / reach
                reach = 0.45
        direction = rng.standard_normal(3)
        direction /= max(np.linalg.norm(direction), _EPS)
        center = direction * (0.97 - reach) * rng.uniform(0.45, 1.0)
        prim = Sphere(center, radius, albedo) if is_sphere else Box(center - half, center + half, albedo)
        if any(np.linalg.norm(center - c) < reach + r + 0.03 for c, r in spheres_meta):
            continue
        placed.append(prim)
        spheres_meta.append((center, reach))
    jitter = rng.uniform(-0.25, 0.25, 3)
    light = np.array([0.3, 1.0, -0.2]) + jitter
    # A light-gray backdrop keeps silhouettes visible from every ring
    # direction; pitch black would swallow dim object sides entirely.
    return SceneSpec(
        primitives=tuple(placed),
        light_dir=light,
        light_intensity=1.3,
        shading=shading,
        specular=specular,
        background=np.full(3, 0.15),
    )


def _intersect_sphere(origins, dirs, sphere: Sphere):
    oc = origins - sphere.center
    b = np.sum(dirs * oc, axis=-1)
    c = np.sum(oc * oc, axis=-1) - sphere.radius**2
    disc = b * b - c
    hit = disc > 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > _EPS, t0, t1)
    hit &= t > _EPS
    t = np.where(hit, t, np.inf)
    normals = np.zeros_like(origins)
    with np.errstate(invalid="ignore"):
        pts = origins + t[..., None] * dirs
        n = (pts - sphere.center) / sphere.radius
    normals[hit] = n[hit]
    return t, normals


def _intersect_box(origins, dirs, box: Box):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_low = (box.low - origins) * inv
        t_high = (box.high - origins) * inv
    t1 = np.minimum(t_low, t_high)
    t2 = np.maximum(t_low, t_high)
    # Rays parallel to a slab: inside gives (-inf, inf), outside misses.
    parallel = np.abs(dirs) < _EPS
    inside = (origins >= box.low) & (origins <= box.high)
    t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
    t_enter = t1.max(axis=-1)
    t_exit = t2.min(axis=-1)
    hit = (t_exit >= np.maximum(t_enter, _EPS)) & (t_exit > _EPS)
    t = np.where(t_enter > _EPS, t_enter, t_exit)
    t = np.where(hit, t, np.inf)
    axis = np.argmax(t1, axis=-1)
    sign = -np.sign(np.take_along_axis(dirs, axis[..., None], axis=-1))[..., 0]
    normals = np.zeros_like(origins)
    flat_axis = axis.reshape(-1)
    flat_norm = normals.reshape(-1, 3)
    flat_norm[np.arange(flat_axis.size), flat_axis] = sign.reshape(-1)
    normals = flat_norm.reshape(origins.shape)
    return t, normals


def raytrace_gt(scene: SceneSpec, cam: Camera):
    """Analytic render of the scene from one camera.

    Returns (rgb (H, W, 3) float64 in [0, 1], depth (H, W) float64 with
    inf on misses; dataset assembly stores misses as the far plane).
    Nearest-hit shading, no shadows.
    """
    h, w = cam.height, cam.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    origins, dirs = rays_for_pixels(cam, us.reshape(-1), vs.reshape(-1))
    best_t = np.full(origins.shape[0], np.inf)
    best_n = np.zeros_like(origins)
    best_albedo = np.zeros_like(origins)
    for prim in scene.primitives:
        if isinstance(prim, Sphere):
            t, n = _intersect_sphere(origins, dirs, prim)
        else:
            t, n = _intersect_box(origins, dirs, prim)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n[closer] = n[closer]
        best_albedo[closer] = prim.albedo
    hit = np.isfinite(best_t)
    rgb = np.broadcast_to(scene.background, origins.shape).copy()
    if scene.shading == "flat":
        rgb[hit] = best_albedo[hit]
    else:
        cos_in = np.maximum(0.0, -np.sum(best_n * scene.light_dir, axis=-1))
        shade = best_albedo * (scene.light_intensity * cos_in)[:, None]
        if scene.specular:
            l = scene.light_dir
            refl = l - 2.0 * np.sum(best_n * l, axis=-1, keepdims=True) * best_n
            view = -dirs
            spec = np.maximum(0.0, np.sum(refl * view, axis=-1)) ** scene.spec_power
            lit = cos_in > 0.0
            shade += (scene.spec_strength * scene.light_intensity * spec * lit)[:, None]
        rgb[hit] = shade[hit]
    rgb = np.clip(rgb, 0.0, 1.0)
    return rgb.reshape(h, w, 3), best_t.reshape(h, w)


def _look_at_pose(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    approx_down = np.array([0.0, 1.0, 0.0])
    if abs(np.dot(approx_down, forward)) > 0.999:
        approx_down = np.array([0.0, 0.0, 1.0])
    right = np.cross(approx_down, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = forward
    pose[:3, 3] = position
    return pose


def ring_cameras(
    n_views: int,
    ring_radius: float,
    width: int,
    height: int,
    fov: float,
    elevation: float = 0.4,
    target=(0.0, 0.0, 0.0),
) -> list[Camera]:
    """Cameras spaced uniformly in azimuth on a ring looking at a target.

    ``elevation`` is the fraction of the radius the ring sits above the
    target (in -y); all cameras end up at distance ring_radius from it.
    """
    if n_views < 1:
        raise ContractError("need at least one view")
    target = np.asarray(target, dtype=np.float64)
    y = -elevation * ring_radius
    rho = np.sqrt(max(ring_radius**2 - y**2, 1e-12))
    fx = 0.5 * (width - 1) / np.tan(fov / 2.0)
    fy = 0.5 * (height - 1) / np.tan(fov / 2.0)
    cams = []
    for i in range(n_views):
        phi = 2.0 * np.pi * i / n_views
        pos = target + np.array([rho * np.cos(phi), y, rho * np.sin(phi)])
        cams.append(
            Camera(
                fx=fx, fy=fy, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                width=width, height=height, camera_to_world=_look_at_pose(pos, target),
            )
        )
    return cams


@dataclass
class Dataset:
    """In-memory dataset: one camera, image and depth map per frame."""

    cameras: list
    images: list
    depths: list
    near: float
    far: float
    width: int
    height: int

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def __post_init__(self):
        if not (len(self.cameras) == len(self.images) == len(self.depths)):
            raise ContractError("cameras, images and depths must align")
        if not (0.0 < self.near < self.far):
            raise ContractError(f"need 0 < near < far, got ({self.near}, {self.far})")


def make_dataset(
    scene: SceneSpec,
    n_views: int = 12,
    ring_radius: float = 2.5,
    width: int = 32,
    height: int = 32,
    near: float | None = None,
    far: float | None = None,
) -> Dataset:
    """Raytrace a ring of views around the scene.

    near/far default to the camera-to-scene distance range with a 10%
    margin on each side.
    """
    r_scene = scene.bound_radius
    if ring_radius <= r_scene:
        raise ContractError(
            f"ring radius {ring_radius} must exceed scene bound {r_scene:.3f}"
        )
    if near is None:
        near = max(0.05, 0.9 * (ring_radius - r_scene))
    if far is None:
        far = 1.1 * (ring_radius + r_scene)
    fov = 2.0 * np.arctan(1.2 * r_scene / ring_radius)
    # Elevated ring: with the light travelling downward the cameras
    # face the lit side of every primitive from all azimuths.
    cams = ring_cameras(n_views, ring_radius, width, height, fov, elevation=0.65)
    images, depths = [], []
    for cam in cams:
        rgb, depth = raytrace_gt(scene, cam)
        images.append(rgb)
        # Misses come back as inf; clamp to the far plane so PFM files
        # stay finite.
        depths.append(np.minimum(depth, far))
    return Dataset(cams, images, depths, float(near), float(far), width, height)


def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6 at maxval 255; values are round(255 * v)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"PPM image must be (H, W, 3), got {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ContractError("PPM image values must lie in [0, 1]")
    h, w = img.shape[:2]
    data = np.round(img * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read binary P6; returns float64 (H, W, 3) in [0, 1]."""
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    i = 0
    while len(fields) < 4:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i : i + 1].isspace():
            i += 1
        fields.append(raw[start:i])
    i += 1
    if fields[0] != b"P6":
        raise ContractError(f"not a binary PPM: magic {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ContractError(f"only maxval 255 supported, got {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=i)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pfm(path, data: np.ndarray) -> None:
    """Grayscale PFM, scale -1.0 (little-endian), rows bottom-to-top."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ContractError(f"PFM data must be 2-D, got shape {data.shape}")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(data[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read grayscale little-endian PFM; returns float32 (H, W)."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"Pf":
        raise ContractError("not a grayscale PFM")
    w, h = (int(x) for x in parts[1].split())
    scale = float(parts[2])
    if scale >= 0:
        raise ContractError("only little-endian (negative scale) PFM supported")
    data = np.frombuffer(parts[3], dtype="<f4", count=w * h).reshape(h, w)
    return np.ascontiguousarray(data[::-1])


def save_dataset(ds: Dataset, directory) -> None:
    """Write scene.json plus frame_XXX.ppm / frame_XXX_depth.pfm files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cam0 = ds.cameras[0]
    frames = []
    for i, (cam, img, depth) in enumerate(zip(ds.cameras, ds.images, ds.depths)):
        if (cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height) != (
            cam0.fx, cam0.fy, cam0.cx, cam0.cy, cam0.width, cam0.height,
        ):
            raise ContractError("all frames must share intrinsics")
        name = f"frame_{i:03d}.ppm"
        write_ppm(directory / name, img)
        write_pfm(directory / f"frame_{i:03d}_depth.pfm", depth)
        frames.append(
            {
                "file": name,
                "camera_to_world": [float(x) for x in cam.camera_to_world.reshape(-1)],
            }
        )
    index = {
        "width": ds.width,
        "height": ds.height,
        "intrinsics": [cam0.fx, cam0.fy, cam0.cx, cam0.cy],
        "near": ds.near,
        "far": ds.far,
        "frames": frames,
    }
    with open(directory / "scene.json", "w") as f:
        json.dump(index, f, indent=1)
        f.write("\n")


def load_dataset(directory) -> Dataset:
    """Read a dataset directory written by save_dataset.

    Depth maps are optional per frame (missing files yield zero maps).
    """
    directory = Path(directory)
    with open(directory / "scene.json") as f:
        index = json.load(f)
    fx, fy, cx, cy = index["intrinsics"]
    width, height = int(index["width"]), int(index["height"])
    cameras, images, depths = [], [], []
    for frame in index["frames"]:
        pose = np.array(frame["camera_to_world"], dtype=np.float64).reshape(4, 4)
        cameras.append(
            Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height, camera_to_world=pose)
        )
        images.append(read_ppm(directory / frame["file"]))
        depth_path = directory / (Path(frame["file"]).stem + "_depth.pfm")
        if depth_path.exists():
            depths.append(read_pfm(depth_path).astype(np.float64))
        else:
            depths.append(np.zeros((height, width)))
    return Dataset(
        cameras, images, depths, float(index["near"]), float(index["far"]), width, height
    )
