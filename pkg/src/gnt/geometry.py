"""Pinhole cameras, rays, point sampling, positional encoding and
epipolar feature gathering.

Coordinate conventions used throughout the package:

- Camera frame: x right, y down, z forward (points with z > 0 are in
  front of the camera).
- ``camera_to_world`` is a 4x4 row-major rigid transform; its upper-left
  3x3 block R maps camera-frame directions to world-frame directions
  and its last column holds the camera position.
- Pixel (u, v) means column u, row v, and the sample point of the pixel
  sits at integer coordinates, so a W-wide image spans [0, W-1] in u.
  Continuous (sub-pixel) coordinates are accepted everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ContractError, Tensor, concat, gather_rows, reshape

__all__ = [
    "Camera",
    "Ray",
    "SampleSet",
    "Projection",
    "PosEncoding",
    "ray_for_pixel",
    "rays_for_pixels",
    "project",
    "project_points",
    "sample_uniform",
    "sample_uniform_batch",
    "positional_encode",
    "bilinear_sample",
    "bilinear_sample_batch",
    "epipolar_gather",
    "epipolar_gather_batch",
]

_EPS_DEPTH = 1e-8


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics plus a rigid camera-to-world pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    camera_to_world: np.ndarray

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if self.width < 1 or self.height < 1:
            raise ContractError(f"image dims must be positive, got {self.width}x{self.height}")
        pose = np.asarray(self.camera_to_world, dtype=np.float64)
        if pose.shape != (4, 4):
            raise ContractError(f"camera_to_world must be 4x4, got {pose.shape}")
        if not np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise ContractError("camera_to_world last row must be [0, 0, 0, 1]")
        r = pose[:3, :3]
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-6:
            raise ContractError("camera_to_world rotation block is not orthonormal")
        object.__setattr__(self, "camera_to_world", pose)

    @property
    def rotation(self) -> np.ndarray:
        return self.camera_to_world[:3, :3]

    @property
    def position(self) -> np.ndarray:
        return self.camera_to_world[:3, 3]


@dataclass(frozen=True)
class Ray:
    """Unit-direction ray with its sampling interval."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-6:
            raise ContractError(f"ray direction must be unit length, |d| = {n}")
        if not (0.0 < self.t_near < self.t_far):
            raise ContractError(
                f"need 0 < t_near < t_far, got ({self.t_near}, {self.t_far})"
            )
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True)
class SampleSet:
    """Ordered sample parameters along one ray with their world points."""

    ts: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.ts, dtype=np.float64).reshape(-1)
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if ts.shape[0] != pts.shape[0]:
            raise ContractError("ts and points disagree in length")
        if ts.shape[0] and np.any(np.diff(ts) <= 0):
            raise ContractError("sample ts must be strictly increasing")
        object.__setattr__(self, "ts", ts)
        object.__setattr__(self, "points", pts)

    @property
    def m(self) -> int:
        return int(self.ts.shape[0])


@dataclass(frozen=True)
class Projection:
    """Pixel-space projection of a world point; ``in_front`` is False for
    points at or behind the camera plane (coordinates are then meaningless)."""

    u: float
    v: float
    depth: float
    in_front: bool


def ray_for_pixel(cam: Camera, u: float, v: float, t_near: float, t_far: float) -> Ray:
    """Ray through the sample point of pixel (u, v); continuous coords allowed."""
    if not (0.0 <= u < cam.width and 0.0 <= v < cam.height):
        raise ContractError(
            f"pixel ({u}, {v}) outside image {cam.width}x{cam.height}"
        )
    origins, dirs = rays_for_pixels(cam, np.array([u]), np.array([v]))
    return Ray(origins[0], dirs[0], t_near, t_far)


def rays_for_pixels(cam: Camera, us: np.ndarray, vs: np.ndarray):
    """Batched ray construction; returns (origins (K, 3), unit dirs (K, 3))."""
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    d_cam = np.stack(
        [
            (us - cam.cx) / cam.fx,
            (vs - cam.cy) / cam.fy,
            np.ones_like(us),
        ],
        axis=-1,
    )
    d_world = d_cam @ cam.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(cam.position, d_world.shape).copy()
    return origins, d_world


def project(cam: Camera, x: np.ndarray) -> Projection:
    """Project one world point into pixel coordinates."""
    u, v, depth, in_front = project_points(cam, np.asarray(x, dtype=np.float64).reshape(1, 3))
    return Projection(float(u[0]), float(v[0]), float(depth[0]), bool(in_front[0]))


def project_points(cam: Camera, xs: np.ndarray):
    """Batched projection; returns (u, v, depth, in_front) arrays.

    Points at or behind the camera plane get in_front=False and zeroed
    pixel coordinates rather than an exception, because epipolar
    gathering routinely probes such points.
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
    x_cam = (xs - cam.position) @ cam.rotation
    z = x_cam[:, 2]
    in_front = z > _EPS_DEPTH
    safe_z = np.where(in_front, z, 1.0)
    u = np.where(in_front, cam.fx * x_cam[:, 0] / safe_z + cam.cx, 0.0)
    v = np.where(in_front, cam.fy * x_cam[:, 1] / safe_z + cam.cy, 0.0)
    return u, v, z, in_front


def sample_uniform(ray: Ray, m: int, stratified: bool = False, rng=None) -> SampleSet:
    """Partition [t_near, t_far] into m equal bins and take one sample per
    bin: the midpoint, or a uniform draw within the bin when stratified."""
    ts, pts = sample_uniform_batch(
        ray.origin[None], ray.direction[None], ray.t_near, ray.t_far, m, stratified, rng
    )
    return SampleSet(ts[0], pts[0])


def sample_uniform_batch(
    origins: np.ndarray,
    dirs: np.ndarray,
    t_near: float,
    t_far: float,
    m: int,
    stratified: bool = False,
    rng=None,
):
    """Batched bin sampling; returns (ts (K, m), points (K, m, 3))."""
    if m < 1:
        raise ContractError("need at least one sample per ray")
    if not (0.0 < t_near < t_far):
        raise ContractError(f"need 0 < t_near < t_far, got ({t_near}, {t_far})")
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    k = origins.shape[0]
    width = (t_far - t_near) / m
    edges = t_near + width * np.arange(m)
    if stratified:
        if rng is None:
            raise ContractError("stratified sampling needs an rng")
        jitter = rng.random((k, m))
    else:
        jitter = np.full((k, m), 0.5)
    ts = edges + jitter * width
    points = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    return ts, points


@dataclass(frozen=True)
class PosEncoding:
    """Sinusoidal encoding: identity plus sin/cos at L octave frequencies.

    Output layout for D-dim input: [x | sin(2^0 pi x) .. sin(2^(L-1) pi x)
    | cos(2^0 pi x) .. cos(2^(L-1) pi x)], giving D * (2L + 1) dims.
    """

    L: int

    def output_dim(self, input_dim: int = 3) -> int:
        return input_dim * (2 * self.L + 1)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return positional_encode(x, self.L)


def positional_encode(x: np.ndarray, L: int) -> np.ndarray:
    if L < 0:
        raise ContractError("L must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if L == 0:
        return x.copy()
    freqs = (2.0 ** np.arange(L)) * np.pi
    scaled = x[..., None, :] * freqs[:, None]
    lead = x.shape[:-1]
    sins = np.sin(scaled).reshape(lead + (L * x.shape[-1],))
    coss = np.cos(scaled).reshape(lead + (L * x.shape[-1],))
    return np.concatenate([x, sins, coss], axis=-1)


def bilinear_sample(fm, u: float, v: float):
    """Bilinear feature lookup at continuous grid coords; out-of-bounds
    coordinates give a zero vector and valid=False."""
    out, valid = bilinear_sample_batch(fm, np.array([u]), np.array([v]))
    return reshape(out, (fm.dim,)), bool(valid[0])


def bilinear_sample_batch(fm, us: np.ndarray, vs: np.ndarray):
    """Batched lookup; returns (Tensor (K, d), valid (K,) bool).

    Gradients flow to the feature grid through four row gathers with
    constant weights; invalid coordinates get all-zero weights so they
    contribute neither value nor gradient.
    """
    us = np.asarray(us, dtype=np.float64).reshape(-1)
    vs = np.asarray(vs, dtype=np.float64).reshape(-1)
    w, h = fm.width, fm.height
    valid = (us >= 0.0) & (us <= w - 1) & (vs >= 0.0) & (vs <= h - 1)
    uc = np.clip(us, 0.0, w - 1)
    vc = np.clip(vs, 0.0, h - 1)
    u0 = np.floor(uc).astype(np.int64)
    v0 = np.floor(vc).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = uc - u0
    fv = vc - v0
    weights = [
        (1.0 - fu) * (1.0 - fv),
        fu * (1.0 - fv),
        (1.0 - fu) * fv,
        fu * fv,
    ]
    corners = [v0 * w + u0, v0 * w + u1, v1 * w + u0, v1 * w + u1]
    dtype = fm.grid.dtype
    out = None
    for wt, idx in zip(weights, corners):
        wt = np.where(valid, wt, 0.0).astype(dtype)[:, None]
        term = gather_rows(fm.grid, idx) * Tensor(wt)
        out = term if out is None else out + term
    return out, valid


def _unit(vecs: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(vecs, axis=-1, keepdims=True)
    return vecs / np.maximum(n, 1e-12)


def epipolar_gather(x: np.ndarray, theta: np.ndarray, cams: Sequence[Camera], features):
    """Gather per-view features and view-direction offsets for one point.

    Returns (tokens Tensor (N, d), valid (N,), delta_d (N, 4)).
    """
    tokens, valid, delta = epipolar_gather_batch(
        np.asarray(x, dtype=np.float64).reshape(1, 3),
        np.asarray(theta, dtype=np.float64).reshape(1, 3),
        cams,
        features,
    )
    n = len(cams)
    return reshape(tokens, (n, features[0].dim)), valid[0], delta[0]


def epipolar_gather_batch(
    points: np.ndarray, thetas: np.ndarray, cams: Sequence[Camera], features
):
    """Gather source-view features for K points sampled on target rays.

    points: (K, 3) world points; thetas: (K, 3) unit target-ray dirs.
    Returns (tokens Tensor (K, N, d), valid (K, N) bool, delta_d (K, N, 4)).

    Per view, each point projects into the source image; the projected
    pixel is scaled to feature-grid coordinates and sampled bilinearly.
    Points behind a source camera or outside its frame yield a zero
    token flagged invalid. delta_d packs the difference of unit
    directions point-to-target-camera minus point-to-source-camera with
    their dot product; for a point on the target ray the former is just
    -theta, and coincident cameras give exactly (0, 0, 0, 1).
    """
    if not cams:
        raise ContractError("epipolar_gather needs at least one source view")
    if len(cams) != len(features):
        raise ContractError("one feature map per source camera required")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    thetas = np.asarray(thetas, dtype=np.float64)
    thetas = np.broadcast_to(thetas.reshape(-1, 3), points.shape)
    k = points.shape[0]
    n = len(cams)
    d = features[0].dim
    to_target = -thetas
    token_views = []
    valid = np.zeros((k, n), dtype=bool)
    delta = np.zeros((k, n, 4))
    for j, (cam, fm) in enumerate(zip(cams, features)):
        u, v, depth, in_front = project_points(cam, points)
        su = (fm.width - 1) / max(cam.width - 1, 1)
        sv = (fm.height - 1) / max(cam.height - 1, 1)
        uf = np.where(in_front, u * su, -1e9)
        vf = np.where(in_front, v * sv, -1e9)
        tok, ok = bilinear_sample_batch(fm, uf, vf)
        valid[:, j] = ok & in_front
        token_views.append(reshape(tok, (k, 1, d)))
        to_source = _unit(cam.position - points)
        diff = to_target - to_source
        dot = np.sum(to_target * to_source, axis=-1)
        delta[:, j, :3] = diff
        delta[:, j, 3] = dot
    tokens = token_views[0] if n == 1 else concat(token_views, axis=1)
    return tokens, valid, delta
