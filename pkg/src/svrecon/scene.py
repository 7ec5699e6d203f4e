"""Analytic SDF scenes, pinhole cameras and the sphere-traced ground truth renderer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HIT_EPS = 1e-5
MAX_STEPS = 256


# analytic SDFs ----------------------------------------------------------


class AnalyticSDF:
    """Base class; subclasses evaluate a batch of points of shape (N, 3)."""

    def __call__(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def albedo(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, p: np.ndarray, h: float = 1e-4) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        g = np.empty_like(p)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            g[:, k] = (self(p + e) - self(p - e)) / (2 * h)
        return g


@dataclass
class Sphere(AnalyticSDF):
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    color: tuple = (1.0, 1.0, 1.0)

    def __call__(self, p):
        return np.linalg.norm(np.asarray(p, dtype=np.float64) - self.center, axis=-1) - self.radius

    def albedo(self, p):
        return np.broadcast_to(np.asarray(self.color, dtype=np.float64), np.shape(p)).copy()


@dataclass
class Box(AnalyticSDF):
    center: tuple = (0.0, 0.0, 0.0)
    half_extents: tuple = (0.5, 0.5, 0.5)
    color: tuple = (1.0, 1.0, 1.0)

    def __call__(self, p):
        q = np.abs(np.asarray(p, dtype=np.float64) - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def albedo(self, p):
        return np.broadcast_to(np.asarray(self.color, dtype=np.float64), np.shape(p)).copy()


@dataclass
class Torus(AnalyticSDF):
    """Torus in the local xz-plane (axis along y)."""

    center: tuple = (0.0, 0.0, 0.0)
    major: float = 1.0
    minor: float = 0.25
    color: tuple = (1.0, 1.0, 1.0)

    def __call__(self, p):
        q = np.asarray(p, dtype=np.float64) - self.center
        ring = np.hypot(q[..., 0], q[..., 2]) - self.major
        return np.hypot(ring, q[..., 1]) - self.minor

    def albedo(self, p):
        return np.broadcast_to(np.asarray(self.color, dtype=np.float64), np.shape(p)).copy()


@dataclass
class Translate(AnalyticSDF):
    child: AnalyticSDF
    offset: tuple = (0.0, 0.0, 0.0)

    def __call__(self, p):
        return self.child(np.asarray(p, dtype=np.float64) - self.offset)

    def albedo(self, p):
        return self.child.albedo(np.asarray(p, dtype=np.float64) - self.offset)


@dataclass
class Union(AnalyticSDF):
    children: list = field(default_factory=list)

    def __call__(self, p):
        return np.min([c(p) for c in self.children], axis=0)

    def albedo(self, p):
        d = np.stack([c(p) for c in self.children])
        nearest = np.argmin(d, axis=0)
        out = np.zeros(np.shape(p))
        for i, c in enumerate(self.children):
            sel = nearest == i
            if np.any(sel):
                out[sel] = c.albedo(np.asarray(p)[sel])
        return out


def sdf_eval(sdf: AnalyticSDF, x) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return float(sdf(x[None])[0])
    return sdf(x)


def default_scene() -> AnalyticSDF:
    """Sphere plus box, fitting comfortably inside the radius-1.5 ball."""
    return Union([
        Sphere(center=(-0.4, 0.1, 0.0), radius=0.55, color=(0.85, 0.35, 0.3)),
        Box(center=(0.5, -0.15, 0.1), half_extents=(0.3, 0.35, 0.3), color=(0.3, 0.55, 0.85)),
    ])


def unit_sphere() -> AnalyticSDF:
    return Sphere()


# camera -----------------------------------------------------------------


class CameraError(ValueError):
    pass


@dataclass
class Camera:
    """Pinhole camera; ``R``/``t`` map world to camera (``p_cam = R x + t``).

    Camera frame: +z forward, +x right, +y down. Pixel (col, row) centres sit
    at integer image coordinates.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > 1e-9 or np.linalg.det(self.R) < 0:
            raise CameraError("rotation must be orthonormal with det +1")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def pixel_grid(self) -> np.ndarray:
        """Pixel centres (col, row) in row-major order, shape (H*W, 2)."""
        v, u = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([u.reshape(-1), v.reshape(-1)], axis=1).astype(np.float64)

    def rays(self, pixels: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """World-space origins and unit directions through the given pixels."""
        if pixels is None:
            pixels = self.pixel_grid()
        d_cam = np.stack([
            (pixels[:, 0] - self.cx) / self.fx,
            (pixels[:, 1] - self.cy) / self.fy,
            np.ones(len(pixels)),
        ], axis=1)
        d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
        d = d_cam @ self.R
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.center, d.shape).copy()
        return o, d

    def to_camera(self, v: np.ndarray) -> np.ndarray:
        """Rotate world-frame vectors into the camera frame."""
        return v @ self.R.T

    def to_world(self, v: np.ndarray) -> np.ndarray:
        return v @ self.R


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, -1.0, 0.0), size: int = 64, focal: float | None = None) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise CameraError("up vector parallel to viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    f = float(size) if focal is None else focal
    return Camera(fx=f, fy=f, cx=size / 2, cy=size / 2, R=R, t=-R @ eye, width=size, height=size)


def canonical_camera(size: int = 64) -> Camera:
    """On the -z axis at distance 3, looking at the origin."""
    return Camera(fx=size, fy=size, cx=size / 2, cy=size / 2, R=np.eye(3), t=np.array([0.0, 0.0, 3.0]),
                  width=size, height=size)


def default_camera(size: int = 64) -> Camera:
    eye = 3.0 * np.array([0.45, -0.5, -1.0]) / np.linalg.norm([0.45, -0.5, -1.0])
    return look_at(eye, size=size)


# sphere tracing ---------------------------------------------------------


@dataclass
class TraceResult:
    t: np.ndarray
    hit: np.ndarray
    points: np.ndarray
    normals: np.ndarray


def sphere_trace(sdf: AnalyticSDF, origins, dirs, near: float = 0.0, far: float = 6.0,
                 max_steps: int = MAX_STEPS, eps: float = HIT_EPS) -> TraceResult:
    """Vectorised sphere tracing; rays that do not converge are misses."""
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if np.abs(np.linalg.norm(d, axis=1) - 1).max() > 1e-9:
        raise ValueError("ray directions must be unit length")
    n = len(o)
    t = np.full(n, float(near))
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(max_steps):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        dist = sdf(o[idx] + t[idx, None] * d[idx])
        conv = np.abs(dist) < eps
        hit[idx[conv]] = True
        t[idx[~conv]] += dist[~conv]
        gone = (t[idx] > far) | conv
        active[idx[gone]] = False
    pts = o + t[:, None] * d
    normals = np.zeros_like(pts)
    if hit.any():
        g = sdf.gradient(pts[hit])
        normals[hit] = g / np.linalg.norm(g, axis=1, keepdims=True)
    return TraceResult(t=np.where(hit, t, np.inf), hit=hit, points=pts, normals=normals)


# ground truth bundle ----------------------------------------------------


@dataclass
class SceneBundle:
    rgb: np.ndarray     # H x W x 3 in [0, 1]
    depth: np.ndarray   # H x W, ray parameter t, 0 where mask is false
    normal: np.ndarray  # H x W x 3, camera frame
    mask: np.ndarray    # H x W bool
    camera: Camera
    sdf: AnalyticSDF | None = None


AMBIENT = 0.1


def render_ground_truth(sdf: AnalyticSDF, camera: Camera, light_dir=(0.3, 0.5, 1.0),
                        near: float = 0.0, far: float = 6.0) -> SceneBundle:
    light = np.asarray(light_dir, dtype=np.float64)
    if abs(np.linalg.norm(light) - 1) > 1e-9:
        light = light / np.linalg.norm(light)
    h, w = camera.height, camera.width
    o, d = camera.rays()
    tr = sphere_trace(sdf, o, d, near=near, far=far)
    rgb = np.zeros((h * w, 3))
    depth = np.zeros(h * w)
    normal = np.zeros((h * w, 3))
    if tr.hit.any():
        n_world = tr.normals[tr.hit]
        shade = np.maximum(0.0, n_world @ (-light))
        rgb[tr.hit] = np.clip(sdf.albedo(tr.points[tr.hit]) * shade[:, None] + AMBIENT, 0.0, 1.0)
        depth[tr.hit] = tr.t[tr.hit]
        nc = camera.to_camera(n_world)
        normal[tr.hit] = nc / np.linalg.norm(nc, axis=1, keepdims=True)
    return SceneBundle(
        rgb=rgb.reshape(h, w, 3),
        depth=depth.reshape(h, w),
        normal=normal.reshape(h, w, 3),
        mask=tr.hit.reshape(h, w),
        camera=camera,
        sdf=sdf,
    )


# supervision points -----------------------------------------------------


@dataclass
class SupervisionPoints:
    points: np.ndarray
    gt_sdf: np.ndarray
    ray_index: np.ndarray
    kind: np.ndarray  # 0 uniform, 1 near-surface


def stratified_t(n_rays: int, m: int, near: float, far: float, rng: np.random.Generator | None) -> np.ndarray:
    edges = np.linspace(near, far, m + 1)
    u = 0.5 * np.ones((n_rays, m)) if rng is None else rng.uniform(size=(n_rays, m))
    return edges[:-1] + u * (edges[1:] - edges[:-1])


def sample_supervision_points(sdf: AnalyticSDF, origins, dirs, m_uniform: int, m_near: int, sigma_near: float,
                              rng: np.random.Generator, near: float = 0.1, far: float = 6.0,
                              trace: TraceResult | None = None) -> SupervisionPoints:
    """Stratified samples along each ray plus Gaussian jitter around its surface hit."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    n = len(o)
    t = stratified_t(n, m_uniform, near, far, rng)
    uni = (o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, 3)
    uni_idx = np.repeat(np.arange(n), m_uniform)
    pts = [uni]
    idx = [uni_idx]
    kind = [np.zeros(len(uni), dtype=np.int8)]
    if m_near > 0:
        if trace is None:
            trace = sphere_trace(sdf, o, d, near=near, far=far)
        hit_rows = np.nonzero(trace.hit)[0]
        base = np.repeat(trace.points[hit_rows], m_near, axis=0)
        jitter = rng.normal(scale=sigma_near, size=base.shape) if sigma_near > 0 else 0.0
        pts.append(base + jitter)
        idx.append(np.repeat(hit_rows, m_near))
        kind.append(np.ones(len(base), dtype=np.int8))
    points = np.concatenate(pts)
    return SupervisionPoints(points=points, gt_sdf=sdf(points), ray_index=np.concatenate(idx),
                             kind=np.concatenate(kind))
