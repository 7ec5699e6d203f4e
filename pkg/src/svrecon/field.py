"""Conditioned SDF/colour field, SDF-to-density conversion and volume compositing."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .nn import Linear, Module, param, positional_encoding
from .scene import AnalyticSDF
from .tensor import ContractError, Tensor

BETA_MIN = 1e-4
EXP_CUTOFF = 40.0  # exp(-40) ~ 4e-18: treated as exactly zero in density and transmittance
NORMAL_FD_STEP = 1e-3


# density ------------------------------------------------------------------


def sdf_to_density(s, beta, sign: int = -1) -> Tensor:
    """Laplace-CDF density with scale ``beta``.

    ``f(u) = exp(u/beta) / (2 beta)`` for ``u <= 0`` and
    ``(1 - exp(-u/beta) / 2) / beta`` for ``u > 0``, evaluated at ``u = sign * s``.
    ``sign=-1`` puts the high density inside the surface (negative SDF);
    ``sign=+1`` keeps the orientation of the formula as printed.
    """
    s, beta = T._wrap(s), T._wrap(beta)
    if np.any(beta.data <= 0):
        raise ContractError("sdf_to_density: beta must be positive")
    if sign not in (-1, 1):
        raise ContractError("sdf_to_density: sign must be -1 or +1")
    b = beta.data
    u = sign * s.data
    x = np.abs(u) / b
    # tails beyond exp(-40) are exact zeros: left in, they breed subnormals downstream,
    # which are orders of magnitude slower on x86
    e = np.where(x < EXP_CUTOFF, np.exp(-np.minimum(x, EXP_CUTOFF)), 0.0)
    neg = u <= 0
    out = np.where(neg, 0.5 * e, 1.0 - 0.5 * e) / b
    # d sigma / du = e / (2 beta^2) on both branches
    ds = sign * 0.5 * e / (b * b)
    # d sigma / d beta: branch-wise derivative of the two closed forms
    absu = np.abs(u)
    db = np.where(neg, 0.5 * e * (absu / b - 1.0), -(1.0 - 0.5 * e) - 0.5 * e * absu / b) / (b * b)
    ds = ds.astype(s.dtype)
    db = db.astype(s.dtype)
    bshape = beta.shape

    def backward(g):
        gs = g * ds if s.requires_grad else None
        gb = T._unbroadcast(g * db, bshape) if beta.requires_grad else None
        return gs, gb

    return T.custom_op(out.astype(s.dtype), (s, beta), backward)


# ray sampling and compositing ---------------------------------------------


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    near: float
    far: float
    color: np.ndarray | None = None
    depth: np.ndarray | None = None
    normal: np.ndarray | None = None  # world frame
    mask: np.ndarray | None = None

    def __post_init__(self):
        if not self.near < self.far:
            raise ContractError("near must be smaller than far")
        if len(self.dirs) and np.abs(np.linalg.norm(self.dirs, axis=1) - 1).max() > 1e-9:
            raise ContractError("ray directions must be unit length")

    def __len__(self):
        return len(self.origins)

    def subset(self, idx) -> "RayBatch":
        pick = lambda a: None if a is None else a[idx]
        return RayBatch(self.origins[idx], self.dirs[idx], self.near, self.far, pick(self.color),
                        pick(self.depth), pick(self.normal), pick(self.mask))


def sample_ray(near: float, far: float, m: int, n_rays: int = 1, stratified: bool = False,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Sample depths, one per equal bin of [near, far]; bin midpoints when not stratified."""
    if m < 2:
        raise ContractError("need at least 2 samples per ray")
    edges = np.linspace(near, far, m + 1)
    if stratified:
        rng = rng or np.random.default_rng()
        u = rng.uniform(size=(n_rays, m))
    else:
        u = np.full((n_rays, m), 0.5)
    return edges[:-1] + u * (edges[1:] - edges[:-1])


@dataclass
class CompositeResult:
    color: Tensor       # K x 3
    depth: Tensor       # K
    weights: Tensor     # K x M
    transmittance: Tensor
    alpha: Tensor
    opacity: Tensor     # K


def composite(sigma: Tensor, color: Tensor, t: np.ndarray, far: float) -> CompositeResult:
    """Alpha compositing of per-sample densities and colours along each ray (K x M)."""
    sigma, color = T._wrap(sigma), T._wrap(color)
    t = np.asarray(t, dtype=np.float64)
    if t.shape[1] > 1 and np.any(np.diff(t, axis=1) <= 0):
        raise ContractError("sample depths must be strictly increasing")
    delta = np.concatenate([np.diff(t, axis=1), far - t[:, -1:]], axis=1)
    if np.any(delta <= 0):
        raise ContractError("last sample must lie before far")
    tau = sigma * Tensor(delta.astype(sigma.dtype))
    alpha = 1.0 - T.exp(-tau, cutoff=-EXP_CUTOFF)
    trans = T.exp(-T.cumsum(tau, axis=1, exclusive=True), cutoff=-EXP_CUTOFF)
    w = trans * alpha
    c = (T.reshape(w, w.shape + (1,)) * color).sum(axis=1)
    d = (w * Tensor(t.astype(sigma.dtype))).sum(axis=1)
    return CompositeResult(color=c, depth=d, weights=w, transmittance=trans, alpha=alpha, opacity=w.sum(axis=1))


# fields ---------------------------------------------------------------------


@dataclass
class FieldConfig:
    hidden: int = 64
    n_hidden: int = 2
    geo_feat: int = 64
    color_hidden: int = 64
    pe_freqs: int = 6
    dir_freqs: int = 4
    beta_init: float = 0.02
    density_sign: int = -1
    view_dependent: bool = True
    init_radius: float = 0.6
    cond_dim: int = 128


class NeuralField(Module):
    """Geometry MLP (encoded x, conditioning feature) -> (SDF, feature); colour MLP -> RGB.

    Hidden layers use softplus(100 x) / 100. The geometry network starts as the
    SDF of a sphere of radius ``init_radius`` with the conditioning path muted.
    """

    def __init__(self, cfg: FieldConfig | None = None, seed: int = 1):
        self.cfg = cfg = cfg or FieldConfig()
        rng = np.random.default_rng(seed)
        pe_dim = 3 + 6 * cfg.pe_freqs
        h = cfg.hidden
        self.in_x = Linear(pe_dim, h, rng, bias=True)
        self.in_f = Linear(cfg.cond_dim, h, rng, bias=False)
        self.hidden_layers = [Linear(h, h, rng) for _ in range(cfg.n_hidden)]
        self.out = Linear(h, 1 + cfg.geo_feat, rng)
        self._geometric_init(rng)
        dir_dim = (3 + 6 * cfg.dir_freqs) if cfg.view_dependent else 0
        self.color1 = Linear(cfg.geo_feat + dir_dim + 3, cfg.color_hidden, rng)
        self.color2 = Linear(cfg.color_hidden, 3, rng)
        self.log_beta = param(np.array(math.log(cfg.beta_init - BETA_MIN)))

    def _geometric_init(self, rng):
        h = self.cfg.hidden
        w = np.zeros(self.in_x.weight.shape)
        w[:3] = rng.normal(0, math.sqrt(2) / math.sqrt(h), size=(3, h))
        self.in_x.weight.data = w
        self.in_x.bias.data = np.zeros(h)
        self.in_f.weight.data = np.zeros(self.in_f.weight.shape)
        for layer in self.hidden_layers:
            layer.weight.data = rng.normal(0, math.sqrt(2) / math.sqrt(h), size=(h, h))
            layer.bias.data = np.zeros(h)
        w_out = rng.normal(0, 1e-4, size=self.out.weight.shape)
        w_out[:, 0] = math.sqrt(math.pi) / math.sqrt(h) + rng.normal(0, 1e-4, size=h)
        b_out = np.zeros(self.out.bias.shape)
        b_out[0] = -self.cfg.init_radius
        self.out.weight.data = w_out
        self.out.bias.data = b_out

    @staticmethod
    def _act(x: Tensor) -> Tensor:
        return T.softplus(x, beta=100.0)

    def beta(self) -> Tensor:
        return T.exp(self.log_beta) + BETA_MIN

    def cond_proj(self, feats: Tensor) -> Tensor:
        return self.in_f(feats)

    def _trunk(self, x: np.ndarray, cond: Tensor) -> Tensor:
        pe = Tensor(positional_encoding(x.astype(self.in_x.weight.dtype), self.cfg.pe_freqs))
        y = self.in_x(pe)
        y = self._act(y + cond if cond is not None else y)
        for layer in self.hidden_layers:
            y = self._act(layer(y))
        return y

    def geometry(self, x: np.ndarray, cond: Tensor) -> tuple[Tensor, Tensor]:
        """``cond`` is :meth:`cond_proj` of the point features."""
        out = self.out(self._trunk(x, cond))
        s, g = T.split(1, [1, self.cfg.geo_feat], out)
        return T.reshape(s, (len(x),)), g

    def sdf_only(self, x: np.ndarray, cond: Tensor) -> Tensor:
        y = self._trunk(x, cond)
        w = T.split(1, [1, self.cfg.geo_feat], self.out.weight)[0]
        b = T.split(0, [1, self.cfg.geo_feat], self.out.bias)[0]
        return T.reshape(y @ w + b, (len(x),))

    def color(self, g: Tensor, dirs: np.ndarray, normals: Tensor) -> Tensor:
        parts = [g]
        if self.cfg.view_dependent:
            parts.append(Tensor(positional_encoding(dirs, self.cfg.dir_freqs).astype(g.dtype)))
        parts.append(normals)
        hid = T.silu(self.color1(T.concat(1, parts)))
        return T.sigmoid(self.color2(hid))


class AnalyticField(Module):
    """Stands in for the networks with an analytic SDF and its albedo (no parameters)."""

    def __init__(self, sdf: AnalyticSDF, beta: float = 0.01, density_sign: int = -1, white: bool = False):
        self.sdf = sdf
        self._beta = beta
        self.white = white
        self.cfg = FieldConfig(beta_init=beta, density_sign=density_sign)

    def beta(self) -> Tensor:
        return Tensor(np.array(self._beta))

    def cond_proj(self, feats):
        return feats

    def geometry(self, x, cond):
        return Tensor(self.sdf(x)), Tensor(np.asarray(x, dtype=np.float64))

    def sdf_only(self, x, cond):
        return Tensor(self.sdf(x))

    def color(self, g, dirs, normals):
        if self.white:
            return Tensor(np.ones((len(dirs), 3)))
        return Tensor(self.sdf.albedo(g.data))


# rendering ------------------------------------------------------------------

PointFeatureFn = Callable[[np.ndarray], Tensor]


@dataclass
class RenderOutput:
    color: Tensor
    depth: Tensor
    normal: Tensor   # world frame, unit
    opacity: Tensor
    sdf: Tensor      # K x M
    sigma: Tensor
    alpha: Tensor
    transmittance: Tensor
    weights: Tensor
    t: np.ndarray


def _normalize_rows(v: Tensor, eps: float = 1e-12) -> Tensor:
    n2 = (v * v).sum(axis=1, keepdims=True)
    return v / T.sqrt(T.clamp_min(n2, eps))


def render_rays(field, point_features_fn: PointFeatureFn | None, rays: RayBatch, m: int,
                stratified: bool = False, rng: np.random.Generator | None = None,
                fd_step: float = NORMAL_FD_STEP) -> RenderOutput:
    """Volume-render a batch of rays through ``field``.

    Normals are the weight-averaged forward-difference gradients of the SDF,
    taken with the point's conditioning feature held fixed.
    """
    k = len(rays)
    t = sample_ray(rays.near, rays.far, m, n_rays=k, stratified=stratified, rng=rng)
    x = (rays.origins[:, None, :] + t[..., None] * rays.dirs[:, None, :]).reshape(-1, 3)
    if point_features_fn is None:
        cond = None
    else:
        cond = field.cond_proj(point_features_fn(x))
    s, g = field.geometry(x, cond)
    grads = []
    for axis in range(3):
        xs = x.copy()
        xs[:, axis] += fd_step
        grads.append(T.reshape((field.sdf_only(xs, cond) - s) * (1.0 / fd_step), (k * m, 1)))
    grad = T.concat(1, grads)
    dirs = np.repeat(rays.dirs, m, axis=0)
    n_unit = _normalize_rows(grad)
    rgb = field.color(g, dirs, n_unit)
    s2 = T.reshape(s, (k, m))
    sigma = sdf_to_density(s2, field.beta(), sign=field.cfg.density_sign)
    comp = composite(sigma, T.reshape(rgb, (k, m, 3)), t, rays.far)
    n_acc = (T.reshape(comp.weights, (k, m, 1)) * T.reshape(grad, (k, m, 3))).sum(axis=1)
    normal = _normalize_rows(n_acc)
    return RenderOutput(color=comp.color, depth=comp.depth, normal=normal, opacity=comp.opacity, sdf=s2,
                        sigma=sigma, alpha=comp.alpha, transmittance=comp.transmittance, weights=comp.weights, t=t)


def extract_sdf_grid(field, point_features_fn: PointFeatureFn | None, bbox, resolution: int,
                     chunk: int = 65536) -> np.ndarray:
    """SDF on a lattice with ``resolution`` cells (``resolution + 1`` samples) per axis.

    Returned array is indexed ``[i, j, k]`` for (x, y, z).
    """
    if resolution < 8:
        raise ContractError("resolution must be at least 8")
    lo, hi = np.asarray(bbox[0], dtype=np.float64), np.asarray(bbox[1], dtype=np.float64)
    axes = [np.linspace(lo[i], hi[i], resolution + 1) for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    out = np.empty(len(pts))
    with T.no_grad():
        for start in range(0, len(pts), chunk):
            x = pts[start:start + chunk]
            cond = None if point_features_fn is None else field.cond_proj(point_features_fn(x))
            out[start:start + chunk] = field.sdf_only(x, cond).data
    return out.reshape((resolution + 1,) * 3)
