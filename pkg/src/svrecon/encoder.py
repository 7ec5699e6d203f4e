"""Dual-stream feature extractor.

RGB stream: residual blocks give the shallow map ``F_highD``; two more strided
blocks and a 1x1 projection give the deep ROI map, which the selective
attention stack turns into ``F_context``. Depth stream: the same residual
topology on the normalised depth map gives ``F_dep``. Query points are projected
into the image and sampled from ``F_context`` (visual feature) and from
``proj(F_dep) + F_highD`` (geometric feature), then fused by a pointwise MLP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, ChannelNorm, Conv2d, LayerNorm, Linear, Module, positional_encoding
from .scan import SSMParams, ssm_block
from .scene import Camera
from .tensor import ConfigError, ShapeError, Tensor

Z_EPS = 1e-6


@dataclass
class EncoderConfig:
    image_size: int = 64
    shallow_channels: int = 32
    roi_channels: int = 64
    heads: int = 4
    n1: int = 8
    n2: int = 4
    fusion_width: int = 128
    pe_freqs: int = 6
    state_dim: int = 16
    n_blocks: int = 4

    def __post_init__(self):
        if self.roi_channels % 2:
            raise ConfigError("roi_channels must be even")
        if self.n1 % 2 or self.n2 % 2:
            raise ConfigError("n1 and n2 must be even")
        if self.roi_channels % self.heads:
            raise ConfigError("roi_channels must be divisible by heads")
        if self.image_size % 4 or self.image_size < 4:
            raise ConfigError("image_size must be a positive multiple of 4")

    def roi_strides(self) -> list[int]:
        """Stride per ROI block: halve while the map side is even and at least 4."""
        side = self.image_size // 4
        strides = []
        for _ in range(2):
            if side >= 4 and side % 2 == 0:
                strides.append(2)
                side //= 2
            else:
                strides.append(1)
        return strides


@dataclass
class FeatureMaps:
    F_highD: Tensor
    F_dep: Tensor
    F_roi: Tensor
    F_context: Tensor
    F_3d_map: Tensor


# building blocks ----------------------------------------------------------


class ResidualBlock(Module):
    """conv-norm-silu-conv-norm plus skip; stride 2 uses 2x2 kernels."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1):
        if stride == 1:
            self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=1, pad=1)
        else:
            self.conv1 = Conv2d(c_in, c_out, 2, rng, stride=2, pad=0)
        self.norm1 = ChannelNorm(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, stride=1, pad=1)
        self.norm2 = ChannelNorm(c_out)
        if stride != 1:
            self.skip = Conv2d(c_in, c_out, 2, rng, stride=2, pad=0)
        elif c_in != c_out:
            self.skip = Conv2d(c_in, c_out, 1, rng)
        else:
            self.skip = None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.silu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return y + (self.skip(x) if self.skip is not None else x)


class ResidualStream(Module):
    """Residual blocks with stride-2 downsampling after blocks 1 and 2 (H -> H/4)."""

    def __init__(self, c_in: int, channels: int, n_blocks: int, rng: np.random.Generator):
        strides = [1, 2, 2] + [1] * max(0, n_blocks - 3)
        self.blocks = [
            ResidualBlock(c_in if i == 0 else channels, channels, rng, stride=s)
            for i, s in enumerate(strides[:n_blocks])
        ]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] % 4 or x.shape[2] % 4:
            raise ConfigError(f"spatial dims {x.shape[1:]} must be divisible by 4")
        for block in self.blocks:
            x = block(x)
        return x


class SelfAttention(Module):
    """Multi-head attention over a token matrix (L x C)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        L, C = x.shape
        dh = C // self.heads
        qkv = T.transpose(T.reshape(self.qkv(x), (L, 3, self.heads, dh)), (1, 2, 0, 3))
        q, k, v = T.split(0, [1, 1, 1], qkv)
        q, k, v = (T.reshape(z, (self.heads, L, dh)) for z in (q, k, v))
        att = T.softmax_lastdim((q @ T.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(dh)))
        y = T.reshape(T.transpose(att @ v, (1, 0, 2)), (L, C))
        return self.out(y)


class AttentionLayer(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = MLP([dim, 2 * dim, dim], rng)

    def __call__(self, tokens: Tensor) -> Tensor:
        tokens = tokens + self.attn(self.norm1(tokens))
        return tokens + self.ffn(self.norm2(tokens))


class MixerLayer(Module):
    """Channel split: SSM on one half, 3x3 convolutions on the other, summed and mixed by an MLP."""

    def __init__(self, dim: int, state_dim: int, rng: np.random.Generator):
        half = dim // 2
        self.norm = LayerNorm(dim)
        self.ssm = SSMParams.init(half, state_dim, rng)
        self.conv1 = Conv2d(half, half, 3, rng, pad=1)
        self.conv2 = Conv2d(half, half, 3, rng, pad=1)
        self.mlp = MLP([half, dim, dim], rng)

    def __call__(self, tokens: Tensor, hw: tuple[int, int]) -> Tensor:
        h, w = hw
        L, C = tokens.shape
        half = C // 2
        x = self.norm(tokens)
        a, b = T.split(1, [half, half], x)
        f_long = ssm_block(self.ssm, T.reshape(T.transpose(a, (1, 0)), (half, h, w)))
        f_short = self.conv2(T.silu(self.conv1(T.reshape(T.transpose(b, (1, 0)), (half, h, w)))))
        mixed = T.transpose(T.reshape(f_long + f_short, (half, L)), (1, 0))
        return tokens + self.mlp(mixed)


class SelectiveAttention(Module):
    """Two iterations; each runs its mixer layers first, then its attention layers."""

    def __init__(self, dim: int, heads: int, n1: int, n2: int, state_dim: int, rng: np.random.Generator):
        self.iterations = []
        for n in (n1, n2):
            mixers = [MixerLayer(dim, state_dim, rng) for _ in range(n // 2)]
            attns = [AttentionLayer(dim, heads, rng) for _ in range(n // 2)]
            self.iterations.append((mixers, attns))

    def __call__(self, f_roi: Tensor) -> Tensor:
        if f_roi.ndim != 3:
            raise ShapeError(f"selective attention expects C x H x W, got {f_roi.shape}")
        c, h, w = f_roi.shape
        tokens = T.transpose(T.reshape(f_roi, (c, h * w)), (1, 0))
        for mixers, attns in self.iterations:
            for layer in mixers:
                tokens = layer(tokens, (h, w))
            for layer in attns:
                tokens = layer(tokens)
        return T.reshape(T.transpose(tokens, (1, 0)), (c, h, w))


# encoder ------------------------------------------------------------------


def normalize_depth(depth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked min-max normalisation to [0, 1]; invalid pixels become 0.

    A constant valid region maps to 1 so it stays distinguishable from invalid pixels.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("depth map has no valid pixels")
    vals = depth[mask]
    lo, hi = vals.min(), vals.max()
    out = np.zeros_like(depth, dtype=np.float64)
    out[mask] = (depth[mask] - lo) / (hi - lo) if hi > lo else 1.0
    return out


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig | None = None, seed: int = 0):
        self.cfg = cfg = cfg or EncoderConfig()
        rng = np.random.default_rng(seed)
        cs, cr = cfg.shallow_channels, cfg.roi_channels
        self.rgb_stream = ResidualStream(3, cs, cfg.n_blocks, rng)
        self.depth_stream = ResidualStream(1, cs, cfg.n_blocks, rng)
        self.roi_blocks = [ResidualBlock(cs, cs, rng, stride=st) for st in cfg.roi_strides()]
        self.roi_proj = Conv2d(cs, cr, 1, rng)
        self.attention = SelectiveAttention(cr, cfg.heads, cfg.n1, cfg.n2, cfg.state_dim, rng)
        self.combine = Conv2d(cs, cs, 1, rng)
        self.combine.weight.data = np.eye(cs).reshape(cs, cs, 1, 1).copy()
        pe_dim = 3 + 6 * cfg.pe_freqs
        w = cfg.fusion_width
        self.fusion = MLP([cr + cs + pe_dim, w, w, w], rng)

    # feature maps
    def extract_shallow(self, rgb: Tensor) -> Tensor:
        return self.rgb_stream(T._wrap(rgb))

    def extract_depth(self, depth: np.ndarray, mask: np.ndarray) -> Tensor:
        d = normalize_depth(np.asarray(depth), mask)
        return self.depth_stream(Tensor(d[None]))

    def extract_roi(self, f_highd: Tensor) -> Tensor:
        x = f_highd
        for block in self.roi_blocks:
            x = block(x)
        return self.roi_proj(x)

    def selective_attention(self, f_roi: Tensor) -> Tensor:
        return self.attention(f_roi)

    def combine_depth_rgb(self, f_dep: Tensor, f_highd: Tensor) -> Tensor:
        if f_dep.shape != f_highd.shape:
            raise ShapeError(f"depth features {f_dep.shape} vs rgb features {f_highd.shape}")
        return self.combine(f_dep) + f_highd

    def __call__(self, rgb_hwc: np.ndarray, depth: np.ndarray, mask: np.ndarray) -> FeatureMaps:
        rgb = Tensor(np.asarray(rgb_hwc).transpose(2, 0, 1))
        f_highd = self.extract_shallow(rgb)
        f_dep = self.extract_depth(depth, mask)
        f_roi = self.extract_roi(f_highd)
        f_context = self.selective_attention(f_roi)
        return FeatureMaps(f_highd, f_dep, f_roi, f_context, self.combine_depth_rgb(f_dep, f_highd))

    def fuse_point_features(self, f_vis: Tensor, f_dge: Tensor, x: np.ndarray) -> Tensor:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        if not (len(f_vis) == len(f_dge) == len(x)):
            raise ShapeError(f"row counts differ: {len(f_vis)}, {len(f_dge)}, {len(x)}")
        pe = Tensor(positional_encoding(x, self.cfg.pe_freqs))
        return self.fusion(T.concat(1, [f_vis, f_dge, pe]))

    def point_features(self, maps: FeatureMaps, camera: Camera, x: np.ndarray) -> Tensor:
        uv, valid = project_points(x, camera)
        f_vis = pixel_aligned(maps.F_context, uv, valid, camera.width)
        f_dge = pixel_aligned(maps.F_3d_map, uv, valid, camera.width)
        return self.fuse_point_features(f_vis, f_dge, x)


def project_points(x: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """World points to pixel coordinates; points at or behind the camera plane are invalid."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    p = x @ camera.R.T + camera.t
    valid = p[:, 2] > Z_EPS
    z = np.where(valid, p[:, 2], 1.0)
    uv = np.stack([camera.fx * p[:, 0] / z + camera.cx, camera.fy * p[:, 1] / z + camera.cy], axis=1)
    uv[~valid] = 0.0
    return uv, valid


def image_to_feature_coords(uv: np.ndarray, image_size: int, feature_size: int) -> np.ndarray:
    s = feature_size / image_size
    return (uv + 0.5) * s - 0.5


def pixel_aligned(fmap: Tensor, uv: np.ndarray, valid: np.ndarray, image_size: int) -> Tensor:
    """Bilinear samples of ``fmap`` at image coordinates; invalid points read zeros."""
    c, h, _ = fmap.shape
    f_uv = image_to_feature_coords(np.asarray(uv, dtype=np.float64), image_size, h)
    samples = T.bilinear_sample_2d(fmap, f_uv)
    if np.all(valid):
        return samples
    return samples * Tensor(np.asarray(valid, dtype=fmap.dtype)[:, None])
