"""Registered gradient checks: every tensor op, the scan, density, compositing, a micro end-to-end pass.

Each case builds ``(f, inputs, wrt)`` from a seeded generator; :func:`run_suite`
runs them through :func:`~svrecon.gradcheck.gradcheck` in float64.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .gradcheck import GradcheckReport, gradcheck

Case = Callable[[np.random.Generator], tuple]
SUITE: dict[str, Case] = {}


def register(name: str):
    def deco(fn: Case) -> Case:
        if name in SUITE:
            raise ValueError(f"duplicate gradcheck case {name}")
        SUITE[name] = fn
        return fn
    return deco


def _away_from_zero(rng, shape, lo=0.2, hi=1.5):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


# elementwise -------------------------------------------------------------

@register("add")
def _add(rng):
    return (lambda a, b: a + b), [rng.normal(size=(3, 4)), rng.normal(size=(4,))], None


@register("sub")
def _sub(rng):
    return (lambda a, b: a - b), [rng.normal(size=(2, 1, 3)), rng.normal(size=(4, 3))], None


@register("mul")
def _mul(rng):
    return (lambda a, b: a * b), [rng.normal(size=(3, 4)), rng.normal(size=(3, 1))], None


@register("div")
def _div(rng):
    return (lambda a, b: a / b), [rng.normal(size=(3, 4)), _away_from_zero(rng, (4,), 0.5, 2.0)], None


@register("negate")
def _negate(rng):
    return T.negate, [rng.normal(size=(5,))], None


@register("exp")
def _exp(rng):
    return T.exp, [rng.normal(size=(6,))], None


@register("log")
def _log(rng):
    return T.log, [rng.uniform(0.3, 3.0, size=(6,))], None


@register("sqrt")
def _sqrt(rng):
    return T.sqrt, [rng.uniform(0.3, 3.0, size=(6,))], None


@register("relu")
def _relu(rng):
    return T.relu, [_away_from_zero(rng, (8,))], None


@register("sigmoid")
def _sigmoid(rng):
    return T.sigmoid, [rng.normal(scale=3.0, size=(8,))], None


@register("silu")
def _silu(rng):
    return T.silu, [rng.normal(scale=2.0, size=(8,))], None


@register("softplus")
def _softplus(rng):
    return (lambda a: T.softplus(a) + T.softplus(a * 0.05, beta=100.0)), [rng.normal(size=(8,))], None


@register("tanh")
def _tanh(rng):
    return T.tanh, [rng.normal(size=(8,))], None


@register("abs")
def _abs(rng):
    return T.tabs, [_away_from_zero(rng, (8,))], None


@register("clamp_min")
def _clamp(rng):
    return (lambda a: T.clamp_min(a, 0.1)), [0.1 + _away_from_zero(rng, (8,))], None


# reductions and shape ----------------------------------------------------

@register("sum")
def _sum(rng):
    return (lambda a: T.tsum(a, axis=1) * T.tsum(a)), [rng.normal(size=(3, 4))], None


@register("mean")
def _mean(rng):
    return (lambda a: T.mean(a, axis=0, keepdims=True) * a), [rng.normal(size=(3, 4))], None


@register("reshape")
def _reshape(rng):
    return (lambda a: T.reshape(a, (4, 3)) @ T.reshape(a, (3, 4))), [rng.normal(size=(2, 6))], None


@register("transpose")
def _transpose(rng):
    return (lambda a: T.transpose(a, (2, 0, 1)) * 2.0), [rng.normal(size=(2, 3, 4))], None


@register("index")
def _index(rng):
    idx = (np.array([0, 2, 2, 1]), np.array([1, 0, 0, 3]))
    return (lambda a: a[idx] * a[idx]), [rng.normal(size=(3, 4))], None


@register("take_rows")
def _take_rows(rng):
    rows = np.array([3, 0, 3, 1, 1])
    return (lambda a: T.take_rows(a, rows) * 1.5), [rng.normal(size=(4, 2))], None


@register("concat")
def _concat(rng):
    return (lambda a, b: T.concat(1, [a, b, a])), [rng.normal(size=(2, 3)), rng.normal(size=(2, 2))], None


@register("split")
def _split(rng):
    def f(a):
        p, q = T.split(0, [2, 3], a)
        return p.sum(axis=0) * q.sum(axis=0)
    return f, [rng.normal(size=(5, 3))], None


@register("cumsum")
def _cumsum(rng):
    return (lambda a: T.cumsum(a, axis=1) + T.cumsum(a, axis=1, exclusive=True) * a), [rng.normal(size=(3, 5))], None


@register("matmul")
def _matmul(rng):
    return (lambda a, b: a @ b), [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))], None


@register("conv2d")
def _conv2d(rng):
    def f(x, w1, b1, w2):
        y = T.conv2d(x, w1, b1, stride=1, pad=1)
        return T.conv2d(y, w2, None, stride=2, pad=0)
    return f, [rng.normal(size=(2, 6, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3,)),
               rng.normal(size=(2, 3, 2, 2))], None


@register("softmax")
def _softmax(rng):
    return T.softmax_lastdim, [rng.normal(size=(3, 5))], None


@register("layer_norm")
def _layer_norm(rng):
    return (lambda x, g, b: T.layer_norm_lastdim(x, g, b)), [rng.normal(size=(4, 6)), rng.normal(size=(6,)),
                                                            rng.normal(size=(6,))], None


@register("bilinear_sample")
def _bilinear(rng):
    uv = rng.uniform(-0.5, 5.5, size=(7, 2))
    return (lambda f: T.bilinear_sample_2d(f, uv)), [rng.normal(size=(3, 5, 6))], None


@register("stack_scalars")
def _stack(rng):
    return (lambda a, b: T.stack_scalars([a.sum(), (a * b).sum(), b.mean()])), [rng.normal(size=(3,)),
                                                                                 rng.normal(size=(3,))], None


# model components ----------------------------------------------------------

@register("linear_recurrence")
def _recurrence(rng):
    from .scan import linear_recurrence
    return linear_recurrence, [rng.uniform(0.2, 0.99, size=(9, 2, 3)), rng.normal(size=(9, 2, 3))], None


@register("linear_recurrence_h0")
def _recurrence_h0(rng):
    from .scan import linear_recurrence
    return linear_recurrence, [rng.uniform(0.2, 0.99, size=(9, 2, 3)), rng.normal(size=(9, 2, 3)),
                               rng.normal(size=(2, 3))], None


@register("selective_scan")
def _scan(rng):
    from .scan import SSMParams, scan_associative
    d, n, length = 3, 4, 7
    ref = SSMParams.init(d, n, rng)
    names = ["A_log", "W_delta", "b_delta", "W_B", "W_C", "D_skip"]

    def f(x, *ps):
        return scan_associative(SSMParams(*ps), x)
    inputs = [rng.normal(size=(length, d))] + [getattr(ref, k).data for k in names]
    # larger steps than the default so the gradient through delta is exercised
    inputs[3] = inputs[3] + 2.0
    return f, inputs, None


@register("ssm_block")
def _ssm_block(rng):
    from .scan import SSMParams, ssm_block
    ref = SSMParams.init(2, 3, rng)

    def f(fmap, a_log, d_skip):
        p = SSMParams(a_log, ref.W_delta, ref.b_delta + 1.0, ref.W_B, ref.W_C, d_skip)
        return ssm_block(p, fmap)
    return f, [rng.normal(size=(2, 3, 4)), ref.A_log.data, ref.D_skip.data], None


@register("sdf_to_density")
def _density(rng):
    from .field import sdf_to_density
    s = np.array([-0.5, -0.1, 0.1, 0.5])
    return (lambda s_, b: sdf_to_density(s_, b) * b), [s, np.array(0.1)], None


@register("composite")
def _composite(rng):
    from .field import composite
    t = np.sort(rng.uniform(0.1, 2.0, size=(3, 6)), axis=1)

    def f(sigma, color):
        r = composite(sigma, color, t, 2.5)
        return T.concat(1, [r.color, T.reshape(r.depth, (3, 1)), T.reshape(r.opacity, (3, 1))])
    return f, [rng.uniform(0.0, 3.0, size=(3, 6)), rng.uniform(0, 1, size=(3, 6, 3))], None


def _set_attr(root, dotted: str, value) -> None:
    parts = dotted.split(".")
    obj = root
    for p in parts[:-1]:
        obj = obj[int(p)] if p.isdigit() else getattr(obj, p)
    last = parts[-1]
    if last.isdigit():
        obj[int(last)] = value
    else:
        setattr(obj, last, value)


@register("micro_end_to_end")
def _micro(rng):
    """Tiny encoder + field, rendered and scored by the full stage-2 loss."""
    from .encoder import Encoder, EncoderConfig
    from .field import FieldConfig, NeuralField, RayBatch, render_rays
    from .losses import LossWeights, loss_3d, loss_depth, loss_normal, loss_rgb, total_loss
    from .scene import canonical_camera, render_ground_truth, unit_sphere

    cam = canonical_camera(16)
    bundle = render_ground_truth(unit_sphere(), cam)
    with T.default_dtype(np.float64):
        enc = Encoder(EncoderConfig(image_size=16, shallow_channels=4, roi_channels=4, heads=2, n1=2, n2=2,
                                    fusion_width=8, pe_freqs=2, state_dim=2), seed=3)
        fld = NeuralField(FieldConfig(hidden=8, n_hidden=1, geo_feat=4, color_hidden=8, pe_freqs=2, dir_freqs=1,
                                      cond_dim=8), seed=4)
    enc.astype(np.float64)
    fld.astype(np.float64)
    params = dict(enc.named_parameters())
    params.update({f"field.{k}": v for k, v in fld.named_parameters()})
    picks = ["field.log_beta", "field.out.bias", "field.in_f.weight", "field.color2.bias"]
    enc_names = [k for k in params if not k.startswith("field.")]
    picks += [enc_names[0], enc_names[len(enc_names) // 2], enc_names[-1]]
    o, d = cam.rays()
    idx = np.array([0, 100, 119, 136, 255])
    rays = RayBatch(o[idx], d[idx], 0.5, 5.0, bundle.rgb.reshape(-1, 3)[idx], bundle.depth.reshape(-1)[idx],
                    cam.to_world(bundle.normal.reshape(-1, 3)[idx]), bundle.mask.reshape(-1)[idx])
    pts = rng.uniform(-1.2, 1.2, size=(6, 3))
    gt = np.linalg.norm(pts, axis=1) - 1.0

    def f(*tensors):
        for name, t in zip(picks, tensors):
            if name.startswith("field."):
                _set_attr(fld, name[len("field."):], t)
            else:
                _set_attr(enc, name, t)
        maps = enc(bundle.rgb, bundle.depth, bundle.mask)

        def pf(x):
            return enc.point_features(maps, cam, x)
        out = render_rays(fld, pf, rays, 6)
        s = fld.sdf_only(pts, fld.cond_proj(pf(pts)))
        parts = {"3d": loss_3d(s, gt), "rgb": loss_rgb(out.color, rays.color),
                 "depth": loss_depth(out.depth, rays.depth, rays.mask),
                 "normal": loss_normal(out.normal, rays.normal, rays.mask)}
        return total_loss(parts, LossWeights())
    return f, [params[k].data for k in picks], None


@dataclass
class SuiteResult:
    name: str
    report: GradcheckReport
    passed: bool


def run_suite(names=None, tol: float = 1e-4, inject_fault: str | None = None, seed: int = 0) -> list[SuiteResult]:
    """Run the registered cases; ``inject_fault`` negates one case's analytic gradient (harness self-test)."""
    names = list(SUITE) if names is None else list(names)
    unknown = [n for n in names + ([inject_fault] if inject_fault else []) if n not in SUITE]
    if unknown:
        raise KeyError(f"unknown gradcheck case(s): {unknown}")
    results = []
    for name in names:
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        f, inputs, wrt = SUITE[name](rng)
        report = gradcheck(f, inputs, wrt=wrt, flip_sign=(name == inject_fault))
        results.append(SuiteResult(name, report, report.passed(tol)))
    return results

