"""Two-stage training of the encoder + neural field on synthetic scenes."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .encoder import Encoder, EncoderConfig
from .field import FieldConfig, NeuralField, RayBatch, render_rays
from .losses import LossWeights, loss_3d, loss_depth, loss_normal, loss_rgb, total_loss
from .nn import Module
from .optim import Adam, StepLR
from .scene import SceneBundle, TraceResult, sample_supervision_points
from .tensor import Tensor

log = logging.getLogger(__name__)

CSV_COLUMNS = ["epoch", "step", "stage", "lr", "loss_total", "loss_3d", "loss_rgb", "loss_d", "loss_n", "val_loss"]


class DivergenceError(RuntimeError):
    pass


class ParameterMismatchError(ckpt.CheckpointError):
    """Checkpoint and model disagree on a parameter's presence or shape."""


@dataclass
class TrainConfig:
    epochs: int = 40
    steps_per_epoch: int = 64
    batch_rays: int = 512
    lr: float = 6e-5
    lr_step_frac: float = 0.55
    lr_gamma: float = 1e-5 / 6e-5
    stage2_start: float = 0.25
    weights: LossWeights = field(default_factory=LossWeights)
    m_uniform: int = 8
    m_near: int = 8
    sigma_near: float = 0.02
    n_samples: int = 64
    val_rays: int = 256
    near: float = 0.1
    far: float = 6.0
    seed: int = 0
    dtype: str = "float32"
    max_epochs_run: int | None = None  # stop early (schedule still follows ``epochs``)

    @property
    def stage2_epoch(self) -> int:
        return math.ceil(self.stage2_start * self.epochs)

    def schedule(self) -> StepLR:
        return StepLR.from_fraction(self.lr, self.epochs, self.lr_step_frac, self.lr_gamma)

    def loss_weights(self) -> LossWeights:
        w = self.weights
        return LossWeights(w.w_3d, w.w_rgb, w.w_depth, w.w_normal, 1, self.stage2_epoch)


class Model(Module):
    def __init__(self, enc_cfg: EncoderConfig | None = None, field_cfg: FieldConfig | None = None, seed: int = 0):
        enc_cfg = enc_cfg or EncoderConfig()
        field_cfg = field_cfg or FieldConfig()
        field_cfg.cond_dim = enc_cfg.fusion_width
        self.encoder = Encoder(enc_cfg, seed=seed)
        self.field = NeuralField(field_cfg, seed=seed + 1)

    def point_fn(self, scene: SceneBundle):
        """Encode the scene's image and depth; return x -> conditioning features."""
        maps = self.encoder(scene.rgb, scene.depth, scene.mask)
        return lambda x: self.encoder.point_features(maps, scene.camera, x)


@dataclass
class PreparedScene:
    bundle: SceneBundle
    origins: np.ndarray
    dirs: np.ndarray
    color: np.ndarray
    depth: np.ndarray
    normal_world: np.ndarray
    mask: np.ndarray
    hit_points: np.ndarray

    @classmethod
    def from_bundle(cls, b: SceneBundle) -> "PreparedScene":
        o, d = b.camera.rays()
        mask = b.mask.reshape(-1)
        depth = b.depth.reshape(-1)
        normal_world = b.camera.to_world(b.normal.reshape(-1, 3))
        return cls(b, o, d, b.rgb.reshape(-1, 3), depth, normal_world, mask, o + depth[:, None] * d)

    def rays(self, idx: np.ndarray, near: float, far: float) -> RayBatch:
        return RayBatch(self.origins[idx], self.dirs[idx], near, far, self.color[idx], self.depth[idx],
                        self.normal_world[idx], self.mask[idx])

    def trace(self, idx: np.ndarray) -> TraceResult:
        return TraceResult(t=self.depth[idx], hit=self.mask[idx], points=self.hit_points[idx],
                           normals=self.normal_world[idx])


@dataclass
class Batch:
    rays: RayBatch
    points: np.ndarray
    gt_sdf: np.ndarray


def make_batch(scene: PreparedScene, n_rays: int, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    idx = np.sort(rng.choice(len(scene.origins), size=min(n_rays, len(scene.origins)), replace=False))
    rays = scene.rays(idx, cfg.near, cfg.far)
    sup = sample_supervision_points(scene.bundle.sdf, rays.origins, rays.dirs, cfg.m_uniform, cfg.m_near,
                                    cfg.sigma_near, rng, near=cfg.near, far=cfg.far, trace=scene.trace(idx))
    return Batch(rays, sup.points, sup.gt_sdf)


def compute_losses(model: Model, scene: PreparedScene, batch: Batch, cfg: TrainConfig, stage: int,
                   rng: np.random.Generator | None) -> dict:
    """Loss parts for one batch; stage 1 skips rendering entirely."""
    pf = model.point_fn(scene.bundle)
    cond = model.field.cond_proj(pf(batch.points))
    parts = {"3d": loss_3d(model.field.sdf_only(batch.points, cond), batch.gt_sdf)}
    if stage == 2:
        rays = batch.rays
        out = render_rays(model.field, pf, rays, cfg.n_samples, stratified=rng is not None, rng=rng)
        parts["rgb"] = loss_rgb(out.color, rays.color)
        parts["depth"] = loss_depth(out.depth, rays.depth, rays.mask)
        parts["normal"] = loss_normal(out.normal, rays.normal, rays.mask)
    return parts


def _scalar(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


class Trainer:
    def __init__(self, model: Model, cfg: TrainConfig, scenes: list[SceneBundle],
                 val_scenes: list[SceneBundle] | None = None, run_dir: str | os.PathLike | None = None):
        if not scenes:
            raise ValueError("need at least one training scene")
        self.model = model
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype).type
        model.astype(self.dtype)
        self.scenes = [PreparedScene.from_bundle(s) for s in scenes]
        self.val_scenes = [PreparedScene.from_bundle(s) for s in (val_scenes or scenes)]
        self.schedule = cfg.schedule()
        self.weights = cfg.loss_weights()
        self.names = [n for n, _ in model.named_parameters()]
        self.opt = Adam(model.parameters(), lr=self.schedule.lr(0))
        self.epoch = 0
        self.step = 0
        self.best_val = math.inf
        self.best_epoch = -1
        self.history: list[dict] = []
        self.run_dir = Path(run_dir) if run_dir is not None else None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        vrng = np.random.default_rng([cfg.seed, 7919])
        self.val_batches = [make_batch(s, cfg.val_rays, cfg, vrng) for s in self.val_scenes]

    # persistence ------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for name, p in self.model.named_parameters():
            arrays[f"param/{name}"] = p.data
        for name, m, v in zip(self.names, self.opt.m, self.opt.v):
            arrays[f"adam.m/{name}"] = m
            arrays[f"adam.v/{name}"] = v
        return arrays

    def state_dict(self) -> dict:
        return {
            "epoch": self.epoch, "step": self.step, "lr": self.opt.lr, "seed": self.cfg.seed,
            "adam_steps": self.opt.step_count, "skipped": self.opt.skipped,
            "best_val": self.best_val if math.isfinite(self.best_val) else None, "best_epoch": self.best_epoch,
        }

    def save(self, path) -> None:
        ckpt.save(path, self.state_arrays(), self.state_dict())

    def load(self, path) -> None:
        arrays, state = ckpt.load(path)
        load_params(self.model, arrays)
        for i, name in enumerate(self.names):
            self.opt.m[i] = arrays[f"adam.m/{name}"].astype(self.dtype)
            self.opt.v[i] = arrays[f"adam.v/{name}"].astype(self.dtype)
        self.opt.step_count = state["adam_steps"]
        self.opt.skipped = state["skipped"]
        self.epoch = state["epoch"] + 1
        self.step = state["step"]
        self.best_val = state["best_val"] if state["best_val"] is not None else math.inf
        self.best_epoch = state["best_epoch"]

    # loop -------------------------------------------------------------
    def validate(self) -> float:
        w = self.weights
        full = LossWeights(w.w_3d, w.w_rgb, w.w_depth, w.w_normal, stage=2)
        total = 0.0
        with T.no_grad(), T.default_dtype(self.dtype):
            for scene, batch in zip(self.val_scenes, self.val_batches):
                parts = compute_losses(self.model, scene, batch, self.cfg, stage=2, rng=None)
                total += _scalar(total_loss(parts, full))
        return total / len(self.val_scenes)

    def train_epoch(self) -> dict:
        cfg = self.cfg
        epoch = self.epoch
        w = self.weights.for_epoch(epoch)
        self.opt.lr = self.schedule.lr(epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        sums = {"total": 0.0, "3d": 0.0, "rgb": 0.0, "depth": 0.0, "normal": 0.0}
        with T.default_dtype(self.dtype):
            for _ in range(cfg.steps_per_epoch):
                scene = self.scenes[int(rng.integers(len(self.scenes)))]
                batch = make_batch(scene, cfg.batch_rays, cfg, rng)
                parts = compute_losses(self.model, scene, batch, cfg, w.stage, rng)
                loss = total_loss(parts, w)
                self.opt.zero_grad()
                loss.backward()
                self.opt.step()
                self.step += 1
                sums["total"] += _scalar(loss)
                for k in ("3d", "rgb", "depth", "normal"):
                    if k in parts:
                        sums[k] += _scalar(parts[k])
        n = cfg.steps_per_epoch
        val = self.validate()
        row = {
            "epoch": epoch, "step": self.step, "stage": w.stage, "lr": self.opt.lr,
            "loss_total": sums["total"] / n, "loss_3d": sums["3d"] / n,
            "loss_rgb": sums["rgb"] / n, "loss_d": sums["depth"] / n, "loss_n": sums["normal"] / n,
            "val_loss": val,
        }
        if not math.isfinite(val):
            self._dump_diagnostics(row)
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        self.history.append(row)
        if self.run_dir is not None:
            append_csv(self.run_dir / "metrics.csv", row)
        improved = val < self.best_val
        if improved:
            self.best_val = val
            self.best_epoch = epoch
        if self.run_dir is not None:
            self.save(self.run_dir / "last.ckpt")
            if improved:
                self.save(self.run_dir / "best.ckpt")
        log.info("epoch %d stage %d lr %.2e loss %.5f val %.5f", epoch, w.stage, self.opt.lr, row["loss_total"], val)
        self.epoch += 1
        return row

    def fit(self) -> list[dict]:
        last = self.cfg.epochs if self.cfg.max_epochs_run is None else min(self.cfg.epochs, self.cfg.max_epochs_run)
        while self.epoch < last:
            self.train_epoch()
        return self.history

    def _dump_diagnostics(self, row: dict) -> None:
        if self.run_dir is None:
            return
        info = {"row": {k: (v if isinstance(v, (int, str)) or math.isfinite(v) else str(v)) for k, v in row.items()},
                "state": self.state_dict(),
                "nonfinite_params": [n for n, p in self.model.named_parameters() if not np.all(np.isfinite(p.data))]}
        with open(self.run_dir / "divergence.json", "w") as f:
            json.dump(info, f, indent=2, default=str)


def load_params(model: Module, arrays: dict[str, np.ndarray]) -> None:
    """Copy ``param/<name>`` arrays into ``model``; raises on the first missing or mismatched one."""
    for name, p in model.named_parameters():
        key = f"param/{name}"
        if key not in arrays:
            raise ParameterMismatchError(f"checkpoint lacks parameter {name}")
        if tuple(arrays[key].shape) != p.shape:
            raise ParameterMismatchError(
                f"parameter {name}: checkpoint shape {tuple(arrays[key].shape)} != model shape {p.shape}")
        p.data = arrays[key].astype(p.data.dtype)


def format_value(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def append_csv(path: Path, row: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(CSV_COLUMNS)
        w.writerow([format_value(row[c]) for c in CSV_COLUMNS])


def train(cfg: TrainConfig, scenes: list[SceneBundle], val_scenes: list[SceneBundle] | None = None,
          run_dir=None, model: Model | None = None, resume: str | os.PathLike | None = None) -> Trainer:
    model = model or Model(seed=cfg.seed)
    trainer = Trainer(model, cfg, scenes, val_scenes, run_dir)
    if resume is not None:
        trainer.load(resume)
    trainer.fit()
    return trainer


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
