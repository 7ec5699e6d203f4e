import csv
import json

import numpy as np
import pytest

from svrecon import checkpoint as ckpt
from svrecon.encoder import EncoderConfig
from svrecon.field import FieldConfig
from svrecon.losses import LossWeights
from svrecon.scene import default_camera, default_scene, render_ground_truth
from svrecon.training import (CSV_COLUMNS, DivergenceError, Model, ParameterMismatchError, TrainConfig, Trainer,
                              load_params)

ENC = dict(image_size=8, shallow_channels=4, roi_channels=8, heads=2, n1=2, n2=2, fusion_width=8, pe_freqs=2,
           state_dim=2)


def tiny_model(seed=0, hidden=16):
    return Model(EncoderConfig(**ENC), FieldConfig(hidden=hidden, geo_feat=8, color_hidden=8, pe_freqs=2), seed=seed)


def tiny_cfg(**kw):
    base = dict(epochs=2, steps_per_epoch=2, batch_rays=16, n_samples=8, val_rays=16, m_uniform=4, m_near=4)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def scene():
    return render_ground_truth(default_scene(), default_camera(8))


def read_rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_config_schedule():
    cfg = TrainConfig()
    assert cfg.stage2_epoch == 10
    assert cfg.schedule().lr(21) == 6e-5 and cfg.schedule().lr(22) == pytest.approx(1e-5)


def test_smoke_run_writes_loadable_checkpoint(tmp_path, scene):
    tr = Trainer(tiny_model(), tiny_cfg(), [scene], run_dir=tmp_path)
    hist = tr.fit()
    assert [r["stage"] for r in hist] == [1, 2]
    assert all(np.isfinite(r["val_loss"]) for r in hist)
    arrays, state = ckpt.load(tmp_path / "last.ckpt")
    assert state["epoch"] == 1 and state["step"] == 4
    fresh = tiny_model(seed=9)
    load_params(fresh, arrays)
    for (n, p), (_, q) in zip(fresh.named_parameters(), tr.model.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data.astype(p.data.dtype), err_msg=n)
    assert (tmp_path / "best.ckpt").exists()
    assert read_rows(tmp_path / "metrics.csv")[0].keys() == set(CSV_COLUMNS)


def test_stage1_columns_zero_and_total_is_weighted_3d(tmp_path, scene):
    cfg = tiny_cfg(epochs=4, weights=LossWeights(w_3d=2.0))
    Trainer(tiny_model(), cfg, [scene], run_dir=tmp_path).fit()
    rows = read_rows(tmp_path / "metrics.csv")
    stage1 = [r for r in rows if r["stage"] == "1"]
    assert len(stage1) == cfg.stage2_epoch == 1
    for r in stage1:
        assert float(r["loss_rgb"]) == float(r["loss_d"]) == float(r["loss_n"]) == 0.0
        assert float(r["loss_total"]) == 2.0 * float(r["loss_3d"])
    stage2 = [r for r in rows if r["stage"] == "2"]
    assert all(float(r["loss_rgb"]) > 0 for r in stage2)


def test_deterministic_csv(tmp_path, scene):
    for name in ("a", "b"):
        Trainer(tiny_model(), tiny_cfg(), [scene], run_dir=tmp_path / name).fit()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_resume_reproduces_trajectory(tmp_path, scene):
    cfg = tiny_cfg(epochs=4)
    full = Trainer(tiny_model(), cfg, [scene], run_dir=tmp_path / "full")
    full.fit()
    part_cfg = tiny_cfg(epochs=4, max_epochs_run=2)
    Trainer(tiny_model(), part_cfg, [scene], run_dir=tmp_path / "part").fit()
    resumed = Trainer(tiny_model(seed=5), cfg, [scene], run_dir=tmp_path / "part")
    resumed.load(tmp_path / "part" / "last.ckpt")
    assert resumed.epoch == 2
    resumed.fit()
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "part" / "metrics.csv").read_bytes()
    for (n, p), (_, q) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data, err_msg=n)


def test_divergence_aborts_with_dump(tmp_path, scene):
    model = tiny_model()
    model.field.out.bias.data[:] = np.nan
    tr = Trainer(model, tiny_cfg(), [scene], run_dir=tmp_path)
    with pytest.raises(DivergenceError):
        tr.fit()
    info = json.loads((tmp_path / "divergence.json").read_text())
    assert "field.out.bias" in info["nonfinite_params"]
    assert info["state"]["skipped"] == 2
    assert not (tmp_path / "metrics.csv").exists()


def test_parameter_mismatch_names_parameter(tmp_path, scene):
    tr = Trainer(tiny_model(), tiny_cfg(epochs=1), [scene], run_dir=tmp_path)
    tr.fit()
    arrays, _ = ckpt.load(tmp_path / "last.ckpt")
    with pytest.raises(ParameterMismatchError, match="field.in_x.weight"):
        load_params(tiny_model(hidden=24), arrays)
    del arrays["param/field.log_beta"]
    with pytest.raises(ParameterMismatchError, match="field.log_beta"):
        load_params(tiny_model(), arrays)


def test_float32_training_dtype(scene):
    tr = Trainer(tiny_model(), tiny_cfg(epochs=1), [scene])
    assert all(p.data.dtype == np.float32 for p in tr.model.parameters())
    tr.fit()
    assert all(p.data.dtype == np.float32 for p in tr.model.parameters())


def test_needs_a_scene():
    with pytest.raises(ValueError):
        Trainer(tiny_model(), tiny_cfg(), [])
