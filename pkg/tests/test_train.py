import json

import numpy as np
import pytest

from dsac.config import RunConfig
from dsac.dataset import SynthConfig, generate_synthetic
from dsac.predictor import ModelFormatError
from dsac.train import (Trainer, TrainingDiverged, gt_contour, initial_contour, load_model,
                        mean_iou, predict)


def small_cfg(**kw):
    base = dict(size=32, L=30, iterations=10, epochs=1, kernels=[3, 3, 3], channels=[4, 4, 4],
                hidden=8, dtype="float64")
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(SynthConfig(n=4, size=32, seed=9, L=30))


def test_contours_have_L_nodes(data):
    inst = data[0]
    assert len(gt_contour(inst, 30)) == 30
    assert len(initial_contour(inst, 40)) == 40


def test_zero_lr_leaves_parameters_unchanged(data):
    tr = Trainer(small_cfg(lr=0.0, weight_decay=0.0), 32, 32)
    before = {k: v.copy() for k, v in tr.params.items()}
    tr.fit(data, checkpoint=False)
    assert len(tr.history) == len(data)
    for k in before:
        assert np.array_equal(tr.params[k], before[k])


def test_sgd_training_changes_parameters(data):
    tr = Trainer(small_cfg(optimizer="sgd", lr=1e-3, augment=False), 32, 32)
    before = {k: v.copy() for k, v in tr.params.items()}
    tr.fit(data, checkpoint=False)
    if any(r.hinge > 0 for r in tr.history):
        assert any(not np.array_equal(tr.params[k], before[k]) for k in before)


def test_direct_grid_keeps_one_map_stack_per_instance(data):
    tr = Trainer(small_cfg(predictor="direct", lr=0.01), 32, 32)
    tr.fit(data[:2], checkpoint=False)
    assert sorted(tr.params) == sorted(f"{i.id}/raw" for i in data[:2])
    with pytest.raises(KeyError):
        tr.predict(data[2:3])


def test_training_is_deterministic(data):
    a = Trainer(small_cfg(lr=1e-3), 32, 32)
    b = Trainer(small_cfg(lr=1e-3), 32, 32)
    a.fit(data, checkpoint=False)
    b.fit(data, checkpoint=False)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
    pa = [c for c, _ in a.predict(data)]
    pb = [c for c, _ in b.predict(data)]
    assert mean_iou(pa, data) == mean_iou(pb, data)


def test_nan_guard_dumps_and_aborts(tmp_path, data):
    tr = Trainer(small_cfg(), 32, 32, out_dir=tmp_path)
    tr.params["mlp.b2"] = tr.params["mlp.b2"] * np.nan
    with pytest.raises(TrainingDiverged, match="non-finite"):
        tr.fit(data[:1], checkpoint=False)
    dumps = list((tmp_path / "nan_dump").glob("*.npz"))
    assert len(dumps) == 1
    with np.load(dumps[0]) as z:
        assert {"gt", "init", "D", "kappa"} <= set(z.files)


def test_log_file_lines(tmp_path, data):
    tr = Trainer(small_cfg(lr=1e-3), 32, 32, out_dir=tmp_path)
    tr.fit(data, log_file=tmp_path / "log.jsonl")
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert len(lines) == len(data)
    assert set(lines[0]) >= {"iter", "hinge", "task_loss", "energy_gap", "lr"}
    assert (tmp_path / "model.bin").exists()


def test_model_file_roundtrip(tmp_path, data):
    cfg = small_cfg(lr=1e-3)
    tr = Trainer(cfg, 32, 32)
    tr.fit(data[:2], checkpoint=False)
    tr.save(tmp_path / "m.bin")
    predictor, params, cfg2 = load_model(tmp_path / "m.bin", (32, 32, 3))
    assert cfg2 == cfg
    got = [c for c, _ in predict(predictor, params, data, cfg2)]
    want = [c for c, _ in tr.predict(data)]
    for g, w in zip(got, want):
        np.testing.assert_array_equal(g, w)
    with pytest.raises(ModelFormatError, match="64x64"):
        load_model(tmp_path / "m.bin", (64, 64, 3))
