import hashlib
import json
from dataclasses import replace

import numpy as np
import pytest

from ccmd.backbone import ModelConfig, init_params
from ccmd.distill import DistillConfig
from ccmd.moldata import Dataset, gen_synthetic
from ccmd.train import (
    Adam, Checkpoint, RECORD_COLUMNS, TeacherCache, TrainConfig, clip_grads, distill_student, evaluate,
    train, train_teacher,
)

SMALL = ModelConfig(layers=2, d_model=16, heads=2, ffn_mult=2)


@pytest.fixture(scope="module")
def data():
    return gen_synthetic(40, (3, 10), seed=8).split(30)


@pytest.fixture(scope="module")
def teacher(data):
    tr, va = data
    ck, _ = train_teacher(TrainConfig(epochs=2, batch_size=16, model=SMALL), tr, va)
    return ck


def _params_digest(params):
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(params[k].tobytes())
    return h.hexdigest()


def test_adam_reaches_quadratic_minimum():
    A = np.array([[3.0, 0.5], [0.5, 1.0]])
    b = np.array([1.0, -2.0])
    x_star = np.linalg.solve(A, b)   # minimizer of 0.5 x^T A x - b^T x
    p = {"x": np.array([4.0, 4.0])}
    opt = Adam(lr=0.01)
    for step in range(5000):
        opt.step(p, {"x": A @ p["x"] - b})
        if np.abs(p["x"] - x_star).max() < 1e-6:
            break
    assert np.abs(p["x"] - x_star).max() < 1e-6
    assert step < 5000


def test_adam_first_step_is_lr_times_sign():
    p = {"w": np.array([1.0, -1.0, 0.5])}
    Adam(lr=0.1).step(p, {"w": np.array([2.0, -0.3, 5.0])})
    np.testing.assert_allclose(p["w"], [0.9, -0.9, 0.4], rtol=1e-7)


def test_clip_grads():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grads(g, 1.0) == 5.0
    assert g["a"][0] == pytest.approx(0.6) and g["b"][0] == pytest.approx(0.8)


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    cfg = TrainConfig(lr=2e-4, seed=3, model=SMALL, distill=DistillConfig(mode="global_only"))
    back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg and back.digest() == cfg.digest()


def test_teacher_smoke(data):
    tr, _ = data
    ten = Dataset(tr.molecules[:10], tr.label_mean, tr.label_std)
    ck, rec = train_teacher(TrainConfig(epochs=1, batch_size=4, model=SMALL), ten, ten)
    assert len(rec.rows) == 1
    row = rec.rows[0]
    assert all(np.isfinite(row[c]) for c in RECORD_COLUMNS)
    assert row["train_mae"] >= 0 and row["val_mae"] >= 0
    assert ck.model.view == "3d"


def test_teacher_needs_coordinates(data):
    tr, va = data
    flat = Dataset([replace(m, coords=None) for m in tr.molecules])
    with pytest.raises(ValueError, match="coordinates"):
        train_teacher(TrainConfig(epochs=1, model=SMALL), flat, va)


def test_same_seed_same_record(data, teacher):
    tr, va = data
    cfg = TrainConfig(epochs=2, batch_size=8, seed=4, model=SMALL, distill=DistillConfig())
    _, a = distill_student(cfg, teacher, tr, va)
    _, b = distill_student(cfg, teacher, tr, va)
    assert a.numbers() == b.numbers()
    assert (a.best_val_mae, a.best_epoch) == (b.best_val_mae, b.best_epoch)
    _, c = distill_student(replace(cfg, seed=5), teacher, tr, va)
    assert c.numbers() != a.numbers()


def test_teacher_frozen_during_distillation(data, teacher, tmp_path):
    tr, va = data
    before = _params_digest(teacher.params)
    teacher.save(tmp_path / "t.ckpt")
    file_before = (tmp_path / "t.ckpt").read_bytes()
    distill_student(TrainConfig(epochs=5, batch_size=8, model=SMALL, distill=DistillConfig()),
                    teacher, tr, va)
    assert _params_digest(teacher.params) == before
    teacher.save(tmp_path / "t2.ckpt")
    assert (tmp_path / "t2.ckpt").read_bytes() == file_before


def test_mode_none_matches_plain_training(data, teacher):
    tr, va = data
    cfg = TrainConfig(epochs=2, batch_size=8, seed=1, model=SMALL)
    plain_best, plain_last, plain_rec = train(cfg, tr, va)
    ck, rec = distill_student(replace(cfg, distill=DistillConfig(mode="none")), teacher, tr, va)
    assert [r[:2] for r in rec.numbers()] == [r[:2] for r in plain_rec.numbers()]
    for k in plain_best:
        assert ck.params[k].tobytes() == plain_best[k].tobytes()


def test_teacher_cache_matches_fresh_trace(data, teacher):
    from ccmd.backbone import predict
    from ccmd.moldata import collate
    tr, _ = data
    cache = TeacherCache(teacher.params, teacher.model, tr, batch_size=7)
    mols = tr.molecules[3:9]
    b = collate(mols)
    _, fresh = predict(teacher.params, b, teacher.model)
    cached = cache.trace(mols, b.tokens)
    for x, y in zip(fresh.tokens, cached.tokens):
        np.testing.assert_allclose(y.value, x.value, rtol=0, atol=1e-12)


def test_layer_mismatch_rejected(data, teacher):
    tr, va = data
    cfg = TrainConfig(epochs=1, model=replace(SMALL, layers=3), distill=DistillConfig())
    with pytest.raises(ValueError, match="mismatch"):
        distill_student(cfg, teacher, tr, va)
    cfg = TrainConfig(epochs=1, model=replace(SMALL, d_model=8), distill=DistillConfig())
    with pytest.raises(ValueError, match="width"):
        distill_student(cfg, teacher, tr, va)


def test_projection_bridges_width(data, teacher):
    tr, va = data
    cfg = TrainConfig(epochs=1, batch_size=8, model=replace(SMALL, d_model=8, proj_dim=16),
                      distill=DistillConfig())
    _, rec = distill_student(cfg, teacher, tr, va)
    assert np.isfinite(rec.best_val_mae)


def test_checkpoint_round_trip(data, teacher, tmp_path):
    tr, va = data
    p = tmp_path / "c.ckpt"
    teacher.save(p)
    back = Checkpoint.load(p, expect=teacher.model)
    for k in teacher.params:
        assert back.params[k].tobytes() == teacher.params[k].tobytes()
    assert (back.label_mean, back.label_std, back.seed) == (teacher.label_mean, teacher.label_std, teacher.seed)
    assert evaluate(back, va) == evaluate(teacher, va)
    assert json.loads(p.read_text())["ccmd_ckpt_version"] == 1


def test_checkpoint_mismatch_rejected(teacher, tmp_path):
    p = tmp_path / "c.ckpt"
    teacher.save(p)
    with pytest.raises(ValueError, match="mismatch"):
        Checkpoint.load(p, expect=replace(teacher.model, layers=3))
    doc = json.loads(p.read_text())
    doc["model"]["d_model"] = 8
    p.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="parameters"):
        Checkpoint.load(p)
    doc["ccmd_ckpt_version"] = 2
    p.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="version"):
        Checkpoint.load(p)


def test_evaluate_view_checked(data, teacher):
    tr, va = data
    with pytest.raises(ValueError, match="view"):
        evaluate(teacher, va, "2d")
    flat = Dataset([replace(m, coords=None) for m in va.molecules])
    with pytest.raises(ValueError):
        evaluate(teacher, flat)
    with pytest.raises(ValueError, match="empty"):
        evaluate(teacher, Dataset([]))


def test_zero_predictor_mae_is_mean_abs_label():
    ds = gen_synthetic(300, (4, 20), seed=12)
    cfg = replace(SMALL, view="2d")
    p = {k: np.zeros_like(v) for k, v in init_params(cfg, 0).items()}
    got = evaluate(Checkpoint(cfg, p), ds)
    y = np.array([m.label for m in ds.molecules])
    assert got == pytest.approx(np.abs(y).mean(), rel=1e-12)
    assert 0.6 < got < 0.9


def test_overfit_twenty_molecules():
    ds = gen_synthetic(20, (4, 12), seed=3)
    cfg = TrainConfig(epochs=200, batch_size=20, model=ModelConfig(layers=2, d_model=32, heads=4, ffn_mult=2))
    ck, rec = train_teacher(cfg, ds, ds)
    assert rec.rows[-1]["train_mae"] < 0.05
    assert evaluate(ck, ds) < 0.05


def test_record_csv(tmp_path, data):
    tr, va = data
    _, _, rec = train(TrainConfig(epochs=2, batch_size=16, model=SMALL), tr, va)
    rec.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == ",".join(RECORD_COLUMNS)
    assert len(lines) == 3
