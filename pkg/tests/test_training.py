import math

import numpy as np
import pytest
import yaml
from threadpoolctl import threadpool_limits

from litformer.data import PatchPair, SimulationConfig, simulate_volumes
from litformer.errors import ConfigError, FormatError, NonFiniteError
from litformer.network import micro_config
from litformer.objectives import LossConfig
from litformer.training import (
    AdamState,
    TrainConfig,
    Trainer,
    load_checkpoint,
    lr_at,
    make_batch,
    model_from_checkpoint,
    optimizer_step,
    predict,
    save_checkpoint,
    training_pairs,
)


# schedule --------------------------------------------------------------------

def test_lr_schedule_landmarks():
    cfg = TrainConfig(epochs=10, warmup_epochs=2, lr_max=2e-4, lr_min=1e-6)
    total = 100
    assert lr_at(0, total, cfg) == 0.0
    assert lr_at(10, total, cfg) == pytest.approx(1e-4, abs=1e-18)
    assert lr_at(20, total, cfg) == 2e-4
    assert lr_at(total - 1, total, cfg) == pytest.approx(1e-6, abs=1e-12)
    mid = 20 + (total - 1 - 20) / 2
    assert lr_at(int(mid), total, cfg) < 2e-4


def test_lr_schedule_continuous_and_monotone():
    cfg = TrainConfig(epochs=10, warmup_epochs=2)
    total = 200
    lrs = np.array([lr_at(s, total, cfg) for s in range(total)])
    warm = 40
    assert np.all(np.diff(lrs[: warm + 1]) > 0)
    assert np.all(np.diff(lrs[warm:]) <= 0)
    assert np.max(np.abs(np.diff(lrs))) <= cfg.lr_max / warm + 1e-15


def test_lr_no_warmup():
    cfg = TrainConfig(epochs=3, warmup_epochs=0)
    assert lr_at(0, 30, cfg) == cfg.lr_max


def test_train_config_validation():
    for bad in (
        TrainConfig(lr_min=1.0, lr_max=0.1),
        TrainConfig(warmup_epochs=100, epochs=100),
        TrainConfig(batch_size=0),
        TrainConfig(beta2=1.0),
        TrainConfig(patch=(16, 64)),
    ):
        with pytest.raises(ConfigError):
            bad.validate()


# optimizer -------------------------------------------------------------------

def test_zero_gradient_leaves_params():
    cfg = TrainConfig(weight_decay=0.0)
    p = {"w": np.array([1.0, -2.0, 3.0], dtype=np.float32)}
    before = p["w"].copy()
    optimizer_step(p, {"w": np.zeros(3, dtype=np.float32)}, AdamState(), 1e-3, cfg)
    np.testing.assert_array_equal(p["w"], before)


def test_first_step_is_sign_step():
    cfg = TrainConfig(weight_decay=0.0)
    p = {"w": np.zeros(4)}
    g = np.array([0.5, -3.0, 1e-2, -1e-1])
    optimizer_step(p, {"w": g}, AdamState(), 1e-3, cfg)
    np.testing.assert_allclose(p["w"], -1e-3 * np.sign(g), rtol=1e-5)


def test_decoupled_weight_decay():
    cfg = TrainConfig(weight_decay=0.1)
    p = {"w": np.array([2.0, -4.0])}
    optimizer_step(p, {"w": np.zeros(2)}, AdamState(), 0.01, cfg)
    np.testing.assert_allclose(p["w"], np.array([2.0, -4.0]) * (1 - 0.01 * 0.1), rtol=1e-12)


def test_adam_matches_reference_over_steps(rng):
    cfg = TrainConfig(beta1=0.9, beta2=0.99, weight_decay=1e-3)
    p = {"w": rng.normal(size=5)}
    ref = p["w"].copy()
    m = np.zeros(5)
    v = np.zeros(5)
    state = AdamState()
    for t in range(1, 6):
        g = rng.normal(size=5)
        optimizer_step(p, {"w": g}, state, 1e-2, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        mh, vh = m / (1 - 0.9**t), v / (1 - 0.99**t)
        ref = ref - 1e-2 * (mh / (np.sqrt(vh) + 1e-8) + 1e-3 * ref)
    np.testing.assert_allclose(p["w"], ref, rtol=1e-12)
    assert state.step == 5


# checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    arrays = {"param/a": rng.normal(size=(2, 3)).astype(np.float32), "adam_m/a": np.zeros((4,), np.float32)}
    path = tmp_path / "c.litckpt"
    save_checkpoint(path, arrays, {"step": 3})
    back, meta = load_checkpoint(path)
    assert meta == {"step": 3}
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    assert path.read_bytes()[:8] == b"LITCKPT1"
    assert not (tmp_path / "c.litckpt.tmp").exists()


def test_checkpoint_format_errors(tmp_path):
    path = tmp_path / "c.litckpt"
    save_checkpoint(path, {"x": np.ones((3, 3), np.float32)}, {})
    raw = path.read_bytes()
    bad = tmp_path / "bad"
    bad.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(FormatError) as e:
        load_checkpoint(bad)
    assert e.value.offset == 0
    bad.write_bytes(raw[:-8])
    with pytest.raises(FormatError) as e:
        load_checkpoint(bad)
    assert e.value.offset == len(raw) - 8
    bad.write_bytes(raw[:12] + b"{" * (len(raw) - 12))
    with pytest.raises(FormatError) as e:
        load_checkpoint(bad)
    assert e.value.offset == 12


def test_interrupted_write_keeps_previous(tmp_path, monkeypatch):
    path = tmp_path / "c.litckpt"
    save_checkpoint(path, {"x": np.ones(2, np.float32)}, {"step": 1})

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr("litformer.training.os.replace", boom)
    with pytest.raises(OSError):
        save_checkpoint(path, {"x": np.zeros(2, np.float32)}, {"step": 2})
    arrays, meta = load_checkpoint(path)
    assert meta["step"] == 1
    np.testing.assert_array_equal(arrays["x"], 1.0)


# training loop ---------------------------------------------------------------

def tiny_setup(**train):
    base = dict(epochs=4, steps_per_epoch=2, warmup_epochs=1, batch_size=2, patch=(2, 8, 8), max_patches=4,
                lr_max=1e-3, lr_min=1e-5)
    base.update(train)
    tc = TrainConfig(**base)
    vols = list(simulate_volumes(SimulationConfig(n_volumes=1, shape=(8, 16, 16)), 0))
    return micro_config(), tc, training_pairs(vols, tc)


def test_training_pairs_and_batches():
    _, tc, pairs = tiny_setup()
    assert len(pairs) == 4
    x, y = make_batch(pairs, 3, tc)
    assert x.shape == (2, 1, 2, 8, 8) and y.shape == (2, 1, 4, 8, 8)
    assert x.dtype == np.float32
    x2, y2 = make_batch(pairs, 3, tc)
    np.testing.assert_array_equal(x, x2)
    np.testing.assert_array_equal(y, y2)


def test_resume_is_bit_identical(tmp_path):
    mc, tc, pairs = tiny_setup()
    with threadpool_limits(1):
        a = Trainer(mc, tc, LossConfig(), pairs)
        a.run(steps=3)
        a.save(tmp_path / "mid.litckpt")
        rec_a = a.train_step()
        b = Trainer(mc, tc, LossConfig(), pairs)
        b.load(tmp_path / "mid.litckpt")
        assert b.step == 3
        rec_b = b.train_step()
    assert rec_a.losses == rec_b.losses
    for n, p in a.params.items():
        np.testing.assert_array_equal(p.data, b.params[n].data)


def test_run_writes_checkpoints_and_sidecar(tmp_path):
    mc, tc, pairs = tiny_setup(checkpoint_every=2)
    t = Trainer(mc, tc, LossConfig(), pairs)
    logged = []
    hist = t.run(steps=3, log=logged.append, checkpoint=tmp_path / "c.litckpt")
    assert [r.step for r in hist] == [0, 1, 2]
    assert [r.step for r in logged] == [0, 1, 2]
    assert hist[0].lr == 0.0
    assert all(math.isfinite(r.losses["total"]) for r in hist)
    side = yaml.safe_load((tmp_path / "c.litckpt.yaml").read_text())
    assert side["model"]["base_channels"] == 4
    model, meta = model_from_checkpoint(tmp_path / "c.litckpt")
    assert meta["step"] == 3
    for n, p in model.named_parameters():
        np.testing.assert_array_equal(p.data, t.params[n].data)
    out = predict(model, pairs[0].ldr)
    assert out.shape == (4, 8, 8)


def test_nonfinite_abort_reports_step():
    mc, tc, pairs = tiny_setup()
    poisoned = [PatchPair(np.full_like(p.ldr, np.nan), p.ndr) for p in pairs]
    t = Trainer(mc, tc, LossConfig(), poisoned)
    with pytest.raises(NonFiniteError, match="step 0"):
        t.train_step()


def test_trainer_needs_pairs():
    mc, tc, _ = tiny_setup()
    with pytest.raises(ConfigError):
        Trainer(mc, tc, LossConfig(), [])
