import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgmplan.autodiff import Parameter
from rgmplan.model import RGM, RGMConfig
from rgmplan.trainer import (
    CheckpointError,
    TrainConfig,
    TrainData,
    Trainer,
    adam_step,
    clip_weights,
    generator_weights,
    load_checkpoint,
    loss_discriminator,
    loss_generator,
    save_checkpoint,
    write_loss_csv,
)

CFG = RGMConfig(image_size=16, T=2, base_channels=8, n_residual_blocks=1)


def toy_data(n=4, seed=0) -> TrainData:
    rng = np.random.default_rng(seed)
    shape = (n, 3, 16, 16)
    gt = np.zeros(shape, dtype=np.float32)
    gt[:, :, 6:10, :] = 1.0
    return TrainData(rng.random(shape).astype(np.float32), rng.random(shape).astype(np.float32), gt)


def trainer(seed=0, **kw) -> Trainer:
    kw.setdefault("batch_size", 2)
    return Trainer(RGM(CFG, seed=seed), TrainConfig(T=2, seed=seed, **kw))


# ------------------------------------------------------------------ losses


def test_generator_weights():
    assert generator_weights(4) == [0.0, 1 / 16, 4 / 16, 9 / 16]
    assert generator_weights(1) == [0.0]


def test_generator_loss_hand_computed():
    got = loss_generator([[0.9], [0.5]], [[0.9], [0.2]], T=2).item()
    assert got == pytest.approx(0.25 * (math.log(0.5) + math.log(0.8)))
    # the first pass carries zero weight
    assert loss_generator([[0.3]], [[0.7]]).item() == 0.0
    with pytest.raises(ValueError):
        loss_generator([[0.1]], [[0.1], [0.2]], T=2)


def test_nonsaturating_generator_loss_hand_computed():
    got = loss_generator([[0.9], [0.5]], [[0.9], [0.2]], T=2, form="nonsaturating").item()
    assert got == pytest.approx(-0.25 * (math.log(0.5) + math.log(0.2)))
    with pytest.raises(ValueError):
        loss_generator([[0.5]], [[0.5]], form="hinge")
    with pytest.raises(ValueError):
        TrainConfig(generator_loss="hinge")


def test_discriminator_loss_hand_computed_with_smoothing():
    got = loss_discriminator([0.8], [[0.3], [0.1]], T=2, label_real=0.9).item()
    expect = -(0.9 * math.log(0.8) + 0.1 * math.log(0.2)) - 0.5 * math.log(0.7) - 0.5 * math.log(0.9)
    assert got == pytest.approx(expect)
    plain = loss_discriminator([0.8], [[0.3]], label_real=1.0).item()
    assert plain == pytest.approx(-math.log(0.8) - math.log(0.7))


def test_losses_stay_finite_at_saturation():
    assert np.isfinite(loss_discriminator([0.0], [[1.0]]).item())
    assert np.isfinite(loss_generator([[0.5], [1.0]], [[0.5], [1.0]]).item())


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_smoothed_real_loss_minimized_at_label(a, b):
    # with target 0.9 the real term is smallest at D = 0.9
    la = loss_discriminator([a], [[0.5]], label_real=0.9).item()
    lb = loss_discriminator([b], [[0.5]], label_real=0.9).item()
    if abs(a - 0.9) < abs(b - 0.9) and (a - 0.9) * (b - 0.9) > 0:
        assert la <= lb + 1e-12


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(label_real=0.0)
    with pytest.raises(ValueError):
        TrainConfig(clip_bound=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


# ------------------------------------------------------------------ optimizer and clipping


def test_adam_first_step_matches_closed_form():
    p = Parameter(np.array([1.0, -2.0, 0.5]), dtype=np.float64)
    p.grad[...] = [0.3, -4.0, 0.0]
    cfg = TrainConfig(learning_rate=0.01)
    adam_step([p], cfg, 1)
    g = np.array([0.3, -4.0, 0.0])
    expect = np.array([1.0, -2.0, 0.5]) - 0.01 * g / (np.abs(g) + cfg.adam_eps)
    assert np.allclose(p.data, expect)


def test_clip_weights():
    p = Parameter(np.array([-1.0, 0.01, 2.0]))
    clip_weights([p], 0.05)
    assert p.data.tolist() == pytest.approx([-0.05, 0.01, 0.05])
    with pytest.raises(ValueError):
        clip_weights([p], 0.0)


def test_discriminator_weights_clipped_after_every_update():
    tr = trainer(clip_bound=0.02, learning_rate=1e-2)
    data = toy_data()
    model = tr.model
    for _ in range(3):
        tr.train_step(data.maps[:2], data.states[:2], data.truths[:2])
        for p in model.discriminator_weights:
            assert np.abs(p.data).max() <= 0.02 + 1e-7, p.name
    # generator weights and norm parameters are outside the clip set
    assert max(np.abs(p.data).max() for p in model.generator_params) > 0.02
    assert max(np.abs(model.params["d1.h.bn.gamma"].data)) > 0.02


def test_train_step_reports_and_updates_both_players():
    tr = trainer()
    data = toy_data()
    g0 = tr.model.params["g.out.w"].data.copy()
    d0 = tr.model.params["d1.head.w"].data.copy()
    rep = tr.train_step(data.maps[:2], data.states[:2], data.truths[:2])
    assert rep.step == 1 and len(rep.d1_fake_steps) == 2
    assert all(np.isfinite([rep.l_g, rep.l_d1, rep.l_d2]))
    assert 0 < rep.mean_real_score < 1 and 0 < rep.mean_fake_score < 1
    assert not np.array_equal(g0, tr.model.params["g.out.w"].data)
    assert not np.array_equal(d0, tr.model.params["d1.head.w"].data)
    assert tr.adam_t == {"g": 1, "d": 1}


def test_training_is_deterministic():
    data = toy_data()
    a = trainer(seed=3).fit(data, epochs=1)
    b = trainer(seed=3).fit(data, epochs=1)
    assert [r.csv_row() for r in a] == [r.csv_row() for r in b]


def test_fit_respects_max_steps_and_epochs(tmp_path):
    data = toy_data(6)
    tr = trainer()
    reps = tr.fit(data, epochs=2)
    assert len(reps) == 6 and tr.epoch == 2
    tr2 = trainer()
    assert len(tr2.fit(data, epochs=5, max_steps=4)) == 4
    write_loss_csv(reps, tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0].startswith("step,l_g") and len(lines) == 7


def test_train_data_validation():
    with pytest.raises(ValueError):
        TrainData(np.zeros((0, 3, 4, 4)), np.zeros((0, 3, 4, 4)), np.zeros((0, 3, 4, 4)))
    with pytest.raises(ValueError):
        TrainData(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 8, 8)))
    imgs = [np.full((4, 4, 3), 255, dtype=np.uint8)]
    d = TrainData.from_images(imgs, imgs, imgs)
    assert d.maps.shape == (1, 3, 4, 4) and d.maps.max() == 1.0


# ------------------------------------------------------------------ checkpoints


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    tr = trainer()
    tr.fit(toy_data(), epochs=1)
    blob = save_checkpoint(tr, tmp_path / "c.rgm")
    assert blob[:4] == b"RGM1" and (tmp_path / "c.rgm").read_bytes() == blob
    model, tr2 = load_checkpoint(tmp_path / "c.rgm")
    assert save_checkpoint(tr2) == blob
    for k, p in tr.model.params.items():
        assert np.array_equal(p.data, model.params[k].data)
        assert np.array_equal(p.moment2, model.params[k].moment2)
    for k, b in tr.model.buffers.items():
        assert np.array_equal(b, model.buffers[k])
    assert tr2.step == tr.step and tr2.epoch == 1


def test_model_only_checkpoint_has_no_trainer():
    model, tr = load_checkpoint(save_checkpoint(RGM(CFG)))
    assert tr is None and model.cfg == CFG


def test_checkpoint_errors():
    blob = save_checkpoint(RGM(CFG))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(blob[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(blob, cfg=RGMConfig(image_size=16, T=2, base_channels=16, n_residual_blocks=1))
    # tamper with one declared shape
    (hlen,) = struct.unpack("<Q", blob[4:12])
    header = json.loads(blob[12 : 12 + hlen])
    header["tensors"][0]["shape"] = [1, 1, 1, 1]
    hb = json.dumps(header, sort_keys=True).encode()
    bad = b"RGM1" + struct.pack("<Q", len(hb)) + hb + blob[12 + hlen :]
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(bad)


def test_resume_matches_uninterrupted_run():
    data = toy_data()
    straight = trainer(seed=4)
    full = straight.fit(data, epochs=2)

    first = trainer(seed=4)
    head = first.fit(data, epochs=1)
    _, resumed = load_checkpoint(save_checkpoint(first))
    tail = resumed.fit(data, epochs=2)
    assert [r.csv_row() for r in head + tail] == [r.csv_row() for r in full]
    for k, p in straight.model.params.items():
        assert np.array_equal(p.data, resumed.model.params[k].data)
