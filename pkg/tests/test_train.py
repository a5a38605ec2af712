import json

import numpy as np
import pytest
import torch

from sdnet.config import ModelConfig
from sdnet.errors import CheckpointError, InvalidInputError, NonFiniteLossError
from sdnet.losses import lsgan_disc_loss
from sdnet.train import (Ablation, TrainConfig, Trainer, fourier_upsample, load_model, overfit_probe,
                         probe_pairs)

TINY = ModelConfig.tiny()


@pytest.fixture(scope="module")
def pairs():
    return probe_pairs(3, seed=1, duration_s=0.25)


def _trainer(**kw):
    cfg = dict(steps=2, batch_size=2)
    cfg.update(kw)
    return Trainer(TINY, TrainConfig(**cfg), disc_channels=(4, 8, 8, 8))


def _params(module):
    return [p.detach().clone() for p in module.parameters()]


def _same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def test_two_steps_change_parameters(pairs):
    t = _trainer()
    g0, d0 = _params(t.model), _params(t.ensemble)
    t.fit(pairs)
    assert t.step == 2 and len(t.history) == 2
    assert not _same(g0, _params(t.model)) and not _same(d0, _params(t.ensemble))
    assert set(t.history[0]) >= {"step", "l_mstft", "l_adv", "l_f", "total", "wall_ms"}


def test_zero_learning_rates_leave_parameters_bitwise(pairs):
    t = _trainer(lr_g=0.0, lr_d=0.0)
    g0, d0 = _params(t.model), _params(t.ensemble)
    t.fit(pairs)
    assert _same(g0, _params(t.model)) and _same(d0, _params(t.ensemble))


def test_generator_update_leaves_discriminator_alone(pairs):
    t = _trainer(lr_d=0.0)
    g0, d0 = _params(t.model), _params(t.ensemble)
    t.fit(pairs, steps=1)
    assert _same(d0, _params(t.ensemble)) and not _same(g0, _params(t.model))
    t = _trainer(lr_g=0.0)
    g0 = _params(t.model)
    t.fit(pairs, steps=1)
    assert _same(g0, _params(t.model))


def test_discriminator_gradients_come_only_from_disc_loss(pairs):
    stepped, manual = _trainer(clip_norm=1e9), _trainer(clip_norm=1e9)
    lr, hr, meta = stepped.make_batch(pairs)
    pred = manual.model(lr).detach()
    disc = lsgan_disc_loss(manual.ensemble(hr), manual.ensemble(pred))
    expected = torch.autograd.grad(disc, manual.d_params)
    stepped.train_step(lr, hr, meta)
    for got, want in zip((p.grad for p in stepped.d_params), expected):
        assert torch.allclose(got, want, rtol=1e-5, atol=1e-9)


def test_runs_are_deterministic(pairs):
    a, b = _trainer(crop_samples=1000), _trainer(crop_samples=1000)
    a.fit(pairs, steps=3)
    b.fit(pairs, steps=3)
    strip = lambda h: [{k: v for k, v in r.items() if k != "wall_ms"} for r in h]
    assert strip(a.history) == strip(b.history)


def test_resume_matches_uninterrupted_run(pairs, tmp_path):
    full = _trainer(crop_samples=1000)
    full.fit(pairs, steps=4)
    first = _trainer(crop_samples=1000)
    first.fit(pairs, steps=2)
    first.save_checkpoint(tmp_path / "mid.ckpt")
    resumed = _trainer(crop_samples=1000)
    resumed.load_checkpoint(tmp_path / "mid.ckpt")
    assert resumed.step == 2
    resumed.fit(pairs, steps=2)
    a, b = full.state_tensors(), resumed.state_tensors()
    assert list(a) == list(b)
    for k in a:
        assert torch.equal(a[k], b[k]), k


def test_checkpoint_round_trip_and_model_loading(pairs, tmp_path):
    t = _trainer()
    t.fit(pairs, steps=1)
    t.save_checkpoint(tmp_path / "x.ckpt")
    back = _trainer()
    back.load_checkpoint(tmp_path / "x.ckpt")
    for k, v in t.state_tensors().items():
        assert torch.equal(v, back.state_tensors()[k])
    model = load_model(tmp_path / "x.ckpt")
    assert model.cfg == TINY
    assert _same(_params(model), _params(t.model))
    wide = Trainer(ModelConfig.tiny(lb_channels=16), TrainConfig(), disc_channels=(4, 8, 8, 8))
    with pytest.raises(CheckpointError):
        wide.load_checkpoint(tmp_path / "x.ckpt")


def test_nonfinite_loss_aborts_with_batch_dump(pairs, tmp_path):
    t = Trainer(TINY, TrainConfig(batch_size=2), log_path=tmp_path / "log.jsonl", disc_channels=(4, 8, 8, 8))
    lr, hr, meta = t.make_batch(pairs)
    hr[0, 10] = float("nan")
    with pytest.raises(NonFiniteLossError, match="step 1"):
        t.train_step(lr, hr, meta)
    dump = json.loads((tmp_path / "nonfinite_step1.json").read_text())
    assert dump[0]["pair"] == meta[0]["pair"]


def test_training_log_is_line_delimited(pairs, tmp_path):
    t = Trainer(TINY, TrainConfig(batch_size=2), log_path=tmp_path / "log.jsonl", disc_channels=(4, 8, 8, 8))
    t.fit(pairs, steps=2)
    rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [1, 2]
    assert all(r["total"] == pytest.approx(r["l_mstft"] + r["l_adv"] + r["l_f"], rel=1e-6) for r in rows)


def test_batch_errors():
    with pytest.raises(InvalidInputError):
        _trainer().make_batch([])
    with pytest.raises(InvalidInputError):
        TrainConfig(precision="half")


def test_probe_with_zero_steps_reports_no_change():
    rep = overfit_probe(n_pairs=2, steps=0, duration_s=0.25)
    assert rep.final_l_mstft == rep.initial_l_mstft and rep.l_mstft_ratio == 1.0
    assert rep.history == []


def test_probe_runs_without_lattice_blocks():
    cfg = TrainConfig(steps=5, batch_size=2, ablation=Ablation(use_gconv=True, use_lbs=False))
    rep = overfit_probe(n_pairs=2, steps=5, train_cfg=cfg, duration_s=0.25)
    assert len(rep.history) == 5 and np.isfinite(rep.final_l_mstft)
    assert rep.params < overfit_probe(n_pairs=2, steps=0, duration_s=0.25).params


def test_fourier_baseline_shape():
    pair = probe_pairs(1, duration_s=0.25)[0]
    up = fourier_upsample(pair.lr_noisy, 2)
    assert len(up) == len(pair.hr_clean) and up.sample_rate_hz == 16000
