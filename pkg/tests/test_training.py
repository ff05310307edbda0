import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from chromstraight.errors import ConfigurationError, NumericError
from chromstraight.synthdata import ImagePair
from chromstraight.training import (
    ModelConfig, TrainConfig, adversarial_losses, checkpoint_path, discriminator_loss, init_state, kfold_split,
    load_checkpoint, lr_at_epoch, read_metrics, save_checkpoint, train_loop, train_step,
)

SMALL = ModelConfig(regions=3, heatmap_size=32, image_size=64, blocks=1, patch_size=16, embed_dim=24, heads=3)


def toy_pairs(n, size=64, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        drv = np.zeros((size, size), np.float32)
        drv[12:52, 28:36] = rng.uniform(0.3, 1.0, (40, 1))
        src = np.roll(drv, int(rng.integers(-4, 5)), axis=1)
        out.append(ImagePair(f"p{i}", src, drv, np.zeros((size, size, 2), np.float32), i % 2))
    return out


def _tensors(pair):
    return (torch.from_numpy(pair.source)[None, None], torch.from_numpy(pair.driving)[None, None])


def _params(module):
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def test_bce_closed_forms():
    half = torch.full((1, 1, 4, 4), 0.5)
    d, g = adversarial_losses(half, half)
    assert abs(float(d) - math.log(2)) < 1e-6 and abs(float(g) - math.log(2)) < 1e-6
    d, _ = adversarial_losses(torch.ones(1, 1, 3, 3), torch.zeros(1, 1, 3, 3))
    assert float(d) == 0
    _, g = adversarial_losses(torch.ones(2, 1, 2, 2), torch.ones(2, 1, 2, 2))
    assert float(g) == 0
    d, g = adversarial_losses(torch.zeros(1, 1, 5, 5), torch.zeros(1, 1, 5, 5), logits=True)
    assert abs(float(d) - math.log(2)) < 1e-6 and abs(float(g) - math.log(2)) < 1e-6


def test_bce_rejects_non_finite_and_mismatch():
    with pytest.raises(NumericError):
        adversarial_losses(torch.tensor([float("nan")]), torch.tensor([0.5]))
    with pytest.raises(ValueError):
        adversarial_losses(torch.rand(1, 1, 2, 2), torch.rand(1, 1, 3, 3))


def test_lr_schedule_steps_at_milestones():
    cfg = TrainConfig()
    state = init_state(cfg, SMALL)
    lrs = []
    for _ in range(50):
        lrs.append(state.lr_gen)
        state.sched_gen.step()
    assert lrs[29] == pytest.approx(5e-5)
    assert lrs[30] == pytest.approx(5e-6)
    assert lrs[44] == pytest.approx(5e-6)
    assert lrs[45] == pytest.approx(5e-7)
    assert all(lr_at_epoch(5e-5, e, (30, 45), 0.1) == pytest.approx(lrs[e]) for e in range(50))
    assert len(set(np.round(np.log10(lrs), 6))) == 3


@pytest.mark.parametrize("kw", [dict(milestones=(45, 30)), dict(milestones=(30, 50)), dict(lr_gen=0.0),
                                dict(batch_size=2), dict(lr_decay_gamma=0.0)])
def test_invalid_train_config(kw):
    with pytest.raises(ConfigurationError):
        replace(TrainConfig(), **kw).validate()


def test_train_step_deterministic_and_changes_parameters():
    pair = toy_pairs(1)[0]
    results = []
    for _ in range(2):
        state = init_state(TrainConfig(seed=3), SMALL)
        before = _params(state.generator)
        train_step(state, *_tensors(pair), torch.Generator().manual_seed(1))
        results.append((_params(state.generator), _params(state.discriminator)))
        assert not torch.equal(before, results[-1][0])
    assert torch.equal(results[0][0], results[1][0]) and torch.equal(results[0][1], results[1][1])


def test_discriminator_loss_drops_after_step():
    pair = toy_pairs(1)[0]
    state = init_state(TrainConfig(seed=4), SMALL)
    src, drv = _tensors(pair)
    with torch.no_grad():
        fake = state.generator(src, drv).image
        before = discriminator_loss(state.discriminator, src, drv, fake)
    train_step(state, src, drv, torch.Generator().manual_seed(0))
    with torch.no_grad():
        after = discriminator_loss(state.discriminator, src, drv, fake)
    assert after < before


def test_non_finite_input_aborts():
    pair = toy_pairs(1)[0]
    state = init_state(TrainConfig(), SMALL)
    src, drv = _tensors(pair)
    drv = drv.clone()
    drv[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        train_step(state, src, drv, torch.Generator().manual_seed(0))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    state = init_state(TrainConfig(seed=2), SMALL)
    pair = toy_pairs(1)[0]
    train_step(state, *_tensors(pair), torch.Generator().manual_seed(0))
    a = save_checkpoint(state, tmp_path / "a.pt")
    b = save_checkpoint(load_checkpoint(a), tmp_path / "b.pt")
    assert a.read_bytes() == b.read_bytes()


def test_one_epoch_two_pairs(tmp_path, monkeypatch):
    import chromstraight.training as tr
    calls = []
    real_step = tr.train_step
    monkeypatch.setattr(tr, "train_step", lambda *a, **k: calls.append(1) or real_step(*a, **k))
    cfg = TrainConfig(epochs=1, milestones=(), seed=0)
    res = train_loop(cfg, SMALL, toy_pairs(2), tmp_path, val_pairs=toy_pairs(1, seed=9))
    assert len(calls) == 2
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["ckpt_epoch_1.pt"]
    rows = read_metrics(tmp_path / "reports" / "metrics.csv")
    assert [r["epoch"] for r in rows] == [0, 1]
    assert rows[1]["loss_D"] is not None and rows[0]["loss_D"] is None


def test_empty_dataset_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        train_loop(TrainConfig(epochs=1, milestones=()), SMALL, [], tmp_path)


def test_resume_is_bit_exact(tmp_path):
    cfg = TrainConfig(epochs=4, milestones=(2,), seed=5)
    pairs, val = toy_pairs(3), toy_pairs(1, seed=1)
    full = train_loop(cfg, SMALL, pairs, tmp_path / "full", val_pairs=val)
    train_loop(cfg, SMALL, pairs, tmp_path / "cut", val_pairs=val, stop_after=2)
    resumed = train_loop(cfg, SMALL, pairs, tmp_path / "cut", val_pairs=val, resume=True)
    assert full.checkpoint.read_bytes() == resumed.checkpoint.read_bytes()
    assert (tmp_path / "full/reports/metrics.csv").read_bytes() == (tmp_path / "cut/reports/metrics.csv").read_bytes()


def test_keep_checkpoints_prunes(tmp_path):
    cfg = TrainConfig(epochs=3, milestones=(), keep_checkpoints=1)
    train_loop(cfg, SMALL, toy_pairs(1), tmp_path)
    assert [p.name for p in (tmp_path / "checkpoints").iterdir()] == ["ckpt_epoch_3.pt"]
    assert checkpoint_path(tmp_path, 3).exists()


def test_resume_with_other_config_rejected(tmp_path):
    cfg = TrainConfig(epochs=1, milestones=())
    train_loop(cfg, SMALL, toy_pairs(1), tmp_path)
    with pytest.raises(ConfigurationError):
        train_loop(replace(cfg, lr_gen=1e-4), SMALL, toy_pairs(1), tmp_path, resume=True)


def test_kfold_partition():
    folds = kfold_split(40, 5, seed=1)
    assert len(folds) == 5
    seen = np.concatenate([v for _, v in folds])
    assert sorted(seen.tolist()) == list(range(40))
    for tr, va in folds:
        assert len(va) == 8 and len(tr) == 32 and not set(tr) & set(va)
    with pytest.raises(ConfigurationError):
        kfold_split(3, 5)
