"""Acceptance gate: one check per criterion, summarised as PASS/FAIL lines at the end of the run.

The end-to-end convergence run trains the default configuration for 50 epochs
on CPU and dominates the wall time of this module.
"""
import csv
import filecmp
import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from chromstraight import fileio
from chromstraight.cli import ablate, main, straighten_directory, load_pool, train_run
from chromstraight.config import RunConfig, load_config
from chromstraight.evaluation import EvalConfig, downstream_accuracy, fid
from chromstraight.morphometry import measure
from chromstraight.motiongen import (
    coordinate_grid, identity_flow, pixel_flow_to_grid, region_affine, region_moments, warp,
)
from chromstraight.slmatch import CandidatePool, select_driving
from chromstraight.synthdata import load_pairs, make_dataset
from chromstraight.training import adversarial_losses, load_generator, pairs_to_tensors, straighten_batch
from chromstraight.vitpatch import ViTPatchDiscriminator
from oracles import select_driving_oracle
from test_slmatch import random_chromosome

SMALL_DATA = {"n_train": 6, "n_test": 7, "n_pool": 14, "num_types": 7, "image_size": 96}
SMALL_MODEL = {"regions": 4, "heatmap_size": 32, "image_size": 96, "embed_dim": 48, "heads": 3}


# ---------------------------------------------------------------------------
# 1. warp oracle


def test_criterion_1_warp_oracle(verdict):
    start = time.perf_counter()
    x = torch.rand(2, 1, 256, 256)
    ident = float((warp(x, identity_flow(2, 256, 256)) - x).abs().max())
    x = torch.rand(2, 1, 40, 56, dtype=torch.float64)
    ident = max(ident, float((warp(x, identity_flow(2, 40, 56, torch.float64)) - x).abs().max()))

    img = np.random.default_rng(0).random((24, 24))
    shift_err = 0.0
    for dx, dy in [(1, 0), (-1, 0), (0, 1), (0, -1)]:
        flow = np.zeros((24, 24, 2))
        flow[..., 0], flow[..., 1] = dx, dy
        out = warp(torch.from_numpy(img)[None, None], pixel_flow_to_grid(flow))[0, 0].numpy()
        expected = np.zeros_like(img)
        src = img[max(dy, 0):24 + min(dy, 0), max(dx, 0):24 + min(dx, 0)]
        expected[max(-dy, 0):24 + min(-dy, 0), max(-dx, 0):24 + min(-dx, 0)] = src
        shift_err = max(shift_err, float(np.abs(out - expected).max()))

    gen = torch.Generator().manual_seed(0)
    im = torch.rand(1, 1, 10, 10, dtype=torch.float64, generator=gen)
    flow = (torch.rand(1, 10, 10, 2, dtype=torch.float64, generator=gen) * 1.6 - 0.8).requires_grad_(True)
    w = torch.rand(1, 1, 10, 10, dtype=torch.float64, generator=gen)
    (warp(im, flow) * w).sum().backward()
    worst = 0.0
    flat = flow.detach().reshape(-1)
    for idx in range(0, flat.numel(), 7):
        plus, minus = flat.clone(), flat.clone()
        plus[idx] += 1e-6
        minus[idx] -= 1e-6
        num = float(((warp(im, plus.reshape(flow.shape)) - warp(im, minus.reshape(flow.shape))) * w).sum() / 2e-6)
        ana = float(flow.grad.reshape(-1)[idx])
        worst = max(worst, abs(ana - num) / max(abs(num), 1e-8))
    elapsed = time.perf_counter() - start
    ok = ident < 1e-6 and shift_err < 1e-6 and worst < 1e-3 and elapsed < 10
    verdict("criterion 1 warp oracle", ok,
            f"identity {ident:.2e}, shift {shift_err:.2e}, grad rel {worst:.2e}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 2. motion algebra


def test_criterion_2_motion_algebra(verdict):
    gen = torch.Generator().manual_seed(1)
    a = torch.randn(8, 2, 2, dtype=torch.float64, generator=gen)
    cov = a @ a.transpose(-1, -2) + 0.05 * torch.eye(2, dtype=torch.float64)
    mean = torch.randn(8, 2, dtype=torch.float64, generator=gen)
    same = float((region_affine(mean, cov, mean, cov).affine - torch.eye(2, dtype=torch.float64)).abs().max())

    b = torch.randn(8, 2, 2, generator=gen)
    cov_d = b @ b.transpose(-1, -2) + 0.05 * torch.eye(2)
    mean_d = torch.randn(8, 2, generator=gen)
    fwd = region_affine(mean.float(), cov.float(), mean_d, cov_d)
    bwd = region_affine(mean_d, cov_d, mean.float(), cov.float())
    z = torch.randn(8, 2, generator=gen)
    there = (fwd.affine @ z[..., None])[..., 0] + fwd.translation
    back = (bwd.affine @ there[..., None])[..., 0] + bwd.translation
    comp = max(float((bwd.affine @ fwd.affine - torch.eye(2)).abs().max()), float((back - z).abs().max()))

    h = torch.zeros(20, 20, dtype=torch.float64)
    h[7, 13] = 1.0
    m, c = region_moments(h, eps=0.0)
    delta = max(float((m - coordinate_grid(20, 20, dtype=torch.float64)[7, 13]).abs().max()), float(c.abs().max()))
    ok = same < 1e-6 and comp < 1e-4 and delta == 0.0
    verdict("criterion 2 motion algebra", ok, f"identity {same:.2e}, composition {comp:.2e}, delta moments {delta:.1e}")


# ---------------------------------------------------------------------------
# 3. transformer invariants


def test_criterion_3_transformer_invariants(verdict):
    x = torch.rand(1, 2, 256, 256)
    row_err, shapes = 0.0, set()
    for n in (4, 8, 12, 16):
        d = ViTPatchDiscriminator(num_blocks=n).eval()
        d.keep_attention(True)
        with torch.no_grad():
            shapes.add(tuple(d(x).shape))
            shapes.add(tuple(d.tokens(x).shape))
        maps = d.attention_maps()
        assert len(maps) == n
        row_err = max(row_err, max(float((m.sum(-1) - 1).abs().max()) for m in maps))

    d = ViTPatchDiscriminator(num_blocks=4, use_pos_embed=False).eval()
    g = 16
    perm = torch.randperm(g * g, generator=torch.Generator().manual_seed(0))
    patches = x.reshape(1, 2, g, 16, g, 16).permute(0, 2, 4, 1, 3, 5).reshape(1, g * g, 2, 16, 16)
    shuffled = patches[:, perm].reshape(1, g, g, 2, 16, 16).permute(0, 3, 1, 4, 2, 5).reshape(1, 2, 256, 256)
    with torch.no_grad():
        perm_err = float((d.tokens(shuffled) - d.tokens(x)[:, perm]).abs().max())
    ok = row_err < 1e-5 and shapes == {(1, 1, 16, 16), (1, 256, 192)} and perm_err < 1e-5
    verdict("criterion 3 transformer invariants", ok,
            f"row-sum err {row_err:.2e}, shapes {sorted(shapes)}, permutation err {perm_err:.2e}")


# ---------------------------------------------------------------------------
# 4. adversarial-loss closed forms


def test_criterion_4_adversarial_closed_forms(verdict):
    half = torch.full((1, 1, 16, 16), 0.5, dtype=torch.float64)
    loss_d, loss_g = adversarial_losses(half, half)
    e_half = max(abs(float(loss_d) - math.log(2)), abs(float(loss_g) - math.log(2)))
    perfect_d, _ = adversarial_losses(torch.ones_like(half), torch.zeros_like(half))
    _, perfect_g = adversarial_losses(torch.ones_like(half), torch.ones_like(half))
    ok = e_half < 1e-6 and float(perfect_d) == 0.0 and float(perfect_g) == 0.0
    verdict("criterion 4 adversarial closed forms", ok,
            f"|loss(0.5) - ln2| {e_half:.2e}, perfect D {float(perfect_d)}, perfect G {float(perfect_g)}")


# ---------------------------------------------------------------------------
# 5. SL-matching oracle


def test_criterion_5_slmatch_oracle(verdict):
    rng = np.random.default_rng(2024)
    agree = selfsel = 0
    impl_time = 0.0
    for _ in range(100):
        images = {f"p{j:03d}": random_chromosome(rng) for j in range(50)}
        src = random_chromosome(rng)
        t = time.perf_counter()
        pool = CandidatePool.from_images(images)
        res = select_driving(src, pool)
        member = f"p{int(rng.integers(50)):03d}"
        own = select_driving(images[member], pool, member)
        impl_time += time.perf_counter() - t
        top, best = select_driving_oracle(src, images)
        agree += res.top3_ids == top and res.chosen_id == best
        selfsel += own.chosen_id == member
    ok = agree == 100 and selfsel == 100 and impl_time < 60
    verdict("criterion 5 SL-matching oracle", ok,
            f"oracle agreement {agree}/100, self-selection {selfsel}/100, {impl_time:.1f}s")


# ---------------------------------------------------------------------------
# 6. morphometry


def test_criterion_6_morphometry(verdict):
    bar = np.zeros((256, 256))
    bar[40:160, 100:122] = 0.7
    p = measure(bar)
    exact = p.length == 119 and p.width == 22
    n = 120
    diag = np.zeros((256, 256))
    for i in range(n):
        diag[20 + i, 20 + i:23 + i] = 1.0
    rel = abs(measure(diag).length - (n - 1) * math.sqrt(2)) / ((n - 1) * math.sqrt(2))
    rng = np.random.default_rng(6)
    blob = (rng.random((60, 40)) > 0.4) * rng.uniform(0.2, 1, (60, 40))
    a, b = np.zeros((200, 200)), np.zeros((200, 200))
    a[5:65, 5:45] = blob
    b[77:137, 101:141] = blob
    pa, pb = measure(a), measure(b)
    trans = pa.length == pb.length and pa.width == pb.width
    verdict("criterion 6 morphometry", exact and rel < 0.10 and trans,
            f"bar {p.length}x{p.width}, diagonal rel err {rel:.3f}, translation invariant {trans}")


# ---------------------------------------------------------------------------
# 7. FID oracle


def test_criterion_7_fid_oracle(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2000, 8))
    same = fid(x, x)
    f1 = fid(rng.normal(size=(10_000, 2)), rng.normal(size=(10_000, 2)) + np.array([1.0, 0.0]))
    f2 = fid(rng.normal(size=(10_000, 2)), 2.0 * rng.normal(size=(10_000, 2)))
    elapsed = time.perf_counter() - start
    ok = same < 1e-6 and abs(f1 - 1) <= 0.05 and abs(f2 - 2) <= 0.10 and elapsed < 30
    verdict("criterion 7 FID oracle", ok, f"fid(X,X) {same:.2e}, case 1.0 -> {f1:.4f}, case 2.0 -> {f2:.4f}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 8 and 11. default-configuration training run


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("default_run")
    config = RunConfig().resolved()
    make_dataset(config.data, root / "data")
    start = time.perf_counter()
    result = train_run(config, root / "data", root / "run")
    return config, root, result, time.perf_counter() - start


def test_criterion_8_convergence(default_run, verdict):
    config, root, result, elapsed = default_run
    hist = result.history
    v0, v_end = hist[0]["val_perceptual"], hist[-1]["val_perceptual"]
    test = load_pairs(root / "data", "test")
    src, drv = pairs_to_tensors(test)
    gen = load_generator(result.checkpoint)
    out = straighten_batch(gen, src, drv).numpy()[:, 0]
    truth = drv.numpy()[:, 0]
    fg = truth > config.match.tau
    mae = float(np.abs(out - truth)[fg].mean())
    verdict("criterion 8 runtime target", elapsed < 30 * 60, f"50 epochs in {elapsed / 60:.1f} min on CPU",
            blocking=False)
    ok = len(hist) == 51 and v_end <= 0.5 * v0 and mae < 0.1
    verdict("criterion 8 convergence", ok,
            f"val perceptual {v0:.4f} -> {v_end:.4f} (ratio {v_end / v0:.3f}), "
            f"foreground MAE {mae:.4f} on {len(test)} held-out pairs")


def test_criterion_11_downstream(default_run, verdict):
    config, root, result, _ = default_run
    data = root / "data"
    src_dir = data / "test" / "source"
    sources = {k: fileio.read_png(p) for k, p in fileio.list_images(src_dir).items()}
    labels = fileio.read_labels(src_dir)
    out = root / "straightened"
    straighten_directory(load_generator(result.checkpoint), sources, load_pool(data, config), out, config)
    ids = sorted(sources)
    y = np.array([labels[i] for i in ids])
    straight = [fileio.read_png(out / f"{i}.png") for i in ids]
    bent = [sources[i] for i in ids]
    ec = config.eval
    dca_straight = downstream_accuracy(straight, y, ec.k_folds, ec, seed=ec.seed)
    dca_bent = downstream_accuracy(bent, y, ec.k_folds, ec, seed=ec.seed)
    shuffled = np.random.default_rng(ec.seed).permutation(y)
    dca_chance = downstream_accuracy(straight, shuffled, ec.k_folds, ec, seed=ec.seed)
    ok_dir = dca_straight >= dca_bent - 0.02
    ok_chance = abs(dca_chance - 1 / 7) <= 0.08
    verdict("criterion 11 downstream sanity", ok_dir and ok_chance,
            f"DCA straightened {dca_straight:.3f} vs bent {dca_bent:.3f}; shuffled-label DCA {dca_chance:.3f}")


# ---------------------------------------------------------------------------
# 9. ablation harness


def test_criterion_9_ablation(tmp_path, verdict):
    config = replace(
        RunConfig(seed=9),
        data=replace(RunConfig().data, **SMALL_DATA),
        model=replace(RunConfig().model, **SMALL_MODEL),
        train=replace(RunConfig().train, epochs=4, milestones=(3,), max_val_pairs=7),
        eval=replace(EvalConfig(), k_folds=2, dca_max_epochs=20, feature_epochs=10),
    ).validate().resolved()
    make_dataset(config.data, tmp_path / "data")
    csv_path = ablate(config, tmp_path / "data", tmp_path / "abl")
    rows = list(csv.DictReader(open(csv_path)))
    arms = [r["arm"] for r in rows]
    complete = arms == ["patchgan", "vit4", "vit8", "vit12", "vit16"] and all(
        r["FID"] and r["LPIPS_A"] and r["LPIPS_V"] and r["val_perceptual"] for r in rows)
    verdict("criterion 9 ablation harness", complete, f"{len(rows)} rows: {', '.join(arms)}")
    base = float(rows[0]["val_perceptual"])
    best = min(rows[1:], key=lambda r: float(r["val_perceptual"]))
    verdict("criterion 9 directional check", float(best["val_perceptual"]) < base,
            f"PatchGAN {base:.4f}, best ViT-Patch {best['arm']} {float(best['val_perceptual']):.4f}",
            blocking=False)


# ---------------------------------------------------------------------------
# 10. determinism


def _pipeline(root: Path, cfg_file: Path) -> None:
    data, run, out = root / "data", root / "run", root / "straightened"
    c = ["--config", str(cfg_file)]
    assert main(["gen-data", *c, "--out", str(data)]) == 0
    assert main(["train", *c, "--data", str(data), "--out", str(run)]) == 0
    assert main(["straighten", *c, "--data", str(data), "--run", str(run), "--out", str(out)]) == 0
    assert main(["evaluate", *c, "--straightened", str(out), "--reference", str(data / "test" / "driving"),
                 "--out", str(run / "reports" / "report.csv")]) == 0


def test_criterion_10_determinism(tmp_path, verdict):
    cfg = {"seed": 10, "data": SMALL_DATA, "model": {**SMALL_MODEL, "blocks": 2},
           "train": {"epochs": 2, "milestones": [1], "max_val_pairs": 4},
           "eval": {"k_folds": 2, "dca_max_epochs": 5, "feature_epochs": 5}}
    cfg_file = tmp_path / "c.yaml"
    cfg_file.write_text(yaml.safe_dump(cfg))
    _pipeline(tmp_path / "a", cfg_file)
    _pipeline(tmp_path / "b", cfg_file)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    other = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    differing = [str(f) for f in files if not filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)]
    kinds = {"manifest": any(f.name == "manifest.jsonl" for f in files),
             "checkpoint": any(f.suffix == ".pt" for f in files),
             "report": any(f.name == "report.csv" for f in files)}
    ok = files == other and not differing and all(kinds.values())
    verdict("criterion 10 determinism", ok,
            f"{len(files)} files compared, {len(differing)} differ {differing[:3]}, present {kinds}")
