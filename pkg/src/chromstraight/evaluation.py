"""Image-quality metrics: perceptual distance, FID and downstream classification accuracy.

The perceptual backbones are small frozen convnets with seeded random weights
and the FID features come from a classifier trained on the synthetic types.
Absolute values are therefore only comparable within this package.
"""
from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.model_selection import StratifiedKFold

from . import fileio
from .errors import ConfigurationError, EvaluationError, MetricError

BACKBONE_A = 1  # stands in for the AlexNet LPIPS backbone
BACKBONE_V = 2  # stands in for the VGG LPIPS backbone
STAGE_CHANNELS = (16, 32, 64, 64)

REPORT_NOTE = (
    "metrics use seeded random-weight backbones and a small synthetic-type classifier; "
    "values are comparable only within this package, not to published Inception/AlexNet/VGG numbers"
)


class FeatureBackbone(nn.Module):
    """Four conv stages with frozen weights drawn from ``backbone_id``."""

    def __init__(self, backbone_id: int, channels=STAGE_CHANNELS):
        super().__init__()
        self.backbone_id = backbone_id
        gen = torch.Generator().manual_seed(int(backbone_id))
        convs = []
        cin = 1
        for cout in channels:
            conv = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (cin * 9)))
            convs.append(conv)
            cin = cout
        self.convs = nn.ModuleList(convs)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for i, conv in enumerate(self.convs):
            if i:
                h = F.avg_pool2d(h, 2)
            h = F.relu(conv(h))
            feats.append(h)
        return feats


@functools.lru_cache(maxsize=None)
def get_backbone(backbone_id: int) -> FeatureBackbone:
    return FeatureBackbone(backbone_id)


def _as_batch(image) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image)
    t = t.to(torch.float32)
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[:, None]
    return t


def _unit_normalize(f: torch.Tensor) -> torch.Tensor:
    return f / (torch.sqrt(torch.sum(f * f, dim=1, keepdim=True)) + 1e-10)


def perceptual_distances(a, b, backbone: FeatureBackbone) -> torch.Tensor:
    """Batched distance: per stage, spatial mean of the channel-summed squared
    difference of unit-normalised features, summed over stages."""
    xa, xb = _as_batch(a), _as_batch(b)
    if xa.shape != xb.shape:
        raise MetricError(f"shape mismatch {tuple(xa.shape)} vs {tuple(xb.shape)}")
    total = torch.zeros(xa.shape[0], dtype=torch.float64)
    with torch.no_grad():
        for fa, fb in zip(backbone(xa), backbone(xb)):
            diff = (_unit_normalize(fa) - _unit_normalize(fb)).double()
            total += diff.pow(2).sum(dim=1).mean(dim=(1, 2))
    return total


def perceptual_distance(a, b, backbone: FeatureBackbone) -> float:
    return float(perceptual_distances(a, b, backbone)[0])


def lpips_pair_score(a, b) -> float:
    """Mean of the two backbone distances."""
    return 0.5 * (perceptual_distance(a, b, get_backbone(BACKBONE_A))
                  + perceptual_distance(a, b, get_backbone(BACKBONE_V)))


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_features(cls, feats) -> "GaussianStats":
        x = np.asarray(feats, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise MetricError("FID needs at least 2 feature vectors per set")
        cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
        return cls(x.mean(axis=0), 0.5 * (cov + cov.T))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    vals = np.where(vals > -1e-6, np.clip(vals, 0.0, None), vals)
    if np.any(vals < 0):
        raise MetricError(f"covariance has eigenvalue {vals.min():.3g} below -1e-6")
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(s1: GaussianStats, s2: GaussianStats, reg: float = 1e-6) -> float:
    d = s1.mean.size
    c1 = s1.cov + reg * np.eye(d)
    c2 = s2.cov + reg * np.eye(d)
    root1 = _psd_sqrt(c1)
    # Tr((C1 C2)^1/2) = Tr((C1^1/2 C2 C1^1/2)^1/2); the latter is symmetric PSD
    vals = np.linalg.eigvalsh(0.5 * (root1 @ c2 @ root1 + (root1 @ c2 @ root1).T))
    vals = np.where(vals > -1e-6, np.clip(vals, 0.0, None), vals)
    if np.any(vals < 0):
        raise MetricError(f"covariance product has eigenvalue {vals.min():.3g} below -1e-6")
    diff = s1.mean - s2.mean
    value = diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * np.sum(np.sqrt(vals))
    return float(max(value, 0.0))


def fid(real_feats, fake_feats) -> float:
    return frechet_distance(GaussianStats.from_features(real_feats), GaussianStats.from_features(fake_feats))


class SmallClassifier(nn.Module):
    """Four conv stages, global average pooling and a linear head."""

    def __init__(self, num_classes: int, channels=STAGE_CHANNELS, input_size: int = 64):
        super().__init__()
        self.input_size = input_size
        layers = []
        cin = 1
        for cout in channels:
            layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
                       nn.MaxPool2d(2)]
            cin = cout
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(cin, num_classes)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_size:
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="area")
        return self.features(x).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(x))


@dataclass(frozen=True)
class EvalConfig:
    k_folds: int = 4
    dca_lr: float = 4e-5
    dca_batch_size: int = 8
    dca_max_epochs: int = 150
    plateau_patience: int = 5
    early_stop_patience: int = 20
    feature_epochs: int = 60
    seed: int | None = None
    plots: bool = False
    with_dca: bool = True
    ablation_arms: tuple[str, ...] = ("patchgan", "vit4", "vit8", "vit12", "vit16")


@dataclass
class FoldResult:
    best_epoch: int
    best_val_loss: float
    accuracy: float
    epochs_run: int


def _to_tensor_stack(images) -> torch.Tensor:
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).unsqueeze(1)


def train_classifier(x_train, y_train, num_classes: int, config: EvalConfig, seed: int,
                     x_val=None, y_val=None, epochs: int | None = None):
    """Train a SmallClassifier; with a validation set, apply plateau decay and
    early stopping on validation loss and keep the best-loss weights."""
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = SmallClassifier(num_classes)
    opt = torch.optim.Adam(model.parameters(), lr=config.dca_lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, mode="min", patience=config.plateau_patience)
    y_train = torch.as_tensor(y_train, dtype=torch.long)
    max_epochs = epochs if epochs is not None else config.dca_max_epochs
    best = FoldResult(-1, math.inf, 0.0, 0)
    best_state = None
    stale = 0
    epoch = -1
    for epoch in range(max_epochs):
        model.train()
        order = torch.randperm(len(y_train), generator=gen)
        for start in range(0, len(order), config.dca_batch_size):
            idx = order[start:start + config.dca_batch_size]
            if len(idx) < 2:
                continue  # BatchNorm needs more than one sample
            loss = F.cross_entropy(model(x_train[idx]), y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        if x_val is None:
            continue
        model.eval()
        with torch.no_grad():
            logits = model(x_val)
            val_loss = float(F.cross_entropy(logits, torch.as_tensor(y_val, dtype=torch.long)))
            acc = float((logits.argmax(1).numpy() == np.asarray(y_val)).mean())
        sched.step(val_loss)
        if val_loss < best.best_val_loss:
            best = FoldResult(epoch, val_loss, acc, epoch + 1)
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break
    best.epochs_run = epoch + 1
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, best


def downstream_accuracy(images, labels, k_folds: int = 4, config: EvalConfig | None = None,
                        seed: int = 0, return_folds: bool = False):
    """Mean over stratified folds of the validation accuracy at the best-validation-loss epoch."""
    config = config or EvalConfig(k_folds=k_folds)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(labels) == 0:
        raise ConfigurationError("no samples for downstream classification")
    if counts.min() < k_folds:
        raise ConfigurationError(
            f"class {classes[counts.argmin()]} has {counts.min()} samples, fewer than k_folds={k_folds}")
    if len(classes) == 1:
        return (1.0, []) if return_folds else 1.0
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[c] for c in labels])
    x = _to_tensor_stack(images)
    folds = []
    splitter = StratifiedKFold(n_splits=k_folds, shuffle=True, random_state=seed % (2 ** 32))
    for f, (tr, va) in enumerate(splitter.split(np.zeros(len(y)), y)):
        _, res = train_classifier(x[tr], y[tr], len(classes), config, seed + 1000 * f + 1, x[va], y[va])
        folds.append(res)
    acc = float(np.mean([r.accuracy for r in folds]))
    return (acc, folds) if return_folds else acc


def classifier_features(model: SmallClassifier, images) -> np.ndarray:
    with torch.no_grad():
        return model.embed(_to_tensor_stack(images)).double().numpy()


def backbone_features(images, backbone_id: int = BACKBONE_A) -> np.ndarray:
    bb = get_backbone(backbone_id)
    with torch.no_grad():
        return bb(_to_tensor_stack(images))[-1].mean(dim=(2, 3)).double().numpy()


@dataclass
class EvalReport:
    summary: dict
    per_image: list[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = ["row", "id", "FID", "LPIPS_A", "LPIPS_V", "DCA_small"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# {REPORT_NOTE}\n")
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            writer.writerow({"row": "summary", "id": "ALL", **{k: _fmt(self.summary.get(k)) for k in cols[2:]}})
            for rec in self.per_image:
                writer.writerow({"row": "image", "id": rec["id"], "FID": "", "DCA_small": "",
                                 "LPIPS_A": _fmt(rec["LPIPS_A"]), "LPIPS_V": _fmt(rec["LPIPS_V"])})


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.8g}"


def read_report(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def evaluate_images(straightened: dict, reference: dict, labels: dict | None,
                    config: EvalConfig | None = None, seed: int = 0, with_dca: bool = True) -> EvalReport:
    """Metrics for id-aligned straightened/reference image dicts."""
    config = config or EvalConfig()
    if set(straightened) != set(reference):
        missing = sorted(set(straightened) ^ set(reference))
        raise EvaluationError(f"straightened and reference ids differ: {missing[:5]}")
    ids = sorted(reference)
    if not ids:
        raise EvaluationError("nothing to evaluate")
    fake = [straightened[i] for i in ids]
    real = [reference[i] for i in ids]
    xa, xb = _to_tensor_stack(fake), _to_tensor_stack(real)
    da = perceptual_distances(xa, xb, get_backbone(BACKBONE_A)).numpy()
    dv = perceptual_distances(xa, xb, get_backbone(BACKBONE_V)).numpy()
    per_image = [{"id": i, "LPIPS_A": float(a), "LPIPS_V": float(v)} for i, a, v in zip(ids, da, dv)]

    y = None
    if labels is not None and all(i in labels for i in ids):
        y = np.array([labels[i] for i in ids])
    if y is not None and len(np.unique(y)) > 1:
        classes = {c: k for k, c in enumerate(np.unique(y))}
        model, _ = train_classifier(xb, np.array([classes[c] for c in y]), len(classes), config,
                                    seed + 7, epochs=config.feature_epochs)
        feats_real, feats_fake = classifier_features(model, real), classifier_features(model, fake)
    else:
        feats_real, feats_fake = backbone_features(real), backbone_features(fake)
    fid_value = fid(feats_real, feats_fake) if len(ids) >= 2 else None

    dca = None
    if with_dca and y is not None:
        try:
            dca = downstream_accuracy(fake, y, config.k_folds, config, seed)
        except ConfigurationError:
            dca = None
    summary = {"FID": fid_value, "LPIPS_A": float(da.mean()), "LPIPS_V": float(dv.mean()), "DCA_small": dca}
    return EvalReport(summary, per_image)


def evaluate_suite(straightened_dir, reference_dir, out_csv=None, config: EvalConfig | None = None,
                   seed: int = 0, with_dca: bool = True) -> EvalReport:
    """Score a directory of straightened PNGs against id-aligned references.

    Labels for DCA and classifier features come from ``labels.json`` in the
    reference directory (or the straightened one); without labels DCA is left
    empty and FID falls back to backbone features.
    """
    s_paths = fileio.list_images(straightened_dir)
    r_paths = fileio.list_images(reference_dir)
    if set(s_paths) != set(r_paths):
        missing = sorted(set(s_paths) ^ set(r_paths))
        raise EvaluationError(f"id mismatch between directories: {missing[:5]}")
    labels = fileio.read_labels(reference_dir) or fileio.read_labels(straightened_dir)
    report = evaluate_images({k: fileio.read_png(p) for k, p in s_paths.items()},
                             {k: fileio.read_png(p) for k, p in r_paths.items()},
                             labels, config, seed, with_dca)
    if out_csv is not None:
        report.write_csv(out_csv)
    return report
