"""Adversarial training of the motion generator against a patch discriminator."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, NumericError
from .evaluation import BACKBONE_A, BACKBONE_V, get_backbone, perceptual_distances
from .motiongen import MotionTransformGenerator, equivariance_loss, perceptual_loss, sample_transform
from .synthdata import ImagePair, derive_seed
from .vitpatch import build_discriminator, pair

FORMAT_VERSION = 1
METRIC_COLUMNS = ("epoch", "loss_D", "loss_G_adv", "loss_perc", "loss_equiv",
                  "lr_gen", "lr_disc", "val_perceptual")


@dataclass(frozen=True)
class ModelConfig:
    regions: int = 10
    heatmap_size: int = 64
    region_prior: bool = True
    discriminator: str = "vit"   # "vit" or "patchgan"
    blocks: int = 12
    patch_size: int = 16
    embed_dim: int = 192
    heads: int = 3
    mlp_ratio: float = 4.0
    image_size: int = 256

    def validate(self) -> None:
        if not 1 <= self.regions <= 32:
            raise ConfigurationError(f"model.regions must be in [1, 32], got {self.regions}")
        if self.discriminator not in ("vit", "patchgan"):
            raise ConfigurationError(f"model.discriminator must be 'vit' or 'patchgan', got {self.discriminator!r}")
        if self.blocks < 1:
            raise ConfigurationError(f"model.blocks must be >= 1, got {self.blocks}")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigurationError(f"model.patch_size {self.patch_size} must divide {self.image_size}")
        if self.image_size % self.heatmap_size:
            raise ConfigurationError("model.heatmap_size must divide model.image_size")
        if self.embed_dim % self.heads:
            raise ConfigurationError("model.embed_dim must be divisible by model.heads")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 1
    lr_gen: float = 5e-5
    lr_disc: float = 1e-5
    milestones: tuple[int, ...] = (30, 45)
    lr_decay_gamma: float = 0.1
    betas: tuple[float, float] = (0.5, 0.999)
    w_perceptual: float = 10.0
    w_equivariance: float = 10.0
    w_adversarial: float = 1.0
    seed: int | None = None  # None means 0; the CLI fills it from the root seed
    max_val_pairs: int = 8
    keep_checkpoints: int = 0  # 0 keeps every epoch

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigurationError("train.epochs must be >= 0")
        if self.batch_size != 1:
            raise ConfigurationError("train.batch_size: only batch size 1 is supported")
        if self.lr_gen <= 0 or self.lr_disc <= 0:
            raise ConfigurationError("train.lr_gen and train.lr_disc must be > 0")
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigurationError(f"train.milestones must be strictly increasing, got {ms}")
        if ms and (ms[0] < 1 or ms[-1] >= max(self.epochs, 1)):
            raise ConfigurationError(f"train.milestones must lie in [1, epochs), got {ms}")
        if not 0 < self.lr_decay_gamma <= 1:
            raise ConfigurationError("train.lr_decay_gamma must be in (0, 1]")
        if min(self.w_perceptual, self.w_equivariance, self.w_adversarial) < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if self.keep_checkpoints < 0:
            raise ConfigurationError("train.keep_checkpoints must be >= 0")


def lr_at_epoch(base: float, epoch: int, milestones: Sequence[int], gamma: float) -> float:
    """Learning rate used while training 0-based epoch ``epoch``."""
    return base * gamma ** sum(1 for m in milestones if epoch >= m)


# ---------------------------------------------------------------------------
# losses


def adversarial_losses(real_scores: torch.Tensor, fake_scores: torch.Tensor, logits: bool = False):
    """Per-token binary cross-entropy; returns (loss_D, loss_G_adv).

    ``loss_D`` averages the real (target 1) and fake (target 0) terms; the
    generator term targets 1 on the fake scores.  Scores are probabilities
    unless ``logits`` is set.
    """
    if real_scores.shape != fake_scores.shape:
        raise ValueError("real and fake score maps must have the same shape")
    if not (torch.isfinite(real_scores).all() and torch.isfinite(fake_scores).all()):
        raise NumericError("non-finite discriminator scores")
    if logits:
        bce = F.binary_cross_entropy_with_logits
    else:
        bce = F.binary_cross_entropy
    loss_real = bce(real_scores, torch.ones_like(real_scores))
    loss_fake = bce(fake_scores, torch.zeros_like(fake_scores))
    loss_g = bce(fake_scores, torch.ones_like(fake_scores))
    return 0.5 * (loss_real + loss_fake), loss_g


def discriminator_loss(disc, source, driving, fake) -> torch.Tensor:
    """Real and fake pairs go through the discriminator as one batch of 2B."""
    scores = disc(torch.cat([pair(source, driving), pair(source, fake)], dim=0))
    real, fake_s = scores.chunk(2, dim=0)
    return adversarial_losses(real, fake_s, logits=True)[0]


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    generator: MotionTransformGenerator
    discriminator: torch.nn.Module
    opt_gen: torch.optim.Optimizer
    opt_disc: torch.optim.Optimizer
    sched_gen: torch.optim.lr_scheduler.MultiStepLR
    sched_disc: torch.optim.lr_scheduler.MultiStepLR
    train_config: TrainConfig
    model_config: ModelConfig
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    best_val: float = math.inf

    @property
    def lr_gen(self) -> float:
        return self.opt_gen.param_groups[0]["lr"]

    @property
    def lr_disc(self) -> float:
        return self.opt_disc.param_groups[0]["lr"]


def build_models(model_config: ModelConfig, seed: int):
    model_config.validate()
    torch.manual_seed(derive_seed(seed, "generator"))
    gen = MotionTransformGenerator(model_config.regions, model_config.heatmap_size,
                                   model_config.image_size, model_config.region_prior)
    torch.manual_seed(derive_seed(seed, "discriminator"))
    disc = build_discriminator(model_config.discriminator, model_config.blocks, model_config.patch_size,
                               model_config.embed_dim, model_config.heads, model_config.mlp_ratio,
                               model_config.image_size)
    return gen, disc


def init_state(train_config: TrainConfig, model_config: ModelConfig) -> TrainState:
    train_config.validate()
    gen, disc = build_models(model_config, train_config.seed or 0)
    opt_g = torch.optim.Adam(gen.parameters(), lr=train_config.lr_gen, betas=train_config.betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=train_config.lr_disc, betas=train_config.betas)
    ms = list(train_config.milestones)
    sched_g = torch.optim.lr_scheduler.MultiStepLR(opt_g, ms, gamma=train_config.lr_decay_gamma)
    sched_d = torch.optim.lr_scheduler.MultiStepLR(opt_d, ms, gamma=train_config.lr_decay_gamma)
    return TrainState(gen, disc, opt_g, opt_d, sched_g, sched_d, train_config, model_config)


def _check_finite(**values: torch.Tensor):
    for name, v in values.items():
        if not torch.isfinite(v).all():
            raise NumericError(f"non-finite {name} during training")


def train_step(state: TrainState, source: torch.Tensor, driving: torch.Tensor,
               transform_gen: torch.Generator) -> dict:
    """One discriminator update on (real, detached fake), then one generator
    update on the weighted perceptual, equivariance and adversarial terms."""
    cfg = state.train_config
    gen, disc = state.generator, state.discriminator
    gen.train()
    disc.train()

    out = gen(source, driving)
    fake = out.image

    disc.requires_grad_(True)
    state.opt_disc.zero_grad(set_to_none=True)
    loss_d = discriminator_loss(disc, source, driving, fake.detach())
    _check_finite(loss_D=loss_d)
    loss_d.backward()
    state.opt_disc.step()

    disc.requires_grad_(False)
    state.opt_gen.zero_grad(set_to_none=True)
    loss_adv = F.binary_cross_entropy_with_logits(
        s := disc(pair(source, fake)), torch.ones_like(s))
    loss_perc = perceptual_loss(fake, driving, get_backbone(BACKBONE_A))
    transform = sample_transform(transform_gen, gen.image_size)
    loss_eq = equivariance_loss(gen.region_estimator, source, transform, heatmap=out.heatmaps_source)
    total = cfg.w_perceptual * loss_perc + cfg.w_equivariance * loss_eq + cfg.w_adversarial * loss_adv
    _check_finite(loss_G=total)
    total.backward()
    state.opt_gen.step()
    disc.requires_grad_(True)
    return {"loss_D": loss_d.item(), "loss_G_adv": loss_adv.item(),
            "loss_perc": loss_perc.item(), "loss_equiv": loss_eq.item()}


def pairs_to_tensors(pairs: Sequence[ImagePair]) -> tuple[torch.Tensor, torch.Tensor]:
    src = torch.from_numpy(np.stack([p.source for p in pairs]).astype(np.float32))[:, None]
    drv = torch.from_numpy(np.stack([p.driving for p in pairs]).astype(np.float32))[:, None]
    return src, drv


@torch.no_grad()
def straighten_batch(gen: MotionTransformGenerator, source: torch.Tensor, driving: torch.Tensor,
                     chunk: int = 4) -> torch.Tensor:
    gen.eval()
    outs = [gen(source[i:i + chunk], driving[i:i + chunk]).image for i in range(0, source.shape[0], chunk)]
    return torch.cat(outs, dim=0)


def validation_perceptual(gen: MotionTransformGenerator, source: torch.Tensor, driving: torch.Tensor) -> float:
    """Mean two-backbone perceptual distance between generated and driving images."""
    if source.shape[0] == 0:
        return float("nan")
    fake = straighten_batch(gen, source, driving)
    d = 0.5 * (perceptual_distances(fake, driving, get_backbone(BACKBONE_A))
               + perceptual_distances(fake, driving, get_backbone(BACKBONE_V)))
    return float(d.mean())


# ---------------------------------------------------------------------------
# checkpoints


def state_dict(state: TrainState) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "train_config": asdict(state.train_config),
        "model_config": asdict(state.model_config),
        "epoch": state.epoch,
        "history": list(state.history),
        "best_val": state.best_val,
        "generator": state.generator.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "opt_gen": state.opt_gen.state_dict(),
        "opt_disc": state.opt_disc.state_dict(),
        "sched_gen": state.sched_gen.state_dict(),
        "sched_disc": state.sched_disc.state_dict(),
    }


def _flatten(obj, tensors: dict, path: str = "r"):
    """JSON-able skeleton of ``obj`` with tensors moved into ``tensors``."""
    if torch.is_tensor(obj):
        tensors[path] = obj.detach().clone().contiguous()
        return {"__tensor__": path}
    if isinstance(obj, dict):
        return {"__dict__": [[_key(k), _flatten(v, tensors, f"{path}.{_key(k)}")] for k, v in obj.items()]}
    if isinstance(obj, tuple):
        return {"__tuple__": [_flatten(v, tensors, f"{path}.{i}") for i, v in enumerate(obj)]}
    if isinstance(obj, list):
        return [_flatten(v, tensors, f"{path}.{i}") for i, v in enumerate(obj)]
    return obj


def _key(k) -> str:
    if isinstance(k, bool) or not isinstance(k, (int, str)):
        raise TypeError(f"unsupported state key {k!r}")
    return f"i:{k}" if isinstance(k, int) else f"s:{k}"


def _unflatten(obj, tensors: dict):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            return tensors[obj["__tensor__"]]
        if "__tuple__" in obj:
            return tuple(_unflatten(v, tensors) for v in obj["__tuple__"])
        return {(int(k[2:]) if k[0] == "i" else k[2:]): _unflatten(v, tensors) for k, v in obj["__dict__"]}
    if isinstance(obj, list):
        return [_unflatten(v, tensors) for v in obj]
    return obj


def save_checkpoint(state: TrainState, path) -> Path:
    """Write a checkpoint whose bytes depend only on the state's values.

    Pickling the nested state directly would also record which Python objects
    happen to be shared, so non-tensor data goes in as one JSON string and
    tensors as a flat name -> tensor map.  Serialising through a buffer keeps
    the file name out of the archive.
    """
    tensors: dict[str, torch.Tensor] = {}
    skeleton = json.dumps(_flatten(state_dict(state), tensors), sort_keys=False)
    buf = io.BytesIO()
    torch.save({"format_version": FORMAT_VERSION, "skeleton": skeleton, "tensors": tensors}, buf)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def _tuple_fields(d: dict, cls) -> dict:
    out = {}
    for k, v in d.items():
        default = getattr(cls, k, None) if k in cls.__dataclass_fields__ else None
        out[k] = tuple(v) if isinstance(v, list) or isinstance(default, tuple) else v
    return out


def load_checkpoint(path) -> TrainState:
    raw = torch.load(path, map_location="cpu", weights_only=True)
    version = raw.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint format_version {version!r}")
    blob = _unflatten(json.loads(raw["skeleton"]), raw["tensors"])
    tc = TrainConfig(**_tuple_fields(blob["train_config"], TrainConfig))
    mc = ModelConfig(**blob["model_config"])
    state = init_state(tc, mc)
    state.generator.load_state_dict(blob["generator"])
    state.discriminator.load_state_dict(blob["discriminator"])
    state.opt_gen.load_state_dict(blob["opt_gen"])
    state.opt_disc.load_state_dict(blob["opt_disc"])
    state.sched_gen.load_state_dict(blob["sched_gen"])
    state.sched_disc.load_state_dict(blob["sched_disc"])
    state.epoch = int(blob["epoch"])
    state.history = list(blob["history"])
    state.best_val = float(blob["best_val"])
    return state


def load_generator(path) -> MotionTransformGenerator:
    gen = load_checkpoint(path).generator
    gen.eval()
    return gen


def checkpoint_path(run_dir, epoch: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"ckpt_epoch_{epoch}.pt"


def latest_checkpoint(run_dir) -> Path | None:
    ckpts = sorted((Path(run_dir) / "checkpoints").glob("ckpt_epoch_*.pt"),
                   key=lambda p: int(p.stem.rsplit("_", 1)[1]))
    return ckpts[-1] if ckpts else None


def write_metrics(history: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: ("" if row.get(k) is None else repr(row[k]) if isinstance(row[k], float) else row[k])
                        for k in METRIC_COLUMNS})


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [{k: (int(v) if k == "epoch" else float(v) if v != "" else None) for k, v in r.items()} for r in rows]


# ---------------------------------------------------------------------------
# loop


def kfold_split(n: int, k: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled k-fold partition: every index lands in exactly one validation fold."""
    if k < 2 or k > n:
        raise ConfigurationError(f"k must be in [2, n], got k={k}, n={n}")
    perm = np.random.default_rng(derive_seed(seed, "kfold")).permutation(n)
    folds = np.array_split(perm, k)
    return [(np.sort(np.concatenate(folds[:i] + folds[i + 1:])), np.sort(folds[i])) for i in range(k)]


@dataclass
class TrainResult:
    state: TrainState
    run_dir: Path
    checkpoint: Path | None
    history: list[dict]


def train_loop(train_config: TrainConfig, model_config: ModelConfig, train_pairs: Sequence[ImagePair],
               run_dir, val_pairs: Sequence[ImagePair] | None = None, resume: bool | str | Path = False,
               stop_after: int | None = None, log: Callable[[str], None] | None = None) -> TrainResult:
    """Train for ``train_config.epochs`` epochs, checkpointing every epoch.

    ``resume=True`` continues from the newest checkpoint in ``run_dir``; a path
    resumes from that checkpoint.  ``stop_after`` ends the run after that
    epoch (used to simulate interruption).
    """
    if len(train_pairs) == 0:
        raise ConfigurationError("training dataset is empty")
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    ckpt = None
    if resume:
        ckpt = latest_checkpoint(run_dir) if resume is True else Path(resume)
    if ckpt is not None:
        state = load_checkpoint(ckpt)
        if state.train_config != train_config or state.model_config != model_config:
            raise ConfigurationError(f"checkpoint {ckpt} was written with a different configuration")
    else:
        state = init_state(train_config, model_config)

    src, drv = pairs_to_tensors(train_pairs)
    val = list(val_pairs or [])[:train_config.max_val_pairs]
    vsrc, vdrv = pairs_to_tensors(val) if val else (torch.zeros(0, 1, 1, 1), torch.zeros(0, 1, 1, 1))
    metrics_path = run_dir / "reports" / "metrics.csv"
    seed = train_config.seed or 0

    if state.epoch == 0 and not state.history:
        v0 = validation_perceptual(state.generator, vsrc, vdrv)
        state.history.append({"epoch": 0, "loss_D": None, "loss_G_adv": None, "loss_perc": None,
                              "loss_equiv": None, "lr_gen": state.lr_gen, "lr_disc": state.lr_disc,
                              "val_perceptual": v0})
        write_metrics(state.history, metrics_path)

    last = None
    while state.epoch < train_config.epochs:
        e = state.epoch
        t0 = time.time()
        order = torch.randperm(src.shape[0], generator=torch.Generator().manual_seed(derive_seed(seed, f"shuffle/{e}")))
        tgen = torch.Generator().manual_seed(derive_seed(seed, f"transforms/{e}"))
        lr_g, lr_d = state.lr_gen, state.lr_disc
        sums: dict[str, float] = {}
        for i in order.tolist():
            losses = train_step(state, src[i:i + 1], drv[i:i + 1], tgen)
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + v
        state.sched_gen.step()
        state.sched_disc.step()
        state.epoch = e + 1
        v = validation_perceptual(state.generator, vsrc, vdrv)
        if v < state.best_val:
            state.best_val = v
        row = {"epoch": state.epoch, **{k: s / src.shape[0] for k, s in sums.items()},
               "lr_gen": lr_g, "lr_disc": lr_d, "val_perceptual": v}
        state.history.append(row)
        last = save_checkpoint(state, checkpoint_path(run_dir, state.epoch))
        write_metrics(state.history, metrics_path)
        if train_config.keep_checkpoints:
            stale = state.epoch - train_config.keep_checkpoints
            if stale >= 1:
                checkpoint_path(run_dir, stale).unlink(missing_ok=True)
        if log:
            log(f"epoch {state.epoch}/{train_config.epochs} loss_D={row['loss_D']:.4f} "
                f"loss_perc={row['loss_perc']:.4f} loss_equiv={row['loss_equiv']:.4f} "
                f"val={v:.4f} ({time.time() - t0:.1f}s)")
        if stop_after is not None and state.epoch >= stop_after:
            break
    if last is None and latest_checkpoint(run_dir) is None:
        # a zero-epoch run still leaves a loadable (untrained) checkpoint
        last = save_checkpoint(state, checkpoint_path(run_dir, state.epoch))
    return TrainResult(state, run_dir, last or latest_checkpoint(run_dir), state.history)
