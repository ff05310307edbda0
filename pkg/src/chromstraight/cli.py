"""Command-line pipeline: gen-data, train, match, straighten, evaluate, ablate.

Every command accepts ``--config FILE`` plus ``--section.key value`` overrides
(``--blocks N`` is shorthand for ``--model.blocks N``).  Run directories hold
``config.yaml``, ``checkpoints/``, ``images/`` and ``reports/``.
"""
from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import fileio
from .config import RunConfig, load_config, parse_arm, save_config
from .errors import (ConfigurationError, DatasetError, DegenerateBendError, EvaluationError, MetricError,
                     NumericError, SelectionError)
from .evaluation import evaluate_suite
from .morphometry import measure
from .slmatch import CandidatePool, MatchResult, select_driving, select_random
from .synthdata import derive_seed, load_pairs, make_dataset
from .training import latest_checkpoint, load_generator, train_loop

ABLATION_COLUMNS = ("arm", "discriminator", "blocks", "FID", "LPIPS_A", "LPIPS_V", "DCA_small", "val_perceptual")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# pipeline pieces usable from Python as well


def straighten_directory(generator, sources: dict, pool: CandidatePool | None, out_dir, config: RunConfig,
                         paired: dict | None = None) -> list[dict]:
    """Straighten every source image and write ``{id}.png`` plus ``{id}.json``.

    ``config.match.driving_mode`` selects the driving image: ``sl`` runs the
    size-then-perceptual match over ``pool``, ``random`` draws uniformly from
    it, ``paired`` uses ``paired[id]``.
    """
    mc = config.match
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(derive_seed(config.seed, "straighten/random"))
    if mc.driving_mode in ("sl", "random") and (pool is None or len(pool) == 0):
        raise SelectionError("driving pool is empty")
    if mc.driving_mode == "paired" and paired is None:
        raise ConfigurationError("match.driving_mode 'paired' needs paired driving images")
    lookup = {e.image_id: e.image for e in pool.entries} if pool is not None else {}
    generator.eval()
    records = []
    for sid in sorted(sources):
        src = np.asarray(sources[sid], dtype=np.float32)
        if mc.driving_mode == "sl":
            match = select_driving(src, pool, sid, mc.tau, mc.window, mc.width_mode, eps=mc.eps)
            driving = lookup[match.chosen_id]
        elif mc.driving_mode == "random":
            match = select_random(pool, rng, sid)
            driving = lookup[match.chosen_id]
        else:
            if sid not in paired:
                raise SelectionError(f"no paired driving image for {sid}")
            match = MatchResult(sid, [sid], sid, [], [])
            driving = paired[sid]
        with torch.no_grad():
            out = generator(torch.from_numpy(src)[None, None],
                            torch.from_numpy(np.asarray(driving, dtype=np.float32))[None, None]).image
        fileio.write_png(out_dir / f"{sid}.png", out[0, 0].numpy())
        record = {"chosen_driving_id": match.chosen_id, "driving_mode": mc.driving_mode,
                  **{k: v for k, v in match.to_record().items() if k != "chosen_id"}}
        (out_dir / f"{sid}.json").write_text(json.dumps(record, sort_keys=True, indent=1) + "\n")
        records.append(record)
    return records


def load_pool(data_dir, config: RunConfig) -> CandidatePool:
    paths = fileio.list_images(Path(data_dir) / "pool")
    mc = config.match
    return CandidatePool.from_images({k: fileio.read_png(p) for k, p in paths.items()},
                                     mc.tau, mc.window, mc.width_mode)


def _read_dir(d) -> dict:
    return {k: fileio.read_png(p) for k, p in fileio.list_images(d).items()}


def train_run(config: RunConfig, data_dir, run_dir, resume: bool = True):
    """Train into ``run_dir``; an existing matching run is resumed (a finished
    run is left untouched)."""
    config = config.resolved()
    run_dir = Path(run_dir)
    echo = run_dir / "config.yaml"
    if echo.exists() and latest_checkpoint(run_dir) is not None:
        previous = load_config(echo)
        if previous != config:
            raise ConfigurationError(f"{run_dir} holds a run with a different configuration")
    save_config(config, echo)
    train_pairs = load_pairs(data_dir, "train")
    val_pairs = load_pairs(data_dir, "test")
    return train_loop(config.train, config.model, train_pairs, run_dir, val_pairs=val_pairs,
                      resume=resume and latest_checkpoint(run_dir) is not None, log=_log)


def ablate(config: RunConfig, data_dir, run_dir, arms=None, plots: bool | None = None) -> Path:
    """Train, straighten and evaluate one model per arm; write reports/ablation.csv."""
    config = config.resolved()
    run_dir = Path(run_dir)
    save_config(config, run_dir / "config.yaml")
    arms = list(arms or config.eval.ablation_arms)
    data_dir = Path(data_dir)
    sources = _read_dir(data_dir / "test" / "source")
    paired = _read_dir(data_dir / "test" / "driving")
    pool = load_pool(data_dir, config) if config.match.driving_mode != "paired" else None
    rows = []
    for arm in arms:
        arm_cfg = replace(config, model=replace(config.model, **parse_arm(arm))).validate()
        arm_dir = run_dir / "arms" / arm
        _log(f"[ablate] arm {arm}")
        result = train_run(arm_cfg, data_dir, arm_dir)
        gen = load_generator(result.checkpoint)
        images = arm_dir / "images"
        straighten_directory(gen, sources, pool, images, arm_cfg, paired)
        report = evaluate_suite(images, data_dir / "test" / "driving", arm_dir / "reports" / "report.csv",
                                arm_cfg.eval, seed=arm_cfg.eval.seed, with_dca=arm_cfg.eval.with_dca)
        s = report.summary
        rows.append({"arm": arm, "discriminator": arm_cfg.model.discriminator,
                     "blocks": arm_cfg.model.blocks if arm_cfg.model.discriminator == "vit" else "",
                     "FID": s["FID"], "LPIPS_A": s["LPIPS_A"], "LPIPS_V": s["LPIPS_V"],
                     "DCA_small": s["DCA_small"], "val_perceptual": result.history[-1]["val_perceptual"]})
    out = run_dir / "reports" / "ablation.csv"
    write_ablation(rows, out)
    if config.eval.plots if plots is None else plots:
        plot_ablation(rows, run_dir / "reports")
    return out


def write_ablation(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else f"{r[k]:.8g}" if isinstance(r[k], float) else r[k])
                        for k in ABLATION_COLUMNS})


def plot_ablation(rows: list[dict], out_dir) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = []
    for metric in ("FID", "LPIPS_A", "LPIPS_V", "DCA_small"):
        vals = [r[metric] if r[metric] is not None else np.nan for r in rows]
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar([r["arm"] for r in rows], vals, color="0.4")
        ax.set_ylabel(metric)
        fig.tight_layout()
        path = Path(out_dir) / f"ablation_{metric}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        out.append(path)
    return out


# ---------------------------------------------------------------------------
# argument handling


def _split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    out = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigurationError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigurationError(f"missing value for {tok}")
            value = extra[i + 1]
            i += 2
        out.append((key, value))
    return out


def _config_from_args(args, extra) -> RunConfig:
    overrides = _split_overrides(extra)
    if getattr(args, "blocks", None) is not None:
        overrides.append(("model.blocks", str(args.blocks)))
    if getattr(args, "driving_mode", None) is not None:
        overrides.append(("match.driving_mode", args.driving_mode))
    if getattr(args, "plots", False):
        overrides.append(("eval.plots", "true"))
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chromstraight", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, default=None, help="YAML config file")
        sp.add_argument("--blocks", type=int, default=None, help="alias for --model.blocks")
        return sp

    g = common(sub.add_parser("gen-data", help="write a synthetic dataset"))
    g.add_argument("--out", type=Path, required=True)

    t = common(sub.add_parser("train", help="adversarial training"))
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True, help="run directory")
    t.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints")

    m = common(sub.add_parser("match", help="driving selection for test sources"))
    m.add_argument("--data", type=Path, required=True)
    m.add_argument("--out", type=Path, required=True, help="JSON-lines output")
    m.add_argument("--sources", type=Path, default=None, help="defaults to DATA/test/source")
    m.add_argument("--measure-only", action="store_true", help="write size measurements only")

    s = common(sub.add_parser("straighten", help="straighten test sources with a trained model"))
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    ck = s.add_mutually_exclusive_group(required=True)
    ck.add_argument("--checkpoint", type=Path)
    ck.add_argument("--run", type=Path, help="use the newest checkpoint of this run directory")
    s.add_argument("--sources", type=Path, default=None, help="defaults to DATA/test/source")
    s.add_argument("--driving-mode", choices=("sl", "random", "paired"), default=None)

    e = common(sub.add_parser("evaluate", help="FID / perceptual / DCA report"))
    e.add_argument("--straightened", type=Path, required=True)
    e.add_argument("--reference", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--plots", action="store_true")

    a = common(sub.add_parser("ablate", help="discriminator ablation"))
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--out", type=Path, required=True, help="run directory")
    a.add_argument("--arms", nargs="+", default=None, help="e.g. patchgan vit4 vit12")
    a.add_argument("--plots", action="store_true")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    config = _config_from_args(args, extra).resolved()

    if args.command == "gen-data":
        save_config(config, args.out / "config.yaml")
        make_dataset(config.data, args.out)
        _log(f"dataset written to {args.out}")

    elif args.command == "train":
        result = train_run(config, args.data, args.out, resume=not args.no_resume)
        _log(f"final checkpoint {result.checkpoint}")

    elif args.command == "match":
        src_dir = args.sources or args.data / "test" / "source"
        sources = _read_dir(src_dir)
        mc = config.match
        if args.measure_only:
            records = [{"image_id": k, **measure(v, mc.tau, mc.window, mc.width_mode).to_record()}
                       for k, v in sorted(sources.items())]
        else:
            pool = load_pool(args.data, config)
            records = [select_driving(v, pool, k, mc.tau, mc.window, mc.width_mode, eps=mc.eps).to_record()
                       for k, v in sorted(sources.items())]
        fileio.write_jsonl(args.out, records)
        _log(f"{len(records)} records written to {args.out}")

    elif args.command == "straighten":
        ckpt = args.checkpoint or latest_checkpoint(args.run)
        if ckpt is None or not Path(ckpt).exists():
            raise FileNotFoundError(f"checkpoint not found: {ckpt or args.run}")
        gen = load_generator(ckpt)
        src_dir = args.sources or args.data / "test" / "source"
        sources = _read_dir(src_dir)
        pool = load_pool(args.data, config) if config.match.driving_mode != "paired" else None
        paired = _read_dir(args.data / "test" / "driving") if config.match.driving_mode == "paired" else None
        straighten_directory(gen, sources, pool, args.out, config, paired)
        labels = Path(src_dir) / "labels.json"
        if labels.exists():
            shutil.copyfile(labels, args.out / "labels.json")
        save_config(config, args.out / "config.yaml")
        _log(f"{len(sources)} images written to {args.out}")

    elif args.command == "evaluate":
        report = evaluate_suite(args.straightened, args.reference, args.out, config.eval,
                                seed=config.eval.seed, with_dca=config.eval.with_dca)
        if config.eval.plots:
            plot_ablation([{"arm": "run", **report.summary}], Path(args.out).parent)
        _log(f"report written to {args.out}")

    elif args.command == "ablate":
        out = ablate(config, args.data, args.out, args.arms)
        _log(f"ablation report {out}")
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, SelectionError, EvaluationError, MetricError, NumericError,
            DegenerateBendError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
