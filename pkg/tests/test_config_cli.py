import csv
import json

import pytest
import yaml

from chromstraight.cli import main
from chromstraight.config import RunConfig, dump_config, load_config, save_config
from chromstraight.errors import ConfigurationError
from chromstraight.training import latest_checkpoint

TINY = {
    "seed": 11,
    "data": {"n_train": 3, "n_test": 5, "n_pool": 6, "num_types": 3, "image_size": 96},
    "model": {"regions": 3, "heatmap_size": 32, "image_size": 96, "blocks": 1, "embed_dim": 24, "heads": 3},
    "train": {"epochs": 1, "milestones": [], "max_val_pairs": 2},
    "eval": {"k_folds": 2, "with_dca": False, "feature_epochs": 2, "dca_max_epochs": 2},
}


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("")
    assert load_config(p) == RunConfig()


def test_flag_overrides_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("model:\n  blocks: 4\n")
    assert load_config(p).model.blocks == 4
    assert load_config(p, [("model.blocks", "12")]).model.blocks == 12


def test_decreasing_milestones_rejected(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("train:\n  milestones: [45, 30]\n")
    with pytest.raises(ConfigurationError, match="milestones"):
        load_config(p)


def test_unknown_key_names_the_key(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("train:\n  foo: 1\n")
    with pytest.raises(ConfigurationError, match="train.foo"):
        load_config(p)


def test_wrong_type_rejected():
    with pytest.raises(ConfigurationError, match="train.epochs"):
        load_config(None, [("train.epochs", "many")])


def test_yaml_round_trip(tmp_path):
    cfg = load_config(None, [("model.blocks", "8"), ("train.milestones", "[10, 20]"), ("seed", "3")])
    path = save_config(cfg, tmp_path / "c.yaml")
    again = load_config(path)
    assert again == cfg
    assert dump_config(again) == path.read_text()


def test_resolved_fills_section_seeds():
    cfg = RunConfig(seed=4).resolved()
    assert cfg.data.seed is not None and cfg.train.seed is not None and cfg.eval.seed is not None
    assert cfg.data.seed != cfg.train.seed
    assert RunConfig(seed=4).resolved() == cfg


def test_cli_unknown_key_exit_code(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--data.bogus", "1"]) == 2


def test_cli_bad_milestones_exit_code(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("train:\n  milestones: [45, 30]\n")
    assert main(["gen-data", "--config", str(p), "--out", str(tmp_path / "d")]) == 2


# ---------------------------------------------------------------------------
# end-to-end through the command line


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    data, run = root / "data", root / "run"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run)]) == 0
    return root, cfg, data, run


def test_train_writes_checkpoint_and_metrics(tiny_run):
    _, _, _, run = tiny_run
    assert latest_checkpoint(run).name == "ckpt_epoch_1.pt"
    rows = list(csv.DictReader(open(run / "reports" / "metrics.csv")))
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert load_config(run / "config.yaml").model.blocks == 1


def test_train_rejects_changed_config(tiny_run):
    root, cfg, data, run = tiny_run
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run), "--blocks", "2"]) == 2


def test_match_writes_records(tiny_run):
    root, cfg, data, _ = tiny_run
    out = root / "match.jsonl"
    assert main(["match", "--config", str(cfg), "--data", str(data), "--out", str(out)]) == 0
    records = [json.loads(x) for x in out.read_text().splitlines()]
    assert len(records) == 5
    assert all(len(r["top3_ids"]) == 3 and r["chosen_id"] in r["top3_ids"] for r in records)


def test_straighten_outputs_and_rerun_identical(tiny_run):
    root, cfg, data, run = tiny_run
    outs = []
    for name in ("s1", "s2"):
        out = root / name
        assert main(["straighten", "--config", str(cfg), "--data", str(data), "--run", str(run),
                     "--out", str(out)]) == 0
        outs.append(out)
    pngs = sorted(p.name for p in outs[0].glob("*.png"))
    assert len(pngs) == 5
    for p in pngs:
        side = json.loads((outs[0] / p.replace(".png", ".json")).read_text())
        assert {"chosen_driving_id", "top3_ids", "phase1_scores", "phase2_scores"} <= set(side)
        assert side["chosen_driving_id"] in side["top3_ids"]
    for f in sorted(outs[0].iterdir()):
        assert f.read_bytes() == (outs[1] / f.name).read_bytes()


def test_straighten_random_mode(tiny_run):
    root, cfg, data, run = tiny_run
    out = root / "random"
    assert main(["straighten", "--config", str(cfg), "--data", str(data), "--run", str(run),
                 "--out", str(out), "--driving-mode", "random"]) == 0
    side = json.loads(sorted(p for p in out.glob("*.json") if p.name != "labels.json")[0].read_text())
    assert side["driving_mode"] == "random"
    assert len(list(out.glob("*.png"))) == 5


def test_straighten_missing_checkpoint(tiny_run):
    root, cfg, data, _ = tiny_run
    assert main(["straighten", "--config", str(cfg), "--data", str(data),
                 "--checkpoint", str(root / "nope.pt"), "--out", str(root / "x")]) == 1


def test_evaluate_command(tiny_run):
    root, cfg, data, _ = tiny_run
    out = root / "eval" / "report.csv"
    assert main(["evaluate", "--config", str(cfg), "--straightened", str(root / "s1"),
                 "--reference", str(data / "test" / "driving"), "--out", str(out)]) == 0
    lines = [ln for ln in out.read_text().splitlines() if not ln.startswith("#")]
    assert lines[0].split(",")[2:6] == ["FID", "LPIPS_A", "LPIPS_V", "DCA_small"]
    assert len(lines) == 1 + 1 + 5


def test_ablate_single_arm(tiny_run):
    root, cfg, data, _ = tiny_run
    out = root / "abl"
    assert main(["ablate", "--config", str(cfg), "--data", str(data), "--out", str(out),
                 "--arms", "vit1", "--plots"]) == 0
    rows = list(csv.DictReader(open(out / "reports" / "ablation.csv")))
    assert len(rows) == 1 and rows[0]["arm"] == "vit1" and rows[0]["blocks"] == "1"
    assert (out / "reports" / "ablation_LPIPS_A.png").exists()
