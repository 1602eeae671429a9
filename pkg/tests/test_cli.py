import json

import numpy as np
import pytest

from tbdetect import cli, roiext
from tbdetect.imagecore import DatasetManifest, load_entry, load_manifest, load_mask, save_mask, write_manifest
from tbdetect.pipeline import ConfigError, PipelineConfig, config_from_dict, load_config

TINY = {"segmodel": {"input_size": 64, "depth": 2, "base_filters": 4},
        "train": {"max_epochs": 2, "patience": 1, "batch_size": 8},
        "classifier": {"forest_trees": 10, "boost_rounds": 10}}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A trained tiny pipeline over a 5-image synthetic corpus."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps({**TINY, "manifest": str(root / "corpus" / "manifest.tsv"),
                                    "output_dir": str(root / "out")}))
    base = ["--config", str(cfg_path), "--seed", "3"]
    assert cli.main(["synth", *base, "--n-images", "5", "--width", "256", "--height", "256",
                     "--out", str(root / "corpus")]) == 0
    assert cli.main(["train-seg", *base]) == 0
    assert cli.main(["train-clf", *base]) == 0
    return root, base


def test_full_flow_artifacts(run, capsys):
    root, base = run
    out = root / "out"
    assert (out / "segmenter.pt").is_file() and (out / "ensemble.joblib").is_file()
    log_lines = (out / "train_log.jsonl").read_text().splitlines()
    assert 1 <= len(log_lines) <= 2
    training = json.loads((out / "training_report.json").read_text())["training"]
    assert [r["classifier"] for r in training] == ["svm_rbf", "random_forest", "gradient_boosted_trees",
                                                  "ensemble"]


def test_evaluate_rows_and_byte_stability(run):
    root, base = run
    args = ["evaluate", *base, "--segmenter", "unet", "--segmenter", "otsu:gray"]
    assert cli.main(args) == 0
    first = (root / "out" / "report.json").read_bytes()
    report = json.loads(first)
    assert [r["method"] for r in report["segmentation"]] == ["unet", "otsu:gray"]
    assert [r["method"] for r in report["classification"]][-1] == "ensemble"
    text = (root / "out" / "report.txt").read_text()
    assert "otsu:gray" in text and "precision" in text
    assert cli.main(args) == 0
    assert (root / "out" / "report.json").read_bytes() == first


def test_detect_matches_roi_count(run):
    root, base = run
    assert cli.main(["infer-seg", *base, "--segmenter", "otsu:rg"]) == 0
    masks = root / "out" / "masks" / "otsu_rg"
    assert cli.main(["detect", *base, "--masks-dir", str(masks)]) == 0
    records = [json.loads(line) for line in (root / "out" / "detections.jsonl").read_text().splitlines()]
    manifest = load_manifest(root / "corpus" / "manifest.tsv")
    expected = 0
    for entry in manifest.split("test"):
        image, _ = load_entry(entry)
        expected += len(roiext.extract_rois(image, load_mask(masks / f"{image.id}.png", image.dims, image.id)))
    assert expected > 0 and len(records) == expected
    for r in records:
        assert set(r) == {"image_id", "component_id", "bbox", "area", "label", "votes"}
        assert set(r["votes"]) == {"svm_rbf", "random_forest", "gradient_boosted_trees"}
    assert (root / "out" / "overlays" / "img_0004.png").is_file()


def test_detect_empty_mask(run, tmp_path):
    root, base = run
    manifest = load_manifest(root / "corpus" / "manifest.tsv")
    for entry in manifest.split("test"):
        image, _ = load_entry(entry)
        save_mask(np.zeros(image.dims, np.uint8), tmp_path / "masks" / f"{image.id}.png")
    out = tmp_path / "det"
    assert cli.main(["detect", *base, "--masks-dir", str(tmp_path / "masks"), "--output-dir", str(out),
                     "--clf-checkpoint", str(root / "out" / "ensemble.joblib")]) == 0
    assert (out / "detections.jsonl").read_text() == ""


def test_tile_and_extract(run):
    root, base = run
    assert cli.main(["tile", *base, "--split", "test"]) == 0
    assert len(list((root / "out" / "patches" / "images").glob("*.png"))) == 16
    assert len(list((root / "out" / "patches" / "masks").glob("*.png"))) == 16
    assert cli.main(["extract-rois", *base]) == 0
    for js in (root / "out" / "rois").glob("*.json"):
        assert js.with_suffix(".png").is_file()


def test_exit_codes(run, tmp_path):
    root, base = run
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"segmodel": {"depth": 2, "widht": 3}}))
    assert cli.main(["evaluate", "--config", str(bad)]) == cli.EXIT_CONFIG
    bad.write_text("{not json")
    assert cli.main(["evaluate", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["evaluate", *base, "--segmenter", "otsu:blue"]) == cli.EXIT_CONFIG
    assert cli.main(["evaluate", "--manifest", str(root / "corpus" / "manifest.tsv")]) == cli.EXIT_MISSING
    assert cli.main(["evaluate", "--manifest", str(tmp_path / "none.tsv")]) == cli.EXIT_MISSING

    manifest = load_manifest(root / "corpus" / "manifest.tsv")
    train_only = tmp_path / "train_only.tsv"
    write_manifest(DatasetManifest(manifest.split("train"), "train_only"), train_only)
    assert cli.main(["evaluate", *base, "--manifest", str(train_only)]) == cli.EXIT_DATA


def test_flags_override_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 3, "train": {"max_epochs": 5, "patience": 2}}))
    parser = cli.build_parser()
    cfg = cli.build_config(parser.parse_args(["train-seg", "--config", str(path), "--seed", "9",
                                              "--patience", "1"]))
    assert cfg.seed == 9 and cfg.train.max_epochs == 5 and cfg.train.patience == 1
    assert cfg.train_config.seed == 9


def test_config_round_trip_and_rejection(tmp_path):
    cfg = config_from_dict({"segmenters": ["unet", "otsu:rg"], "roi": {"min_area": 10}})
    assert cfg.segmenters == ("unet", "otsu:rg") and cfg.roi.min_area == 10 and cfg.roi.max_area == 5000
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert load_config(path) == cfg
    assert PipelineConfig() == config_from_dict({})
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_dict({"colour": 1})
    with pytest.raises(ConfigError):
        config_from_dict({"train": {"max_epochs": 2, "patience": 5}})
    with pytest.raises(ConfigError):
        config_from_dict({"threshold": 1.5})
