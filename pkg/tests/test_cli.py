import json
from pathlib import Path

import pytest
import yaml

from accident_hud import cli
from accident_hud.config import RunConfig, from_dict, load_config, save_config
from accident_hud.synthetic import fixture_workspace


# -- config ----------------------------------------------------------------

def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ValueError, match="colour"):
        from_dict({"colour": 1})
    with pytest.raises(ValueError, match="train"):
        from_dict({"train": {"epochz": 3}})


def test_overrides_and_roundtrip(tmp_path):
    cfg = load_config(None, ["train.epochs=7", "explain.methods=[gradcam]", "seed=4"])
    assert cfg.train.epochs == 7 and cfg.explain.methods == ["gradcam"] and cfg.seed == 4
    save_config(tmp_path / "c.yaml", cfg)
    again = load_config(tmp_path / "c.yaml")
    assert again == cfg and again.digest() == cfg.digest()
    assert RunConfig().digest() != cfg.digest()
    with pytest.raises(ValueError):
        load_config(None, ["train.epochs"])


# -- commands --------------------------------------------------------------

def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_missing_artifact_names_producer(tmp_path, capsys):
    code, _, err = run(["train", "--workdir", str(tmp_path / "w")], capsys)
    assert code == 2
    info = json.loads(err.strip().splitlines()[-1])
    assert info["error"] == "missing_artifact" and info["run_first"] == "fetch"
    code, _, err = run(["fetch", "--workdir", str(tmp_path / "w")], capsys)
    assert json.loads(err)["run_first"] == "cluster"


def test_generic_error_is_json(tmp_path, capsys):
    code, _, err = run(["cluster", "--set", "cluster.bogus=1"], capsys)
    assert code == 1
    assert json.loads(err)["error"] == "ValueError"


def test_simulate_and_monitor(tmp_path, capsys):
    scen = tmp_path / "scenario.yaml"
    scen.write_text(yaml.safe_dump({
        "scenario": "fixed_head_moving_poi",
        "geometry": {"width": 1.6, "height": 0.8, "tilt": 1.0, "mount": [-0.8, 0.0, 0.9]},
        "foreheads": [[0.0, -0.5, 0.0]],
        "bearings": {"start": [-0.5, 0.1], "stop": [0.5, 0.1], "steps": 11},
    }))
    wd = tmp_path / "w"
    code, out, _ = run(["simulate", "--workdir", str(wd), "--set", f"simulate.scenario_file={scen}"], capsys)
    assert code == 0
    assert len((wd / "trajectory.csv").read_text().splitlines()) == 12

    (wd / "hotspots.csv").write_text("id,lat,lon,count\n0,40.7,-74.0,60\n")
    (tmp_path / "trace.csv").write_text("timestamp,lat,lon\n0,40.8,-74.0\n1,40.7,-74.0\n2,40.6,-74.0\n")
    code, _, _ = run(["monitor", "--workdir", str(wd), "--set", f"monitor.trace_csv={tmp_path / 'trace.csv'}"], capsys)
    assert code == 0
    rows = (wd / "mode_events.csv").read_text().splitlines()[1:]
    assert [r.split(",")[3] for r in rows] == ["ap_detection", "cruise"]
    records = [json.loads(l) for l in (wd / "runs.jsonl").read_text().splitlines()]
    assert [r["command"] for r in records] == ["simulate", "monitor"]
    assert all(len(r["config_hash"]) == 64 for r in records)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("fx")
    cfg = fixture_workspace(root, seed=1, epochs=1, n_hotspots=3, n_scattered=20)
    data = yaml.safe_load(cfg.read_text())
    data["explain"].update({"max_images": 1, "road_thresholds": [20], "inverse_thresholds": [25]})
    cfg.write_text(yaml.safe_dump(data))
    for command in ("cluster", "fetch", "train", "explain", "evaluate"):
        assert cli.main([command, "-c", str(cfg)]) == 0, command
    return root, cfg


def test_cluster_outputs(small_run):
    root, _ = small_run
    wd = root / "run"
    summary = json.loads((wd / "cluster_summary.json").read_text())
    assert summary["clusters"] == 3
    gj = json.loads((wd / "hotspots.geojson").read_text())
    assert len(gj["features"]) == 3


def test_cluster_rerun_is_byte_identical(small_run, tmp_path):
    root, cfg = small_run
    before = (root / "run" / "hotspots.csv").read_bytes()
    assert cli.main(["cluster", "-c", str(cfg), "--workdir", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "hotspots.csv").read_bytes() == before


def test_explain_fan_out(small_run):
    root, _ = small_run
    ex = root / "run" / "explain"
    heatmaps = sorted(ex.glob("*_heatmap.png"))
    masks = sorted(ex.glob("*_mask.png"))
    assert len(heatmaps) == 3 and len(masks) == 3
    for method in ("gradcam", "gradcampp", "scorecam"):
        assert len(list(ex.glob(f"*_{method}_contours.json"))) == 1
    lines = (root / "run" / "explain_records.csv").read_text().splitlines()
    # per image and method: Y, area, black, explain-only, inverse, inverse@25, road@20
    assert len(lines) - 1 == 3 * 7
    metrics = (root / "run" / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "model,cam_method,strategy,T,metric,value,n_images"
    assert {l.split(",")[1] for l in metrics[1:]} == {"gradcam", "gradcampp", "scorecam"}


def test_manifest_and_images(small_run):
    root, _ = small_run
    entries = json.loads((root / "run" / "manifest.json").read_text())
    labels = [e["label"] for e in entries]
    assert labels.count("hotspot") == labels.count("non_hotspot") == 6
    assert all(Path(e["path"]).exists() for e in entries)
