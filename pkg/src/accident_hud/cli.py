"""Command line entry point: cluster, fetch, train, explain, evaluate, simulate, monitor.

Every command reads one run config (``--config``, overridable with
``--set section.key=value``), writes its artifacts under ``workdir`` and
appends a run record to ``workdir/runs.jsonl``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from collections import defaultdict
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from . import apf, cam, hotspots, hud, imagery, metrics, monitor
from ._io import atomic_write_bytes, atomic_write_text, fmt, read_csv_dicts, write_csv
from .abm import AbmConfig
from .config import RunConfig, load_config
from .model import HOTSPOT, build_classifier, classify, load_checkpoint, save_checkpoint, to_batch
from .training import TrainConfig, seed_everything, train, write_training_log

log = logging.getLogger("accident_hud")

PRODUCERS = {
    "hotspots.csv": "cluster",
    "noise.csv": "cluster",
    "manifest.json": "fetch",
    "model.pt": "train",
    "explain_records.csv": "explain",
}


class MissingArtifact(RuntimeError):
    def __init__(self, path: Path):
        self.path = Path(path)
        self.producer = PRODUCERS.get(self.path.name)
        hint = f"; run `{self.producer}` first" if self.producer else ""
        super().__init__(f"missing {self.path}{hint}")


def _need(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(path)
    return path


def _workdir(cfg: RunConfig) -> Path:
    wd = Path(cfg.workdir)
    wd.mkdir(parents=True, exist_ok=True)
    return wd


def _record(cfg: RunConfig, command: str, started: float, outputs: list) -> None:
    rec = {
        "command": command,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "started": started,
        "elapsed_s": round(time.time() - started, 3),
        "outputs": [str(o) for o in outputs],
    }
    with open(_workdir(cfg) / "runs.jsonl", "a") as fh:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


# -- commands --------------------------------------------------------------

def cmd_cluster(cfg: RunConfig) -> list[Path]:
    started, wd, c = time.time(), _workdir(cfg), cfg.cluster
    coords = hotspots.load_records_csv(_need(c.input_csv))
    labeling = hotspots.dbscan(coords, hotspots.DbscanParams(c.epsilon, c.min_points))
    spots = hotspots.hotspots_from_labeling(coords, labeling)
    outs = [wd / "hotspots.csv", wd / "hotspots.geojson", wd / "noise.csv"]
    hotspots.write_hotspots_csv(outs[0], spots)
    hotspots.write_hotspots_geojson(outs[1], spots)
    noise = coords[labeling.labels == hotspots.NOISE]
    write_csv(outs[2], ["lat", "lon"], [[fmt(a), fmt(b)] for a, b in noise])
    summary = {"records": len(coords), "clusters": labeling.n_clusters, "noise": labeling.n_noise}
    if c.k_distance_k:
        curve = hotspots.k_distance_curve(coords, c.k_distance_k)
        summary["knee_index"] = curve.knee_index
        summary["knee_epsilon"] = curve.knee_distance
        outs.append(wd / "k_distance.csv")
        write_csv(outs[-1], ["rank", "distance"], [[i, fmt(d)] for i, d in enumerate(curve.distances)])
    atomic_write_text(wd / "cluster_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _record(cfg, "cluster", started, outs)
    log.info("cluster: %s", summary)
    return outs


def _client(cfg: RunConfig):
    f = cfg.fetch
    if f.mock_dir:
        return imagery.MockClient(f.mock_dir)
    key = os.environ.get(f.api_key_env)
    if not key:
        raise RuntimeError(f"no API key: set ${f.api_key_env} or fetch.mock_dir")
    return imagery.StreetViewClient(key)


def cmd_fetch(cfg: RunConfig, client=None) -> list[Path]:
    started, wd, f = time.time(), _workdir(cfg), cfg.fetch
    spots = hotspots.read_hotspots_csv(_need(wd / "hotspots.csv"))
    noise = [(float(r["lat"]), float(r["lon"])) for r in read_csv_dicts(_need(wd / "noise.csv"))]
    rng = np.random.default_rng(cfg.seed)
    n_neg = min(len(noise), len(spots))
    picks = sorted(rng.choice(len(noise), size=n_neg, replace=False).tolist()) if n_neg else []
    locations = [(h.lat, h.lon, "hotspot") for h in spots] + [(*noise[i], "non_hotspot") for i in picks]
    reqs = imagery.plan_requests(locations, fov=f.fov, base_heading=f.base_heading)
    cache = imagery.ImageCache(wd / "cache")
    results = imagery.fetch_all(reqs, client or _client(cfg), cache, workers=f.workers, rate_per_s=f.rate_per_s)
    images, seen, skipped = [], set(), 0
    for res in results:
        if isinstance(res, imagery.Skipped):
            skipped += 1
            continue
        key = cache.key(res.pano_id, res.request)
        if key in seen:
            continue
        seen.add(key)
        ext = ".png" if res.data[:8] == b"\x89PNG\r\n\x1a\n" else ".jpg"
        path = wd / "images" / f"{res.label}_{key[:16]}{ext}"
        if not path.exists():
            atomic_write_bytes(path, res.data)
        images.append((str(path), res.label))
    manifest = imagery.build_manifest(images, tuple(f.split_fracs), cfg.seed)
    manifest.save(wd / "manifest.json")
    log.info("fetch: %d images, %d skipped", len(images), skipped)
    outs = [wd / "manifest.json"]
    _record(cfg, "fetch", started, outs)
    return outs


def cmd_train(cfg: RunConfig) -> list[Path]:
    started, wd, t = time.time(), _workdir(cfg), cfg.train
    manifest = imagery.DatasetManifest.load(_need(wd / "manifest.json"))
    seed_everything(cfg.seed)
    model = build_classifier(t.backbone, AbmConfig(t.variant, t.compression_ratio), t.pretrained)
    tc = TrainConfig(t.epochs, t.batch_size, t.learning_rate, t.momentum, t.mode, cfg.seed)
    result = train(manifest, tc, model)
    outs = [wd / "model.pt", wd / "train_log.csv", wd / "test_metrics.json"]
    save_checkpoint(outs[0], model, cfg.seed)
    write_training_log(outs[1], result.history)
    test = result.test.__dict__ if result.test else None
    atomic_write_text(outs[2], json.dumps(test, indent=2, sort_keys=True) + "\n")
    _record(cfg, "train", started, outs)
    return outs


def _confidence(model, raster, mean, std) -> float:
    x = imagery.preprocess(np.asarray(raster, dtype=np.float32), mean, std)
    return classify(x, model).p_hotspot


def cmd_explain(cfg: RunConfig) -> list[Path]:
    started, wd, e = time.time(), _workdir(cfg), cfg.explain
    model, meta = load_checkpoint(_need(wd / "model.pt"))
    manifest = imagery.DatasetManifest.load(_need(wd / "manifest.json"))
    entries = sorted(manifest.split(e.split), key=lambda en: en.path)
    if e.max_images is not None:
        entries = entries[: e.max_images]
    mean, std = meta["mean"], meta["std"]
    model_name = f"{meta['backbone']}-abm{meta['abm_variant']}"
    out_dir = wd / "explain"
    rows = []
    rng = np.random.default_rng(cfg.seed)
    for entry in entries:
        raw = imagery.load_image(entry.path)
        stem = Path(entry.path).stem
        x = to_batch(imagery.preprocess(raw, mean, std))
        y = classify(x, model).p_hotspot
        for method in e.methods:
            heat = cam.explain(method, model, x, HOTSPOT, e.layer, output_size=raw.shape[:2])
            cam.save_heatmap(out_dir / f"{stem}_{method}_heatmap.png", heat)
            feats = apf.run_pipeline(heat.values, raw, e.tau)
            apf.save_features(out_dir / f"{stem}_{method}", feats, raw)

            def conf(kind, t=None, use_mask=True):
                strat = metrics.MaskStrategy(kind, t)
                img = metrics.masked_image(raw, strat, mask=feats.mask if use_mask else None,
                                           heatmap=heat.values, noise_std=e.road_noise, rng=rng)
                return _confidence(model, img, mean, std)

            base = [model_name, stem, method]
            rows.append(base + ["Y", "", fmt(y)])
            rows.append(base + ["area_fraction", "", fmt(feats.area_fraction)])
            rows.append(base + ["black_patch", "", fmt(conf("black_patch"))])
            rows.append(base + ["explain_only", "", fmt(conf("explain_only"))])
            rows.append(base + ["inverse_cam", "", fmt(conf("inverse_cam"))])
            for t in e.inverse_thresholds:
                rows.append(base + ["inverse_cam", f"{t:g}", fmt(conf("inverse_cam", t, False))])
            for t in e.road_thresholds:
                rows.append(base + ["road_imputation", f"{t:g}", fmt(conf("road_imputation", t, False))])
    outs = [wd / "explain_records.csv"]
    write_csv(outs[0], ["model", "image", "cam_method", "quantity", "T", "value"], rows)
    _record(cfg, "explain", started, outs)
    return outs


def cmd_evaluate(cfg: RunConfig) -> list[Path]:
    started, wd, ev = time.time(), _workdir(cfg), cfg.evaluate
    recs = read_csv_dicts(_need(wd / "explain_records.csv"))
    table: dict = defaultdict(dict)
    for r in recs:
        key = (r["model"], r["cam_method"])
        table[key].setdefault((r["quantity"], r["T"]), {})[r["image"]] = float(r["value"])
    rows = []
    for (model_name, method), q in sorted(table.items()):
        images = sorted(q[("Y", "")])
        Y = np.array([q[("Y", "")][i] for i in images])

        def vals(name, t=""):
            return np.array([q[(name, t)][i] for i in images])

        n = len(images)
        O, E = vals("black_patch"), vals("explain_only")
        rows += [
            (model_name, method, "original", None, "mean_confidence", float(Y.mean()), n),
            (model_name, method, "black_patch", None, "mean_confidence", float(O.mean()), n),
            (model_name, method, "black_patch", None, "conf_change_percent", metrics.conf_change_percent(Y, O), n),
            (model_name, method, "explain_only", None, "cam_conf_change", metrics.cam_conf_change(Y, E), n),
            (model_name, method, "explain_only", None, "increase_in_conf", metrics.increase_in_conf(Y, E), n),
            (model_name, method, "pipeline", None, "area_fraction", float(vals("area_fraction").mean()), n),
            (model_name, method, "inverse_cam", None, "conf_change", metrics.conf_change(Y, vals("inverse_cam")), n),
        ]
        for (name, t) in sorted(k for k in q if k[1] and k[0] in ("inverse_cam", "road_imputation")):
            rows.append((model_name, method, name, float(t), "conf_change", metrics.conf_change(Y, vals(name, t)), n))
        avg_keys = [f"{t:g}" for t in ev.road_average]
        if all(("road_imputation", t) in q for t in avg_keys):
            per = {t: (Y, vals("road_imputation", t)) for t in avg_keys}
            rows.append((model_name, method, "road_imputation_avg", None, "conf_change",
                         metrics.averaged_conf_change(per), n))
        if ev.saliency_dir:
            sal, masks = [], []
            for img in images:
                p = Path(ev.saliency_dir) / f"{img}.png"
                if p.exists():
                    sal.append(np.asarray(Image.open(p).convert("L")))
                    m = Image.open(wd / "explain" / f"{img}_{method}_mask.png")
                    masks.append(np.asarray(m) > 0)
            if sal:
                rows.append((model_name, method, "pipeline", None, "visual_saliency",
                             metrics.visual_saliency(sal, masks), len(sal)))
    outs = [wd / "metrics.csv"]
    metrics.write_report(outs[0], rows)
    _record(cfg, "evaluate", started, outs)
    return outs


def cmd_simulate(cfg: RunConfig) -> list[Path]:
    started, wd = time.time(), _workdir(cfg)
    spec = yaml.safe_load(_need(cfg.simulate.scenario_file).read_text())
    scenario, sim = hud.load_simulation(spec)
    steps = hud.simulate(scenario, sim)
    outs = [wd / "trajectory.csv", wd / "trajectory_plot.csv"]
    hud.write_trajectory(outs[0], steps)
    hud.write_plot_data(outs[1], steps)
    _record(cfg, "simulate", started, outs)
    return outs


def cmd_monitor(cfg: RunConfig) -> list[Path]:
    started, wd, m = time.time(), _workdir(cfg), cfg.monitor
    trace = monitor.read_trace(_need(m.trace_csv))
    spots = hotspots.read_hotspots_csv(_need(m.hotspots_csv or wd / "hotspots.csv"))
    events = monitor.monitor(trace, spots, m.radius_m, m.hysteresis_m)
    outs = [wd / "mode_events.csv"]
    monitor.write_events(outs[0], events)
    _record(cfg, "monitor", started, outs)
    return outs


COMMANDS = {
    "cluster": cmd_cluster,
    "fetch": cmd_fetch,
    "train": cmd_train,
    "explain": cmd_explain,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "monitor": cmd_monitor,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="accident-hud", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("-c", "--config", help="YAML or JSON run config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--workdir", help="shorthand for --set workdir=...")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=...")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    overrides = list(args.overrides)
    if args.workdir:
        overrides.append(f"workdir={args.workdir}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        torch.use_deterministic_algorithms(True)
        cfg = load_config(args.config, overrides)
        outs = COMMANDS[args.command](cfg)
    except MissingArtifact as exc:
        err = {"error": "missing_artifact", "message": str(exc), "path": str(exc.path), "run_first": exc.producer}
        print(json.dumps(err), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    for o in outs:
        print(o)
    return 0


if __name__ == "__main__":
    sys.exit(main())
