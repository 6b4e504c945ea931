"""Command-line entry point: ``srcn <verb> [--config PATH] [--seed N] ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .data import write_incidents_json, write_records_csv
from .grid_codec import network_to_dict, write_pgm
from .model import load_checkpoint, predict, save_checkpoint, train


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="TOML or JSON experiment config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")


def _horizon_set(cfg: dict, name: str | None) -> tuple[str, list[int]]:
    sets = cfg["experiment"]["horizons"]
    if name is None:
        name = next(iter(sets))
    if name not in sets:
        raise ex.ExperimentError("config", KeyError(f"no horizon set {name!r}"), ex.EXIT_CONFIG)
    return name, list(sets[name])


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def cmd_rasterize(args, cfg: dict) -> None:
    ds = ex.load_dataset(cfg)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    net = ds.net
    doc = network_to_dict(net)
    doc["link_cells"] = {lid: [list(c) for c in net.link_cells[lid]] for lid in net.link_ids}
    doc["config"] = cfg
    _write_json(out / "rasterized.json", doc)
    coverage = np.zeros(net.spec.shape)
    for cells in net.link_cells.values():
        for r, c in cells:
            coverage[r, c] = 1.0
    write_pgm(coverage, out / "coverage.pgm")
    v_max = cfg["data"]["v_max"] or float(np.max(ds.series.values))
    frames, _ = net.encode_many(ds.series.values[0, :args.frames], v_max)
    for t, frame in enumerate(frames):
        write_pgm(frame, out / f"frame_{t:04d}.pgm")
    print(f"{net.n_links} links on a {net.spec.height}x{net.spec.width} grid; wrote {len(frames)} frames to {out}")


def cmd_synth(args, cfg: dict) -> None:
    if cfg["data"]["source"] != "synthetic":
        raise ex.ExperimentError("config", ValueError("synth needs data.source = 'synthetic'"), ex.EXIT_CONFIG)
    ds = ex.load_dataset(cfg)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_records_csv(ds.records, out / "records.csv")
    write_incidents_json(ds.incidents, out / "incidents.json")
    doc = network_to_dict(ds.net)
    doc["adjacency"] = {k: sorted(v) for k, v in sorted(ds.adjacency.items())}
    _write_json(out / "network.json", doc)
    print(f"{len(ds.records)} records, {len(ds.incidents)} incident impacts -> {out}")


def cmd_train(args, cfg: dict) -> None:
    ds = ex.load_dataset(cfg)
    name, offsets = _horizon_set(cfg, args.horizons)
    prep = ex.prepare_windows(cfg, ds, name, offsets)
    out: Path = args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    with ex._stage("train"):
        mcfg = ex.model_config(cfg, ds.net, offsets)
        log = out.with_suffix(".log.jsonl")
        result = train(mcfg, prep.train, int(cfg["seed"]), log_path=log, verbose=args.verbose)
        save_checkpoint(result.params, out, meta={"v_max": prep.v_max, "horizon_set": name,
                                                  "config_fingerprint": ex.fingerprint(cfg), "config": cfg})
    print(f"best epoch {result.best_epoch}, validation MSE {result.best_val_mse:.6g}; checkpoint -> {out}")


def _load_for_eval(args, cfg: dict):
    with ex._stage("load checkpoint"):
        params, mcfg, meta = load_checkpoint(args.checkpoint)
    ds = ex.load_dataset(cfg)
    prep = ex.prepare_windows(cfg, ds, meta.get("horizon_set", "checkpoint"), mcfg.offsets)
    if "v_max" in meta:
        prep.v_max = float(meta["v_max"])
    return params, ds, prep


def cmd_predict(args, cfg: dict) -> None:
    params, ds, prep = _load_for_eval(args, cfg)
    with ex._stage("predict"):
        pred = predict(params, prep.test) * prep.v_max
    out: Path = args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        f.write(f"# config_fingerprint={ex.fingerprint(cfg)}\n")
        f.write("day,target_bin,offset_bins,link_id,speed_kmh\n")
        for w, p in zip(prep.test, pred):
            for k, off in enumerate(w.offsets):
                for j, lid in enumerate(ds.net.link_ids):
                    f.write(f"{w.day},{w.target_bins[k]},{off},{lid},{p[k, j]:.6f}\n")
    print(f"{len(prep.test)} windows x {len(prep.offsets)} offsets -> {out}")


def cmd_evaluate(args, cfg: dict) -> None:
    params, ds, prep = _load_for_eval(args, cfg)
    with ex._stage("evaluate"):
        body = ex.evaluate(params, prep.test, ds, prep.v_max, prep.train_days, float(cfg["experiment"]["mape_epsilon"]))
    body.pop("_arrays")
    report = {"config_fingerprint": ex.fingerprint(cfg), **body, "runtime_seconds": None, "config": cfg}
    _write_json(args.out, report)
    for h in report["horizons"]:
        print(f"offset {h['offset_bins']:3d}: MAPE {h['mape']:.4f} RMSE {h['rmse']:.3f}  "
              f"(persistence MAPE {h['baseline']['persistence']['mape']:.4f})")


def cmd_run(args, cfg: dict) -> None:
    reports = ex.run_experiment(cfg, args.out, timing=args.timing, verbose=args.verbose)
    for name, rep in reports.items():
        for h in rep["horizons"]:
            print(f"{name} offset {h['offset_bins']:3d}: MAPE {h['mape']:.4f} RMSE {h['rmse']:.3f}  "
                  f"persistence MAPE {h['baseline']['persistence']['mape']:.4f}")
    print(f"outputs -> {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srcn", description="Grid-based traffic speed forecasting")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("rasterize", help="rasterize the network and write PGM frames")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--frames", type=int, default=5, help="number of frames of day 0 to write")
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one horizon set and save a checkpoint")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--horizons", default=None, help="horizon set name (default: first in config)")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    for verb, func, help_ in (("predict", cmd_predict, "write test-window predictions as CSV"),
                              ("evaluate", cmd_evaluate, "score a checkpoint on the test windows")):
        p = sub.add_parser(verb, help=help_)
        _common(p)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("run", help="full experiment over every horizon set")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--timing", action="store_true", help="record wall-clock runtime in reports")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ex.load_config(args.config, args.seed)
        args.func(args, cfg)
    except ex.ExperimentError as exc:
        print(f"srcn {args.verb}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
