"""End-to-end experiment: ingest -> window -> train -> evaluate -> report.

A single TOML or JSON document drives everything::

    seed = 7
    [data]
    source = "synthetic"      # or "files" with `network` and `records` paths
    days = 10
    n_links = 20
    train_fraction = 0.7
    [model]                   # any SrcnConfig field except grid size, links, offsets
    channels = [4, 8]
    [experiment.horizons]
    short = [1, 2, 3]
    long = [10, 20, 30]
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import plots
from .autodiff import NumericalHealthError
from .data import (
    BinnedSeries, DataError, DayWindow, Incident, SampleWindow, SyntheticConfig, bin_records,
    chronological_split, generate_synthetic, lattice_network, make_windows, read_records_csv,
    write_incidents_json, write_records_csv,
)
from .evaluation import HistoricalAverage, mape, mape_signed, persistence_baseline, rmse
from .grid_codec import ConfigError as NetworkConfigError
from .grid_codec import NetworkMap, default_v_max, load_network, network_to_dict
from .model import ConfigError as ModelConfigError
from .model import SrcnConfig, SrcnParams, predict, save_checkpoint, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

DEFAULTS = {
    "seed": 0,
    "data": {
        "source": "synthetic",
        "days": 10,
        "n_links": 20,
        "incident_rate": 0.2,
        "noise_sd": 6.0,
        "bins_per_day": 481,
        "bin_width": 120,
        "start_hour": 6.0,
        "train_fraction": 0.7,
        "v_max": None,
    },
    "model": {
        "channels": [4, 8],
        "pool_after": [0, 1],
        "feature_dim": 20,
        "hidden": 32,
        "lstm_layers": 2,
        "lag": 5,
        "max_epochs": 60,
        "patience": 10,
    },
    "experiment": {
        "horizons": {"short": [1, 2, 3], "long": [10, 20, 30]},
        "mape_epsilon": 1.0,
        "plot_links": 3,
    },
}


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException, exit_code: int):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = exit_code


def _exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, NumericalHealthError):
        return EXIT_NUMERICAL
    if isinstance(exc, (ModelConfigError, NetworkConfigError, KeyError, TypeError)):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, OSError, ValueError)):
        return EXIT_DATA
    return 1


class _stage:
    """Context manager that tags any failure with the stage name.

    ``code`` forces the exit code for every failure except numerical-health ones.
    """

    def __init__(self, name: str, code: int | None = None):
        self.name = name
        self.code = code

    def __enter__(self):
        return self

    def __exit__(self, typ, exc, tb):
        if exc is not None and not isinstance(exc, ExperimentError):
            code = _exit_code_for(exc)
            if self.code is not None and code != EXIT_NUMERICAL:
                code = self.code
            raise ExperimentError(self.name, exc, code) from exc
        return False


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "horizons":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path | None, seed: int | None = None) -> dict:
    """Read a TOML/JSON config, fill defaults, resolve relative paths."""
    with _stage("config", EXIT_CONFIG):
        raw: dict = {}
        base_dir = Path.cwd()
        if path is not None:
            path = Path(path)
            text = path.read_bytes()
            try:
                raw = json.loads(text) if path.suffix == ".json" else tomllib.loads(text.decode("utf-8"))
            except (json.JSONDecodeError, tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
                raise ModelConfigError(f"cannot parse {path}: {exc}") from exc
            base_dir = path.resolve().parent
        unknown = set(raw) - set(DEFAULTS)
        if unknown:
            raise ModelConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = _merge(DEFAULTS, raw)
        if seed is not None:
            cfg["seed"] = int(seed)
        for key in ("network", "records"):
            if key in cfg["data"]:
                cfg["data"][key] = str((base_dir / cfg["data"][key]).resolve())
        if cfg["data"]["source"] not in ("synthetic", "files"):
            raise ModelConfigError(f"data.source must be 'synthetic' or 'files', got {cfg['data']['source']!r}")
        if not cfg["experiment"]["horizons"]:
            raise ModelConfigError("experiment.horizons is empty")
        return cfg


def fingerprint(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Dataset:
    net: NetworkMap
    series: BinnedSeries
    adjacency: dict[str, set[str]] | None = None
    incidents: list[Incident] = field(default_factory=list)
    records: list | None = None


def day_window(cfg: dict) -> DayWindow:
    d = cfg["data"]
    return DayWindow(start_seconds=int(round(float(d["start_hour"]) * 3600)),
                     bins_per_day=int(d["bins_per_day"]), bin_width=int(d["bin_width"]))


def synthesize(cfg: dict) -> Dataset:
    d = cfg["data"]
    net, adjacency = lattice_network(n_links=int(d["n_links"]))
    syn_cfg = SyntheticConfig(noise_sd=float(d["noise_sd"]), window=day_window(cfg))
    syn = generate_synthetic(net, adjacency, int(d["days"]), int(cfg["seed"]), float(d["incident_rate"]), syn_cfg)
    series = bin_records(syn.records, net.link_ids, syn_cfg.window)
    return Dataset(net, series, adjacency, syn.incidents, syn.records)


def load_dataset(cfg: dict) -> Dataset:
    d = cfg["data"]
    if d["source"] == "synthetic":
        with _stage("synthesize"):
            return synthesize(cfg)
    with _stage("ingest"):
        if "network" not in d or "records" not in d:
            raise ModelConfigError("data.source = 'files' needs data.network and data.records")
        net = load_network(d["network"])
        records = read_records_csv(d["records"])
        series = bin_records(records, net.link_ids, day_window(cfg))
        return Dataset(net, series)


def model_config(cfg: dict, net: NetworkMap, offsets: Sequence[int]) -> SrcnConfig:
    m = dict(cfg["model"])
    for key in ("height", "width", "n_links", "offsets"):
        if key in m:
            raise ModelConfigError(f"model.{key} is derived from the data and may not be set")
    return SrcnConfig.from_dict({**m, "height": net.spec.height, "width": net.spec.width,
                                 "n_links": net.n_links, "offsets": list(offsets)})


@dataclass
class PreparedSet:
    name: str
    offsets: tuple[int, ...]
    train: list[SampleWindow]
    test: list[SampleWindow]
    train_days: list[int]
    v_max: float


def prepare_windows(cfg: dict, ds: Dataset, name: str, offsets: Sequence[int]) -> PreparedSet:
    with _stage("window"):
        lag = int(cfg["model"]["lag"])
        frac = float(cfg["data"]["train_fraction"])
        n_train_days = int(np.floor(frac * ds.series.n_days + 1e-9))
        if n_train_days < 1:
            raise DataError("train_fraction leaves no training day")
        v_max = cfg["data"]["v_max"]
        if v_max is None:
            v_max = default_v_max(ds.series.values[:n_train_days].ravel())
        windows = make_windows(ds.series, ds.net, lag, offsets, float(v_max))
        train_w, test_w = chronological_split(windows, frac)
        first_test_day = test_w[0].day
        train_days = [d for d in range(ds.series.n_days) if d < first_test_day]
        return PreparedSet(name, tuple(offsets), train_w, test_w, train_days, float(v_max))


def evaluate(
    params: SrcnParams,
    windows: Sequence[SampleWindow],
    ds: Dataset,
    v_max: float,
    train_days: Sequence[int],
    epsilon: float = 1.0,
) -> dict:
    """Score SRCN and the baselines on ``windows``; returns the report body."""
    offsets = windows[0].offsets
    srcn = predict(params, windows) * v_max  # [m, K, n]
    actual = np.stack([ds.series.values[w.day, list(w.target_bins)] for w in windows])
    persist = np.stack([persistence_baseline(w, ds.net, v_max) for w in windows])
    hist = None
    if len(train_days) >= 2:
        ha = HistoricalAverage(ds.series, train_days)
        hist = np.stack([ha.predict_window(w) for w in windows])
    m, k_count, n = actual.shape
    horizons = []
    for k, off in enumerate(offsets):
        entry = {
            "offset_bins": off,
            "mape": mape(srcn[:, k], actual[:, k], epsilon),
            "mape_signed": mape_signed(srcn[:, k], actual[:, k], epsilon),
            "rmse": rmse(srcn[:, k], actual[:, k]),
            "m": m,
            "n_p": m * n,
            "baseline": {
                "persistence": {
                    "mape": mape(persist[:, k], actual[:, k], epsilon),
                    "mape_signed": mape_signed(persist[:, k], actual[:, k], epsilon),
                    "rmse": rmse(persist[:, k], actual[:, k]),
                },
            },
            "per_link": [
                {"link_id": lid,
                 "mape": mape(srcn[:, k, j], actual[:, k, j], epsilon),
                 "rmse": rmse(srcn[:, k, j], actual[:, k, j])}
                for j, lid in enumerate(ds.net.link_ids)
            ],
        }
        if hist is not None:
            entry["baseline"]["historical"] = {
                "mape": mape(hist[:, k], actual[:, k], epsilon),
                "mape_signed": mape_signed(hist[:, k], actual[:, k], epsilon),
                "rmse": rmse(hist[:, k], actual[:, k]),
            }
        entry["deltas"] = {
            name: {"mape": entry["mape"] - b["mape"], "rmse": entry["rmse"] - b["rmse"]}
            for name, b in entry["baseline"].items()
        }
        horizons.append(entry)
    return {
        "horizons": horizons,
        "n": n,
        "m": m * k_count,
        "n_p": m * k_count * n,
        "_arrays": {"srcn": srcn, "actual": actual, "persistence": persist},
    }


def _write_table(path: Path, report: dict, fp: str) -> None:
    methods = ["srcn", "persistence"] + (["historical"] if "historical" in report["horizons"][0]["baseline"] else [])
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(f"# config_fingerprint={fp}\n")
        w = csv.writer(f, lineterminator="\n")
        header = ["method"]
        for h in report["horizons"]:
            header += [f"mape_{h['offset_bins']}", f"rmse_{h['offset_bins']}"]
        header += ["mape_avg", "rmse_avg"]
        w.writerow(header)
        for meth in methods:
            row, mapes, rmses = [meth], [], []
            for h in report["horizons"]:
                src = h if meth == "srcn" else h["baseline"][meth]
                row += [f"{src['mape']:.6f}", f"{src['rmse']:.6f}"]
                mapes.append(src["mape"])
                rmses.append(src["rmse"])
            row += [f"{np.mean(mapes):.6f}", f"{np.mean(rmses):.6f}"]
            w.writerow(row)


def _write_plots(out: Path, name: str, body: dict, test: Sequence[SampleWindow], ds: Dataset,
                 n_links: int, fp: str) -> None:
    arrays = body["_arrays"]
    first_day = test[0].day
    idx = [i for i, w in enumerate(test) if w.day == first_day]
    plot_dir = out / "plots"
    plot_dir.mkdir(exist_ok=True)
    off0 = body["horizons"][0]["offset_bins"]
    for j in range(min(n_links, ds.net.n_links)):
        lid = ds.net.link_ids[j]
        series = {
            "actual": arrays["actual"][idx, 0, j].tolist(),
            "SRCN": arrays["srcn"][idx, 0, j].tolist(),
            "persistence": arrays["persistence"][idx, 0, j].tolist(),
        }
        plots.line_chart(series, plot_dir / f"{name}_timeseries_{lid}.svg",
                         f"{name}: link {lid}, offset {off0} bins", "km/h", desc=f"config_fingerprint={fp}")
        with open(plot_dir / f"{name}_timeseries_{lid}.csv", "w", encoding="utf-8") as f:
            f.write("window,actual,srcn,persistence\n")
            for k, i in enumerate(idx):
                f.write(f"{k},{series['actual'][k]:.6f},{series['SRCN'][k]:.6f},{series['persistence'][k]:.6f}\n")
    groups = [f"+{h['offset_bins']}" for h in body["horizons"]]
    bars = {"SRCN": [h["mape"] for h in body["horizons"]]}
    for b in body["horizons"][0]["baseline"]:
        bars[b] = [h["baseline"][b]["mape"] for h in body["horizons"]]
    plots.bar_chart(groups, bars, plot_dir / f"{name}_mape.svg", f"{name}: MAPE by horizon", "MAPE",
                    desc=f"config_fingerprint={fp}")
    rbars = {"SRCN": [h["rmse"] for h in body["horizons"]]}
    for b in body["horizons"][0]["baseline"]:
        rbars[b] = [h["baseline"][b]["rmse"] for h in body["horizons"]]
    plots.bar_chart(groups, rbars, plot_dir / f"{name}_rmse.svg", f"{name}: RMSE by horizon", "km/h",
                    desc=f"config_fingerprint={fp}")


def run_horizon_set(cfg: dict, ds: Dataset, name: str, offsets: Sequence[int], out: Path,
                    timing: bool = False, verbose: bool = False) -> dict:
    t0 = time.perf_counter()
    fp = fingerprint(cfg)
    prep = prepare_windows(cfg, ds, name, offsets)
    with _stage("train"):
        mcfg = model_config(cfg, ds.net, offsets)
        result = train(mcfg, prep.train, int(cfg["seed"]), log_path=out / f"train_log_{name}.jsonl", verbose=verbose)
        save_checkpoint(result.params, out / f"checkpoint_{name}.srcn",
                        meta={"v_max": prep.v_max, "horizon_set": name, "config_fingerprint": fp})
    with _stage("evaluate"):
        body = evaluate(result.params, prep.test, ds, prep.v_max, prep.train_days,
                        float(cfg["experiment"]["mape_epsilon"]))
    with _stage("report"):
        arrays = body.pop("_arrays")
        report = {
            "config_fingerprint": fp,
            "horizon_set": name,
            "horizons": body["horizons"],
            "n": body["n"],
            "m": body["m"],
            "n_p": body["n_p"],
            "v_max": prep.v_max,
            "train_windows": len(prep.train),
            "test_windows": len(prep.test),
            "best_epoch": result.best_epoch,
            "runtime_seconds": round(time.perf_counter() - t0, 3) if timing else None,
            "config": cfg,
        }
        (out / f"report_{name}.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        _write_table(out / f"table_{name}.csv", report, fp)
        _write_plots(out, name, {**body, "_arrays": arrays}, prep.test, ds,
                     int(cfg["experiment"]["plot_links"]), fp)
    return report


def run_experiment(config: str | Path | dict | None, out_dir: str | Path, seed: int | None = None,
                   timing: bool = False, verbose: bool = False) -> dict[str, dict]:
    """Run every configured horizon set; outputs appear in ``out_dir`` only on success."""
    cfg = config if isinstance(config, dict) else load_config(config, seed)
    if isinstance(config, dict) and seed is not None:
        cfg = {**cfg, "seed": int(seed)}
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".srcn-run-", dir=out_dir.parent))
    try:
        ds = load_dataset(cfg)
        with _stage("synthesize" if ds.records is not None else "ingest"):
            if ds.records is not None:
                write_records_csv(ds.records, staging / "records.csv")
                write_incidents_json(ds.incidents, staging / "incidents.json")
            doc = network_to_dict(ds.net)
            if ds.adjacency is not None:
                doc["adjacency"] = {k: sorted(v) for k, v in sorted(ds.adjacency.items())}
            (staging / "network.json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
        reports = {}
        for name, offsets in cfg["experiment"]["horizons"].items():
            reports[name] = run_horizon_set(cfg, ds, name, offsets, staging, timing, verbose)
        if out_dir.exists():
            shutil.rmtree(out_dir)
        staging.rename(out_dir)
        return reports
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
