"""Speed record ingestion, time binning, sample windows and synthetic data.

Time is organised in service days. Each day has ``bins_per_day`` bins of
``bin_width`` seconds starting ``start_seconds`` after midnight UTC (by
default 06:00 with 481 two-minute bins, i.e. through 22:00 inclusive).
Windows never cross a day boundary.
"""
from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .grid_codec import GridSpec, LinkGeometry, NetworkMap, build_network_map

SECONDS_PER_DAY = 86400


class DataError(ValueError):
    pass


class SpeedRecord(NamedTuple):
    link_id: str
    timestamp: float
    speed: float


@dataclass(frozen=True)
class DayWindow:
    start_seconds: int = 6 * 3600
    bins_per_day: int = 481
    bin_width: int = 120

    def __post_init__(self):
        if self.bin_width <= 0:
            raise ValueError("bin_width must be positive")
        if self.bins_per_day < 1:
            raise ValueError("bins_per_day must be at least 1")
        if not 0 <= self.start_seconds < SECONDS_PER_DAY:
            raise ValueError("start_seconds must fall within the day")
        if self.start_seconds + self.bins_per_day * self.bin_width > SECONDS_PER_DAY:
            raise ValueError("service window runs past midnight")


@dataclass
class BinnedSeries:
    link_ids: list[str]
    days: np.ndarray  # day numbers (days since the epoch)
    window: DayWindow
    values: np.ndarray  # [days, bins, links] km/h, gaps filled
    counts: np.ndarray  # [days, bins, links] observations per bin
    rejected: dict[str, int] = field(default_factory=dict)

    @property
    def n_days(self) -> int:
        return self.values.shape[0]

    @property
    def bins_per_day(self) -> int:
        return self.values.shape[1]

    @property
    def n_links(self) -> int:
        return self.values.shape[2]

    def bin_start(self, day: int, b: int) -> int:
        """Epoch seconds at which bin ``b`` of day index ``day`` starts."""
        return int(self.days[day]) * SECONDS_PER_DAY + self.window.start_seconds + b * self.window.bin_width

    def subset_days(self, day_indices: Sequence[int]) -> "BinnedSeries":
        idx = np.asarray(day_indices, dtype=np.int64)
        return BinnedSeries(
            link_ids=list(self.link_ids), days=self.days[idx], window=self.window,
            values=self.values[idx], counts=self.counts[idx], rejected=dict(self.rejected),
        )


def bin_records(
    records: Iterable[SpeedRecord],
    link_ids: Sequence[str],
    window: DayWindow = DayWindow(),
    fill_means: Sequence[float] | None = None,
) -> BinnedSeries:
    """Average records per (link, bin); fill empty bins by the gap rule.

    The gap rule carries the last observed bin value forward in time; bins
    before a link's first observation take ``fill_means`` (the link's
    training-period mean) or, if not given, the mean of its observed bins.
    """
    pos = {lid: j for j, lid in enumerate(link_ids)}
    if len(pos) != len(link_ids):
        raise DataError("duplicate link ids")
    rejected = {"unknown_link": 0, "negative_speed": 0, "non_finite": 0, "out_of_window": 0}
    li, ts, sp = [], [], []
    for r in records:
        j = pos.get(r.link_id)
        if j is None:
            rejected["unknown_link"] += 1
            continue
        s = float(r.speed)
        if not math.isfinite(s) or not math.isfinite(float(r.timestamp)):
            rejected["non_finite"] += 1
            continue
        if s < 0:
            rejected["negative_speed"] += 1
            continue
        li.append(j)
        ts.append(float(r.timestamp))
        sp.append(s)
    if not li:
        raise DataError("no usable speed records")
    li = np.asarray(li, dtype=np.int64)
    ts = np.asarray(ts)
    sp = np.asarray(sp)
    day = np.floor(ts / SECONDS_PER_DAY).astype(np.int64)
    offset = ts - day * SECONDS_PER_DAY - window.start_seconds
    b = np.floor(offset / window.bin_width).astype(np.int64)
    ok = (offset >= 0) & (b < window.bins_per_day)
    rejected["out_of_window"] = int((~ok).sum())
    li, day, b, sp = li[ok], day[ok], b[ok], sp[ok]
    if li.size == 0:
        raise DataError("no records fall inside the service window")
    first = int(day.min())
    days = np.arange(first, int(day.max()) + 1)
    shape = (days.size, window.bins_per_day, len(link_ids))
    sums = np.zeros(shape)
    counts = np.zeros(shape, dtype=np.int64)
    np.add.at(sums, (day - first, b, li), sp)
    np.add.at(counts, (day - first, b, li), 1)
    values = np.full(shape, np.nan)
    seen = counts > 0
    values[seen] = sums[seen] / counts[seen]
    values = fill_gaps(values, fill_means)
    return BinnedSeries(list(link_ids), days, window, values, counts, rejected)


def fill_gaps(values: np.ndarray, fill_means: Sequence[float] | None = None) -> np.ndarray:
    """Carry-forward along flattened time; leading gaps get the link mean."""
    shape = values.shape
    flat = values.reshape(-1, shape[-1]).copy()
    t = np.arange(flat.shape[0])[:, None]
    valid = ~np.isnan(flat)
    last = np.maximum.accumulate(np.where(valid, t, -1), axis=0)
    cols = np.broadcast_to(np.arange(flat.shape[1]), flat.shape)
    carried = np.where(last >= 0, flat[np.maximum(last, 0), cols], np.nan)
    if fill_means is None:
        with np.errstate(invalid="ignore"):
            means = np.nanmean(np.where(valid, flat, np.nan), axis=0) if valid.any() else np.full(flat.shape[1], np.nan)
    else:
        means = np.asarray(fill_means, dtype=np.float64)
    lead = np.isnan(carried)
    if np.isnan(means[lead.any(axis=0)]).any():
        raise DataError("a link has no observations and no fill mean")
    carried[lead] = np.broadcast_to(means, flat.shape)[lead]
    return carried.reshape(shape)


# ----------------------------------------------------------------------------
# windows
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SampleWindow:
    inputs: np.ndarray  # [L, H, W] grid frames (a view into the shared frame stack)
    targets: np.ndarray  # [K, n] normalized link speeds at each horizon offset
    day: int  # day index into the series
    start_bin: int
    offsets: tuple[int, ...]

    @property
    def lag(self) -> int:
        return self.inputs.shape[0]

    @property
    def last_input_bin(self) -> int:
        return self.start_bin + self.lag - 1

    @property
    def target_bins(self) -> tuple[int, ...]:
        return tuple(self.last_input_bin + k for k in self.offsets)

    def bins(self) -> set[tuple[int, int]]:
        used = set(range(self.start_bin, self.start_bin + self.lag)) | set(self.target_bins)
        return {(self.day, b) for b in used}


def windows_per_day(bins_per_day: int, lag: int, offsets: Sequence[int]) -> int:
    return bins_per_day - lag - max(offsets) + 1


def make_windows(
    series: BinnedSeries,
    net: NetworkMap,
    lag: int,
    offsets: Sequence[int],
    v_max: float,
    days: Sequence[int] | None = None,
) -> list[SampleWindow]:
    """Stride-1 windows inside each service day, in time order."""
    offsets = tuple(int(k) for k in offsets)
    if lag < 1 or not offsets or any(k < 1 for k in offsets) or list(offsets) != sorted(set(offsets)):
        raise ValueError("lag must be >= 1 and offsets strictly increasing positive integers")
    if series.link_ids != net.link_ids:
        raise DataError("series link order does not match the network")
    per_day = windows_per_day(series.bins_per_day, lag, offsets)
    if per_day < 1:
        raise ValueError(
            f"lag {lag} + max offset {max(offsets)} exceeds the {series.bins_per_day} bins of a day"
        )
    day_list = range(series.n_days) if days is None else days
    windows = []
    for d in day_list:
        speeds = series.values[d]
        frames, _ = net.encode_many(speeds, v_max)
        frames.setflags(write=False)
        norm = np.minimum(speeds / v_max, 1.0)
        for s in range(per_day):
            last = s + lag - 1
            targets = norm[[last + k for k in offsets]]
            windows.append(SampleWindow(frames[s:s + lag], targets, int(d), s, offsets))
    return windows


def chronological_split(
    windows: Sequence[SampleWindow], train_fraction: float
) -> tuple[list[SampleWindow], list[SampleWindow]]:
    """Prefix/suffix split in time order.

    Test windows that share any bin with a training window are dropped, so the
    two sides never overlap.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train fraction must lie in (0, 1), got {train_fraction}")
    cut = int(math.floor(train_fraction * len(windows)))
    train = list(windows[:cut])
    if not train:
        raise ValueError("split leaves no training windows")
    used: set[tuple[int, int]] = set()
    last_day = train[-1].day
    for w in train:
        if w.day == last_day:
            used |= w.bins()
    test = [w for w in windows[cut:] if w.day > last_day or not (w.bins() & used)]
    if not test:
        raise ValueError("split leaves no test windows")
    return train, test


# ----------------------------------------------------------------------------
# CSV I/O
# ----------------------------------------------------------------------------

def _parse_iso(s: str) -> float:
    dt = datetime.fromisoformat(s.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def read_records_csv(path: str | Path) -> list[SpeedRecord]:
    """Read ``link_id,timestamp,speed_kmh``. The timestamp format (integer epoch
    seconds or ISO-8601) is decided by the first data row and applies to all."""
    out: list[SpeedRecord] = []
    with open(path, newline="", encoding="utf-8") as fp:
        reader = csv.reader(fp)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["link_id", "timestamp", "speed_kmh"]:
            raise DataError(f"{path}: expected header link_id,timestamp,speed_kmh")
        parse = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 columns")
            lid, ts, sp = (c.strip() for c in row)
            if parse is None:
                try:
                    int(ts)
                    parse = lambda x: float(int(x))  # noqa: E731
                except ValueError:
                    parse = _parse_iso
            try:
                out.append(SpeedRecord(lid, parse(ts), float(sp)))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_records_csv(records: Iterable[SpeedRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["link_id", "timestamp", "speed_kmh"])
        for r in records:
            w.writerow([r.link_id, int(r.timestamp), repr(float(r.speed))])


# ----------------------------------------------------------------------------
# synthetic congestion data
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    free_flow: float = 60.0
    free_flow_spread: float = 0.1  # per-link free flow drawn from free_flow * U(1-s, 1+s)
    congested: float = 10.0
    delay_bins: int = 2
    decay: float = 0.6
    recovery_bins: int = 15
    max_hops: int = 3
    duration_bins: tuple[int, int] = (10, 30)
    demand_amplitude: float = 0.15
    demand_cycles: int = 2  # full demand oscillations per service day
    noise_sd: float = 3.0  # per-vehicle observation noise, km/h
    vehicles_per_bin: int = 2
    start_day: int = 16587  # 2015-06-01
    window: DayWindow = DayWindow()


@dataclass(frozen=True)
class Incident:
    link_id: str
    day: int
    start_bin: int
    duration_bins: int
    severity: float
    hop: int = 0
    source: str | None = None


@dataclass
class SyntheticData:
    records: list[SpeedRecord]
    incidents: list[Incident]
    truth: np.ndarray  # [days, bins, links] noiseless speeds
    free_flow: np.ndarray  # per-link configured mean speed
    link_ids: list[str]


def lattice_network(
    n_links: int = 20,
    rows: int = 4,
    cols: int = 4,
    spacing: int = 7,
    origin: tuple[float, float] = (39.88, 116.38),
    cell_size: float = 0.0001,
) -> tuple[NetworkMap, dict[str, set[str]]]:
    """Street lattice with links trimmed one cell short of each junction.

    Links therefore never share a grid cell. Two links are adjacent when they
    meet at a junction. The first ``n_links`` lattice edges are kept.
    """
    size_r = (rows - 1) * spacing + 3
    size_c = (cols - 1) * spacing + 3
    spec = GridSpec(origin=origin, cell_size=cell_size, height=size_r, width=size_c)

    def centre(r: float, c: float) -> tuple[float, float]:
        return (origin[0] + (r + 0.5) * cell_size, origin[1] + (c + 0.5) * cell_size)

    edges = []
    for r in range(rows):
        for c in range(cols - 1):
            edges.append(((r, c), (r, c + 1)))
    for c in range(cols):
        for r in range(rows - 1):
            edges.append(((r, c), (r + 1, c)))
    if n_links > len(edges):
        raise ValueError(f"a {rows}x{cols} lattice has only {len(edges)} links")
    edges = edges[:n_links]
    links, ends = [], {}
    for k, (a, b) in enumerate(edges):
        ra, ca = 1 + a[0] * spacing, 1 + a[1] * spacing
        rb, cb = 1 + b[0] * spacing, 1 + b[1] * spacing
        dr, dc = np.sign(rb - ra), np.sign(cb - ca)
        lid = f"L{k:02d}"
        links.append(LinkGeometry(lid, (centre(ra + dr, ca + dc), centre(rb - dr, cb - dc))))
        ends.setdefault(a, []).append(lid)
        ends.setdefault(b, []).append(lid)
    adjacency = {g.link_id: set() for g in links}
    for ids in ends.values():
        for x in ids:
            adjacency[x].update(y for y in ids if y != x)
    return build_network_map(links, spec), adjacency


def _hop_distances(adjacency: dict[str, set[str]], src: str, max_hops: int) -> dict[str, int]:
    dist = {src: 0}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        if dist[u] == max_hops:
            continue
        for v in sorted(adjacency.get(u, ())):
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def _severity_profile(n_bins: int, start: int, duration: int, severity: float, recovery: int) -> np.ndarray:
    t = np.arange(n_bins)
    prof = np.zeros(n_bins)
    hold = (t >= start) & (t < start + duration)
    prof[hold] = severity
    rec = (t >= start + duration) & (t < start + duration + recovery)
    prof[rec] = severity * (1.0 - (t[rec] - (start + duration) + 1) / (recovery + 1))
    return prof


def generate_synthetic(
    net: NetworkMap,
    adjacency: dict[str, set[str]],
    days: int,
    seed: int,
    incident_rate: float = 1.0,
    config: SyntheticConfig = SyntheticConfig(),
    scripted: Sequence[Incident] = (),
) -> SyntheticData:
    """Speed records from a demand-cycle + incident-propagation model.

    Each link oscillates around its own free-flow speed over the service day.
    Incidents (Poisson, ``incident_rate`` per link per day, plus any scripted
    ones) pull a link's speed toward the congested level; the disturbance
    reaches links ``h`` hops away ``h * delay_bins`` later with severity
    multiplied by ``decay ** h``, holds for the incident duration and then
    recovers linearly over ``recovery_bins``.
    """
    if not adjacency or all(not v for v in adjacency.values()):
        raise ValueError("synthetic generation needs a non-empty link adjacency")
    if days < 1:
        raise ValueError("days must be >= 1")
    cfg = config
    ids = net.link_ids
    pos = {lid: j for j, lid in enumerate(ids)}
    n = len(ids)
    nb = cfg.window.bins_per_day
    rng = np.random.default_rng(seed)
    free = cfg.free_flow * rng.uniform(1 - cfg.free_flow_spread, 1 + cfg.free_flow_spread, size=n)
    phase = 2 * np.pi * cfg.demand_cycles * np.arange(nb) / nb
    base = free[None, :] * (1.0 - cfg.demand_amplitude * np.cos(phase)[:, None])  # [bins, links]

    origins: list[Incident] = []
    for d in range(days):
        for lid in ids:
            for _ in range(rng.poisson(incident_rate) if incident_rate > 0 else 0):
                start = int(rng.integers(0, nb))
                dur = int(rng.integers(cfg.duration_bins[0], cfg.duration_bins[1] + 1))
                origins.append(Incident(lid, d, start, dur, 1.0))
    origins.extend(scripted)
    origins.sort(key=lambda i: (i.day, i.start_bin, pos[i.link_id]))

    severity = np.zeros((days, nb, n))
    log: list[Incident] = []
    for inc in origins:
        if inc.link_id not in pos:
            raise ValueError(f"incident on unknown link {inc.link_id!r}")
        for lid, h in sorted(_hop_distances(adjacency, inc.link_id, cfg.max_hops).items(), key=lambda kv: (kv[1], kv[0])):
            sev = inc.severity * cfg.decay ** h
            start = inc.start_bin + h * cfg.delay_bins
            if start >= nb:
                continue
            prof = _severity_profile(nb, start, inc.duration_bins, sev, cfg.recovery_bins)
            j = pos[lid]
            severity[inc.day, :, j] = np.maximum(severity[inc.day, :, j], prof)
            log.append(Incident(lid, inc.day, start, inc.duration_bins, sev, h, inc.link_id))

    truth = base[None] - severity * (base[None] - cfg.congested)

    m = cfg.vehicles_per_bin
    noise = rng.normal(0.0, cfg.noise_sd, size=(days, nb, n, m))
    speeds = np.maximum(truth[..., None] + noise, 0.0)
    jitter = rng.uniform(0.0, cfg.window.bin_width, size=(days, nb, n, m)).astype(np.int64)
    records = []
    w = cfg.window
    for d in range(days):
        day0 = (cfg.start_day + d) * SECONDS_PER_DAY + w.start_seconds
        for b in range(nb):
            t0 = day0 + b * w.bin_width
            for j, lid in enumerate(ids):
                for k in range(m):
                    records.append(SpeedRecord(lid, float(t0 + jitter[d, b, j, k]), float(speeds[d, b, j, k])))
    return SyntheticData(records, log, truth, free, list(ids))


def write_incidents_json(incidents: Sequence[Incident], path: str | Path) -> None:
    Path(path).write_text(json.dumps([asdict(i) for i in incidents], indent=1), encoding="utf-8")
