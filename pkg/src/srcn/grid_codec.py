"""Road network <-> grid image conversion.

Links are polylines in (lat, lon) degrees. A :class:`GridSpec` lays square
cells over the area; row index grows with latitude, column index with
longitude. Each link is rasterized once into the cells its polyline passes
through, and speed frames are built by averaging the normalized speeds of all
links that cover a cell. Cells no link touches stay at zero.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

Cell = tuple[int, int]

# event times closer than this are treated as one simultaneous (corner) crossing
_CORNER_TOL = 1e-12


class ConfigError(ValueError):
    pass


class OutOfBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class LinkGeometry:
    link_id: str
    polyline: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(lat), float(lon)) for lat, lon in self.polyline)
        if len(pts) < 2:
            raise ConfigError(f"link {self.link_id!r}: polyline needs at least 2 vertices")
        for a, b in zip(pts, pts[1:]):
            if a == b:
                raise ConfigError(f"link {self.link_id!r}: consecutive duplicate vertex {a}")
        object.__setattr__(self, "polyline", pts)


@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float]
    cell_size: float
    height: int
    width: int

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ConfigError(f"cell_size must be positive, got {self.cell_size}")
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.height}x{self.width}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_cell_units(self, lat: float, lon: float) -> tuple[float, float]:
        return ((lat - self.origin[0]) / self.cell_size, (lon - self.origin[1]) / self.cell_size)

    def cell_of(self, u: float, v: float) -> Cell:
        """Cell containing a point given in cell units.

        Boundaries belong to the higher-index cell, except the far edge of the
        grid, which belongs to the last row/column.
        """
        return (min(math.floor(u), self.height - 1), min(math.floor(v), self.width - 1))

    def contains(self, u: float, v: float) -> bool:
        return 0.0 <= u <= self.height and 0.0 <= v <= self.width


def _lines_crossed(a: float, b: float, limit: int) -> list[tuple[float, int]]:
    """Grid lines crossed going from a to b, as (param t, step) pairs.

    A positive move enters cell i at line i (a < i <= b); a negative move
    leaves cell i at line i (b < i <= a). Lines at the far grid edge are
    skipped because that edge is folded into the last cell.
    """
    if a == b:
        return []
    out = []
    if b > a:
        for i in range(math.floor(a) + 1, math.floor(b) + 1):
            if i < limit:
                out.append(((i - a) / (b - a), +1))
    else:
        for i in range(math.floor(b) + 1, math.floor(a) + 1):
            if i < limit:
                out.append(((a - i) / (a - b), -1))
    return out


def _segment_cells(spec: GridSpec, p0: tuple[float, float], p1: tuple[float, float]) -> list[Cell]:
    (u0, v0), (u1, v1) = p0, p1
    row, col = spec.cell_of(u0, v0)
    events = [(t, 0, s) for t, s in _lines_crossed(u0, u1, spec.height)]
    events += [(t, 1, s) for t, s in _lines_crossed(v0, v1, spec.width)]
    events.sort()
    cells = [(row, col)]
    k = 0
    while k < len(events):
        group = [events[k]]
        while k + len(group) < len(events) and events[k + len(group)][0] - events[k][0] <= _CORNER_TOL:
            group.append(events[k + len(group)])
        k += len(group)
        # at the crossing point itself: positive steps already taken, negative ones not yet
        for _, axis, step in group:
            if step > 0:
                if axis == 0:
                    row += 1
                else:
                    col += 1
        cells.append((row, col))
        for _, axis, step in group:
            if step < 0:
                if axis == 0:
                    row -= 1
                else:
                    col -= 1
        cells.append((row, col))
    return cells


def rasterize_link(geom: LinkGeometry, spec: GridSpec) -> list[Cell]:
    """Ordered, duplicate-free list of (row, col) cells the polyline passes through."""
    pts = []
    for idx, (lat, lon) in enumerate(geom.polyline):
        u, v = spec.to_cell_units(lat, lon)
        if not spec.contains(u, v):
            raise OutOfBoundsError(
                f"link {geom.link_id!r}: vertex {idx} at ({lat}, {lon}) lies outside the grid"
            )
        pts.append((u, v))
    seen: set[Cell] = set()
    ordered: list[Cell] = []
    for a, b in zip(pts, pts[1:]):
        for c in _segment_cells(spec, a, b):
            if c not in seen:
                seen.add(c)
                ordered.append(c)
    return ordered


@dataclass(frozen=True)
class GridFrame:
    values: np.ndarray
    timestamp: int = 0
    clamped: int = 0


@dataclass(frozen=True, eq=False)
class NetworkMap:
    spec: GridSpec
    links: tuple[LinkGeometry, ...]
    link_cells: dict[str, tuple[Cell, ...]]
    cell_index: dict[Cell, tuple[str, ...]]
    # flat (cell, link) incidence pairs, for vectorized encode/decode
    _cell_flat: np.ndarray = field(repr=False, default=None)
    _link_pos: np.ndarray = field(repr=False, default=None)
    _cover: np.ndarray = field(repr=False, default=None)

    @property
    def link_ids(self) -> list[str]:
        return [g.link_id for g in self.links]

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def shares_cells(self) -> bool:
        return any(len(ids) > 1 for ids in self.cell_index.values())

    def encode_many(self, speeds: np.ndarray, v_max: float) -> tuple[np.ndarray, int]:
        """Encode a [T, n] array of link speeds into [T, H, W] frames.

        Returns the frames and the number of clamped speed entries.
        """
        speeds = np.asarray(speeds, dtype=np.float64)
        if speeds.ndim != 2 or speeds.shape[1] != self.n_links:
            raise ValueError(f"expected speeds of shape [T, {self.n_links}], got {speeds.shape}")
        if not v_max > 0:
            raise ValueError(f"v_max must be positive, got {v_max}")
        if not np.isfinite(speeds).all():
            raise ValueError("speeds must be finite")
        if (speeds < 0).any():
            raise ValueError("negative speed")
        clamped = int((speeds > v_max).sum())
        scaled = np.minimum(speeds / v_max, 1.0)
        h, w = self.spec.shape
        flat = np.zeros((speeds.shape[0], h * w))
        np.add.at(flat, (slice(None), self._cell_flat), scaled[:, self._link_pos])
        covered = self._cover > 0
        flat[:, covered] /= self._cover[covered]
        return flat.reshape(-1, h, w), clamped

    def decode_many(self, frames: np.ndarray, v_max: float) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[1:] != self.spec.shape:
            raise ValueError(f"frames must be [T, {self.spec.height}, {self.spec.width}], got {frames.shape}")
        flat = frames.reshape(frames.shape[0], -1)
        sums = np.zeros((frames.shape[0], self.n_links))
        np.add.at(sums, (slice(None), self._link_pos), flat[:, self._cell_flat])
        counts = np.bincount(self._link_pos, minlength=self.n_links)
        return v_max * sums / counts


def build_network_map(links: Sequence[LinkGeometry], spec: GridSpec) -> NetworkMap:
    if not links:
        raise ConfigError("network needs at least one link")
    link_cells: dict[str, tuple[Cell, ...]] = {}
    for geom in links:
        if geom.link_id in link_cells:
            raise ConfigError(f"duplicate link id {geom.link_id!r}")
        link_cells[geom.link_id] = tuple(rasterize_link(geom, spec))
    index: dict[Cell, list[str]] = {}
    cell_flat, link_pos = [], []
    for j, geom in enumerate(links):
        for r, c in link_cells[geom.link_id]:
            index.setdefault((r, c), []).append(geom.link_id)
            cell_flat.append(r * spec.width + c)
            link_pos.append(j)
    cell_flat = np.asarray(cell_flat, dtype=np.int64)
    link_pos = np.asarray(link_pos, dtype=np.int64)
    cover = np.bincount(cell_flat, minlength=spec.height * spec.width).astype(np.float64)
    return NetworkMap(
        spec=spec,
        links=tuple(links),
        link_cells=link_cells,
        cell_index={c: tuple(ids) for c, ids in index.items()},
        _cell_flat=cell_flat,
        _link_pos=link_pos,
        _cover=cover,
    )


def encode_frame(net: NetworkMap, speeds: Sequence[float], v_max: float, timestamp: int = 0) -> GridFrame:
    speeds = np.asarray(speeds, dtype=np.float64)
    if speeds.shape != (net.n_links,):
        raise ValueError(f"expected {net.n_links} link speeds, got shape {speeds.shape}")
    frames, clamped = net.encode_many(speeds[None, :], v_max)
    return GridFrame(values=frames[0], timestamp=timestamp, clamped=clamped)


def decode_frame(net: NetworkMap, frame: GridFrame | np.ndarray, v_max: float) -> np.ndarray:
    values = frame.values if isinstance(frame, GridFrame) else np.asarray(frame)
    if values.shape != net.spec.shape:
        raise ValueError(f"frame shape {values.shape} does not match grid {net.spec.shape}")
    return net.decode_many(values[None], v_max)[0]


def default_v_max(speeds: Iterable[float] | np.ndarray) -> float:
    """99.5th percentile of the given (training) speeds."""
    arr = np.asarray(list(speeds) if not isinstance(speeds, np.ndarray) else speeds, dtype=np.float64)
    arr = arr[np.isfinite(arr)]
    if arr.size == 0:
        raise ValueError("no finite speeds to derive v_max from")
    v = float(np.percentile(arr, 99.5))
    if v <= 0:
        raise ValueError("v_max derived from speeds is not positive")
    return v


def load_network(path: str | Path) -> NetworkMap:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return network_from_dict(doc)


def network_from_dict(doc: dict) -> NetworkMap:
    try:
        spec = GridSpec(
            origin=(float(doc["origin"][0]), float(doc["origin"][1])),
            cell_size=float(doc["cell_size_deg"]),
            height=int(doc["height"]),
            width=int(doc["width"]),
        )
        links = [LinkGeometry(str(l["id"]), tuple(tuple(p) for p in l["polyline"])) for l in doc["links"]]
    except (KeyError, TypeError, IndexError) as exc:
        raise ConfigError(f"malformed network document: {exc}") from exc
    return build_network_map(links, spec)


def network_to_dict(net: NetworkMap) -> dict:
    s = net.spec
    return {
        "cell_size_deg": s.cell_size,
        "origin": [s.origin[0], s.origin[1]],
        "height": s.height,
        "width": s.width,
        "links": [{"id": g.link_id, "polyline": [list(p) for p in g.polyline]} for g in net.links],
    }


def save_network(net: NetworkMap, path: str | Path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1), encoding="utf-8")


def write_pgm(frame: GridFrame | np.ndarray, path: str | Path) -> None:
    """Binary PGM (P5, maxval 255). North (highest row index) is drawn at the top."""
    values = frame.values if isinstance(frame, GridFrame) else np.asarray(frame)
    pix = np.rint(255.0 * np.clip(values, 0.0, 1.0)).astype(np.uint8)[::-1]
    h, w = pix.shape
    with open(path, "wb") as fp:
        fp.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fp.write(pix.tobytes())

