"""Trip records to hourly region x channel traffic cubes.

Also houses the on-disk cube format and the synthetic generator used to
plant covariate and concept shift.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError

KM_PER_DEG_LAT = 111.32
CHANNELS = ("pickup", "dropoff")


@dataclass(frozen=True)
class GridSpec:
    origin_lat: float
    origin_lon: float
    cell_width_km: float
    cell_height_km: float
    n_rows: int
    n_cols: int

    def __post_init__(self):
        if not (self.cell_width_km > 0 and self.cell_height_km > 0):
            raise ConfigError("grid cell dimensions must be positive")
        if self.n_rows < 1 or self.n_cols < 1:
            raise ConfigError("grid needs at least one cell")

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def km_per_deg_lon(self) -> float:
        return KM_PER_DEG_LAT * math.cos(math.radians(self.origin_lat))


@dataclass(frozen=True)
class TripRecord:
    pickup_time: datetime
    dropoff_time: datetime
    pickup_loc: tuple[float, float] | int
    dropoff_loc: tuple[float, float] | int

    def __post_init__(self):
        if self.dropoff_time < self.pickup_time:
            raise ValueError("dropoff_time precedes pickup_time")
        for loc in (self.pickup_loc, self.dropoff_loc):
            if isinstance(loc, tuple):
                _check_coords(np.array([loc[0]]), np.array([loc[1]]))


@dataclass(frozen=True)
class DropTally:
    pickups: int = 0
    dropoffs: int = 0


def _check_coords(lat, lon):
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    bad = ~np.isfinite(lat) | ~np.isfinite(lon) | (np.abs(lat) > 90) | (np.abs(lon) > 180)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"invalid coordinate at position {i}: ({lat.flat[i]}, {lon.flat[i]})")


def assign_grid_cells(lat, lon, spec: GridSpec) -> np.ndarray:
    """Vectorised grid lookup. Out-of-grid points get -1."""
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    _check_coords(lat, lon)
    north = (lat - spec.origin_lat) * KM_PER_DEG_LAT
    east = (lon - spec.origin_lon) * spec.km_per_deg_lon
    row = np.floor(north / spec.cell_height_km)
    col = np.floor(east / spec.cell_width_km)
    inside = (row >= 0) & (row < spec.n_rows) & (col >= 0) & (col < spec.n_cols)
    cell = np.where(inside, row * spec.n_cols + col, -1)
    return cell.astype(np.int64)


def assign_grid_cell(lat: float, lon: float, spec: GridSpec) -> int | None:
    """Cell index ``row * n_cols + col`` for a point, or None when outside the grid.

    Points on an interior cell boundary fall in the higher-index cell.
    """
    cell = int(assign_grid_cells([lat], [lon], spec)[0])
    return None if cell < 0 else cell


def _month_offsets(start: np.datetime64, n_hours: int) -> np.ndarray:
    hours = start + np.arange(n_hours).astype("timedelta64[h]")
    return (hours.astype("datetime64[M]") - start.astype("datetime64[M]")).astype(np.int64)


def month_ordinal(year: int, month: int) -> int:
    return year * 12 + month - 1


@dataclass
class TrafficCube:
    """Hourly counts, ``values[t, r, c]`` with c=0 pickups and c=1 dropoffs."""

    values: np.ndarray
    start_time: datetime
    region_ids: list
    month_of_hour: np.ndarray = None
    geometry: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or self.values.shape[2] != 2:
            raise DataError(f"cube values must be [T, N, 2], got {self.values.shape}")
        if self.values.shape[1] != len(self.region_ids):
            raise DataError("region_ids length does not match cube width")
        if (self.values < 0).any():
            raise DataError("cube values must be non-negative")
        st = self.start_time
        if st.minute or st.second or st.microsecond:
            raise DataError("start_time must be hour-aligned")
        expected = _month_offsets(np.datetime64(st, "h"), self.n_hours)
        if self.month_of_hour is None:
            self.month_of_hour = expected
        elif not np.array_equal(np.asarray(self.month_of_hour), expected):
            raise DataError("month_of_hour inconsistent with start_time")

    @property
    def n_hours(self) -> int:
        return self.values.shape[0]

    @property
    def n_regions(self) -> int:
        return self.values.shape[1]

    @property
    def end_time(self) -> datetime:
        return self.start_time + timedelta(hours=self.n_hours)

    @property
    def start_month(self) -> int:
        return month_ordinal(self.start_time.year, self.start_time.month)

    @property
    def n_months(self) -> int:
        return int(self.month_of_hour[-1]) + 1 if self.n_hours else 0

    def select_regions(self, idx) -> "TrafficCube":
        idx = list(idx)
        geometry = dict(self.geometry)
        if "centroids" in geometry:
            geometry["centroids"] = [geometry["centroids"][i] for i in idx]
        return TrafficCube(
            values=self.values[:, idx, :],
            start_time=self.start_time,
            region_ids=[self.region_ids[i] for i in idx],
            month_of_hour=self.month_of_hour,
            geometry=geometry,
        )

    def save(self, path) -> None:
        save_cube(self, path)


def aggregate_trips(
    records,
    mapper: GridSpec | Mapping,
    start: datetime,
    end: datetime,
) -> tuple[TrafficCube, DropTally]:
    """Count hourly pickups and dropoffs per region over ``[start, end)``.

    ``records`` is a sequence of TripRecord or a DataFrame in the trip CSV
    schema. Events outside the window or the region universe are dropped and
    tallied.
    """
    for t in (start, end):
        if t.minute or t.second or t.microsecond:
            raise ConfigError("aggregation window must be hour-aligned")
    if end <= start:
        raise ConfigError("aggregation window is empty")

    if isinstance(mapper, GridSpec):
        region_ids = list(range(mapper.n_cells))
        geometry = {"kind": "grid", "n_cols": mapper.n_cols}
    else:
        region_ids = list(dict.fromkeys(mapper.values()))
        geometry = {"kind": "zones"}
    if not region_ids:
        raise ConfigError("empty region universe")
    region_pos = {r: i for i, r in enumerate(region_ids)}

    frame = _records_frame(records)
    n_hours = int((end - start) / timedelta(hours=1))
    values = np.zeros((n_hours, len(region_ids), 2), dtype=np.int64)
    t0 = np.datetime64(start, "s")
    dropped = [0, 0]
    for c, prefix in enumerate(("pickup", "dropoff")):
        if len(frame) == 0:
            break
        times = frame[f"{prefix}_datetime"].to_numpy().astype("datetime64[s]")
        hour = ((times - t0) // np.timedelta64(1, "h")).astype(np.int64)
        if isinstance(mapper, GridSpec):
            cell = assign_grid_cells(frame[f"{prefix}_lat"], frame[f"{prefix}_lon"], mapper)
        else:
            cell = np.array(
                [region_pos.get(mapper.get(z), -1) for z in frame[f"{prefix}_zone"]],
                dtype=np.int64,
            )
        ok = (cell >= 0) & (hour >= 0) & (hour < n_hours)
        np.add.at(values, (hour[ok], cell[ok], c), 1)
        dropped[c] = int((~ok).sum())

    cube = TrafficCube(values, start, region_ids, geometry=geometry)
    return cube, DropTally(*dropped)


def _records_frame(records) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        return records
    rows = {"pickup_datetime": [], "dropoff_datetime": []}
    for rec in records:
        rows["pickup_datetime"].append(rec.pickup_time)
        rows["dropoff_datetime"].append(rec.dropoff_time)
        for prefix, loc in (("pickup", rec.pickup_loc), ("dropoff", rec.dropoff_loc)):
            if isinstance(loc, tuple):
                rows.setdefault(f"{prefix}_lat", []).append(loc[0])
                rows.setdefault(f"{prefix}_lon", []).append(loc[1])
            else:
                rows.setdefault(f"{prefix}_zone", []).append(loc)
    frame = pd.DataFrame(rows)
    for col in ("pickup_datetime", "dropoff_datetime"):
        frame[col] = pd.to_datetime(frame[col])
    return frame


def read_trip_csv(path) -> pd.DataFrame:
    frame = pd.read_csv(path)
    cols = list(frame.columns)
    if cols[:2] != ["pickup_datetime", "dropoff_datetime"]:
        raise DataError(f"{path}: header must start with pickup_datetime, dropoff_datetime")
    latlon = {"pickup_lat", "pickup_lon", "dropoff_lat", "dropoff_lon"}
    zones = {"pickup_zone", "dropoff_zone"}
    if not (latlon <= set(cols) or zones <= set(cols)):
        raise DataError(f"{path}: need lat/lon or zone columns, got {cols}")
    for col in ("pickup_datetime", "dropoff_datetime"):
        frame[col] = pd.to_datetime(frame[col], format="ISO8601")
    return frame


def filter_regions(cube: TrafficCube, min_avg: float = 10) -> tuple[TrafficCube, list]:
    """Keep regions whose channel-averaged hourly mean reaches ``min_avg``."""
    if cube.n_hours == 0 or cube.n_regions == 0:
        raise DataError("cannot filter an empty cube")
    usage = cube.values.mean(axis=0).mean(axis=1)
    keep = [i for i in range(cube.n_regions) if usage[i] >= min_avg]
    if not keep:
        raise DataError(f"all {cube.n_regions} regions fall below min_avg={min_avg}")
    out = cube.select_regions(keep)
    return out, list(out.region_ids)


# --- on-disk format -------------------------------------------------------

def save_cube(cube: TrafficCube, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "start_time": cube.start_time.isoformat(),
        "region_ids": [_jsonable(r) for r in cube.region_ids],
        "n_hours": cube.n_hours,
        "channels": list(CHANNELS),
        "geometry": cube.geometry,
    }
    header = [f"r{i}_{ch}" for i in range(cube.n_regions) for ch in CHANNELS]
    flat = np.rint(cube.values).astype(np.int64).reshape(cube.n_hours, -1)
    tmp = path / "values.csv.tmp"
    np.savetxt(tmp, flat, fmt="%d", delimiter=",", header=",".join(header), comments="")
    os.replace(tmp, path / "values.csv")
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_cube(path) -> TrafficCube:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("channels") != list(CHANNELS):
        raise DataError(f"{path}: unexpected channels {manifest.get('channels')}")
    n_regions = len(manifest["region_ids"])
    flat = np.loadtxt(path / "values.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    if flat.shape != (manifest["n_hours"], 2 * n_regions):
        raise DataError(f"{path}: values.csv shape {flat.shape} disagrees with manifest")
    return TrafficCube(
        values=flat.reshape(-1, n_regions, 2),
        start_time=datetime.fromisoformat(manifest["start_time"]),
        region_ids=manifest["region_ids"],
        geometry=manifest.get("geometry", {}),
    )


def _jsonable(v):
    return v.item() if isinstance(v, np.generic) else v


# --- synthetic generator --------------------------------------------------

@dataclass
class ChangePoint:
    month: int
    mixing: np.ndarray
    offsets: np.ndarray


@dataclass
class SyntheticConfig:
    """Knobs for the planted-shift generator.

    ``slope`` controls covariate shift (magnitude trend per month);
    ``change_points`` switch the mixing matrix and offsets (concept shift).
    ``noise`` is the Gaussian noise std as a fraction of each region's amplitude.

    With ``flow`` the mixing matrix routes trips instead of shocks: pickups
    carry an unpredictable demand shock (std ``shock`` times amplitude) and
    dropoffs in region i are ``mixing[i] @ pickups(t - route_lag)`` plus the
    offset, so the routing can only be learned, not read off a short window.
    """

    n_regions: int
    n_months: int
    amplitude: Sequence[float] | float = 30.0
    slope: Sequence[float] | float = 0.0
    daily_depth: float = 0.8
    phase: Sequence[float] | float = 0.0
    dropoff_lag: float = 1.0
    mixing: np.ndarray | None = None
    offsets: Sequence[float] | float = 0.0
    coupling: float = 0.0
    change_points: list[ChangePoint] = field(default_factory=list)
    noise: float = 0.0
    seed: int = 0
    start: tuple[int, int] = (2021, 7)
    grid_cols: int | None = None
    flow: bool = False
    shock: float = 0.0
    route_lag: int = 6

    def __post_init__(self):
        n = self.n_regions
        if n < 1 or self.n_months < 1:
            raise ConfigError("synthetic cube needs at least one region and month")
        self.amplitude = _per_region(self.amplitude, n, "amplitude")
        self.slope = _per_region(self.slope, n, "slope")
        self.phase = _per_region(self.phase, n, "phase")
        self.offsets = _per_region(self.offsets, n, "offsets")
        self.mixing = np.eye(n) if self.mixing is None else np.asarray(self.mixing, float)
        _check_mixing(self.mixing, n)
        last = -1
        for cp in self.change_points:
            cp.mixing = np.asarray(cp.mixing, float)
            cp.offsets = _per_region(cp.offsets, n, "change point offsets")
            _check_mixing(cp.mixing, n)
            if not last < cp.month < self.n_months:
                raise ConfigError("change point months must increase strictly and stay below n_months")
            last = cp.month
        if self.shock < 0 or self.route_lag < 1:
            raise ConfigError("shock must be >= 0 and route_lag >= 1")
        if self.noise < 0 or not 0 <= self.coupling < 1:
            raise ConfigError("noise must be >= 0 and coupling in [0, 1)")


def _per_region(v, n, name):
    arr = np.broadcast_to(np.asarray(v, dtype=float), (n,)).copy() if np.ndim(v) == 0 else np.asarray(v, float)
    if arr.shape != (n,):
        raise ConfigError(f"{name} needs {n} entries, got {arr.shape}")
    return arr


def _check_mixing(m, n):
    if m.shape != (n, n) or (m < 0).any() or not np.allclose(m.sum(axis=1), 1.0, atol=1e-9):
        raise ConfigError("mixing matrices must be n x n, non-negative and row-stochastic")


def generate_synthetic(cfg: SyntheticConfig) -> TrafficCube:
    """Hourly cube: deterministic drive plus region-coupled stochastic deviations.

    drive(t) = amp * profile(hour) * (1 + slope * month) + offset_seg
    u(t)     = coupling * mixing_seg @ u(t-1) + noise(t)
    count    = round(max(0, drive(t) + u(t)))

    Shocks spread to other regions through the segment's mixing matrix, so a
    change point alters the one-step-ahead relation in a way a short input
    window cannot reveal. In flow mode the dropoff channel is instead
    ``mixing_seg @ pickups(t-1) + noise``.
    """
    n = cfg.n_regions
    start = datetime(cfg.start[0], cfg.start[1], 1)
    end_year, end_month = divmod(cfg.start[1] - 1 + cfg.n_months, 12)
    end = datetime(cfg.start[0] + end_year, end_month + 1, 1)
    n_hours = int((end - start) / timedelta(hours=1))
    month = _month_offsets(np.datetime64(start, "h"), n_hours)
    hour = np.arange(n_hours) % 24

    lag = np.array([0.0, cfg.dropoff_lag])
    angle = 2 * np.pi * (hour[:, None, None] - cfg.phase[None, :, None] - lag) / 24
    profile = 1 + cfg.daily_depth * np.sin(angle)
    trend = 1 + cfg.slope[None, :] * month[:, None]
    drive = cfg.amplitude[None, :, None] * profile * trend[:, :, None]

    segments = [(0, cfg.mixing, cfg.offsets)] + [(cp.month, cp.mixing, cp.offsets) for cp in cfg.change_points]
    seg_of_month = np.zeros(cfg.n_months, dtype=int)
    for k, (m0, _, _) in enumerate(segments):
        seg_of_month[m0:] = k
    seg = seg_of_month[month]
    offsets = np.stack([s[2] for s in segments])
    drive = drive + offsets[seg][:, :, None]

    rng = np.random.default_rng(cfg.seed)
    noise = rng.standard_normal((n_hours, n, 2)) * (cfg.noise * cfg.amplitude)[None, :, None]
    if cfg.flow:
        pick_drive = drive[:, :, 0] - offsets[seg]
        shocks = rng.standard_normal((n_hours, n)) * (cfg.shock * cfg.amplitude)[None, :]
        values = _flow_counts(pick_drive, offsets[seg], shocks, noise, cfg.coupling,
                              [s[1] for s in segments], seg, cfg.route_lag)
    else:
        values = _shock_counts(drive, noise, cfg.coupling, [s[1] for s in segments], seg)
    geometry = {"kind": "grid", "n_cols": cfg.grid_cols or n}
    return TrafficCube(values, start, list(range(n)), month, geometry)


def _shock_counts(drive, noise, coupling, mixing, seg):
    if coupling:
        mixers = [coupling * m for m in mixing]
        dev = np.empty_like(noise)
        prev = np.zeros(noise.shape[1:])
        for t in range(len(noise)):
            prev = mixers[seg[t]] @ prev + noise[t]
            dev[t] = prev
    else:
        dev = noise
    return np.rint(np.maximum(drive + dev, 0)).astype(np.int64)


def _flow_counts(pick_drive, offsets, shocks, noise, persistence, mixing, seg, lag):
    """Pickups with AR(1) demand shocks; dropoffs routed from pickups ``lag`` hours back."""
    demand = np.empty_like(pick_drive)
    prev = np.zeros(pick_drive.shape[1])
    for t in range(len(pick_drive)):
        prev = persistence * prev + shocks[t]
        demand[t] = pick_drive[t] + prev
    before = np.vstack([np.repeat(demand[:1], lag, axis=0), demand[:-lag]])
    routed = np.stack(mixing)[seg]  # [T, n, n]
    pick = demand + offsets + noise[:, :, 0]
    drop = np.einsum("tij,tj->ti", routed, before) + offsets + noise[:, :, 1]
    return np.rint(np.maximum(np.stack([pick, drop], axis=-1), 0)).astype(np.int64)
