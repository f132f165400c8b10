"""Readers and writers for every CSV interface between the pipeline layers.

Each schema has a fixed header that must match cell-by-cell after whitespace
trimming. Parsing is locale-independent: '.' decimal separator, ',' field
separator, no thousands grouping. Numbers are written in their shortest
round-tripping decimal form, so write/read round-trips are bit-exact.
"""

from __future__ import annotations

import csv
import io
import xml.etree.ElementTree as ET
import zipfile
from pathlib import Path

import numpy as np
from shapely import wkt as shapely_wkt
from shapely.geometry import Polygon

from .datamodel import (
    STATS_COLUMNS,
    AntennaCells,
    CountDraws,
    DuplicityTable,
    Event,
    EventLog,
    Grid,
    JointPosterior,
    ODDraws,
    PenetrationRate,
    PosteriorLocation,
    RegionPartition,
    RegisterPopulation,
    SignalDominance,
    StatsRow,
    TimeAxis,
)
from .errors import InputError

EVENTS_HEADER = ["t", "Antenna ID", "Event Code", "Device ID"]
POSTERIOR_HEADER = ["time", "tile", "probL"]
JOINT_HEADER = ["time_from", "time_to", "tile_from", "tile_to", "probL"]
DUPLICITY_HEADER = ["deviceID", "dupP"]
REGISTER_HEADER = ["region", "NO"]
RATE_HEADER = ["region", "pntRate"]
REGIONS_HEADER = ["tile", "region"]
ANTENNA_CELLS_HEADER = ["AntennaId", "Cell Coordinates"]
COUNT_DRAWS_HEADER = ["time", "region", "N", "iter"]
OD_DRAWS_HEADER = ["time_from", "time_to", "region_from", "region_to", "Nnet", "iter"]
GRID_HEADER = ["origin_x", "origin_y", "tile_size_x", "tile_size_y", "n_tiles_x", "n_tiles_y"]

POSTERIOR_PREFIX = "postLocDevice"
JOINT_PREFIX = "postLocJointProbDevice"

# Tolerance for per-tick probability sums on *read*; cleanly written files are
# exact, hand-edited ones within this drift are renormalized.
READ_SUM_TOL = 1e-6


def fmt_num(v: float) -> str:
    """Shortest decimal that round-trips; integral values without a trailing .0."""
    f = float(v)
    if f.is_integer() and abs(f) < 1e16:
        return str(int(f))
    return repr(f)


def _open_rows(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"input file not found: {path}")
    with open(path, "r", newline="", encoding="utf-8") as fh:
        yield from csv.reader(fh)


def _read_table(path, header: list[str]):
    """Yield (line_number, row) for data rows after validating the header."""
    rows = _open_rows(path)
    try:
        first = next(rows)
    except StopIteration:
        raise InputError(f"{path}: empty file, expected header {','.join(header)!r}") from None
    found = [c.strip() for c in first]
    if found != header:
        raise InputError(f"{path}: bad header: expected {header!r}, found {found!r}")
    for lineno, row in enumerate(rows, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        yield lineno, [c.strip() for c in row]


def _parse_int(cell: str, path, lineno: int, what: str) -> int:
    try:
        return int(cell)
    except ValueError:
        raise InputError(f"{path}:{lineno}: {what} must be an integer, got {cell!r}") from None


def _parse_float(cell: str, path, lineno: int, what: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise InputError(f"{path}:{lineno}: {what} must be a number, got {cell!r}") from None


def _require_cols(row: list[str], n: int, path, lineno: int) -> None:
    if len(row) != n:
        raise InputError(f"{path}:{lineno}: expected {n} columns, found {len(row)}")


def _writer(path):
    return open(path, "w", newline="", encoding="utf-8")


# ---------------------------------------------------------------------------
# events


def read_events(path) -> EventLog:
    """Read a network-event file; events come back sorted by (device, t)."""
    events = []
    for lineno, row in _read_table(path, EVENTS_HEADER):
        _require_cols(row, 4, path, lineno)
        events.append(Event(
            t=_parse_int(row[0], path, lineno, "t"),
            antenna_id=row[1],
            event_code=_parse_int(row[2], path, lineno, "Event Code"),
            device_id=row[3],
        ))
    return EventLog.from_events(events)


def write_events(path, log: EventLog) -> None:
    with _writer(path) as fh:
        w = csv.writer(fh)
        w.writerow(EVENTS_HEADER)
        for e in log.events:
            w.writerow([e.t, e.antenna_id, e.event_code, e.device_id])


# ---------------------------------------------------------------------------
# signal dominance


def read_signal(path, grid: Grid) -> SignalDominance:
    """Read the antenna-by-tile dominance matrix; column k maps to tile k."""
    rows = _open_rows(path)
    try:
        header = [c.strip() for c in next(rows)]
    except StopIteration:
        raise InputError(f"{path}: empty signal file") from None
    n = grid.n_tiles
    if len(header) != n + 1:
        raise InputError(
            f"{path}: signal file has {len(header) - 1} tile columns "
            f"but the grid has {n} tiles")
    expected = ["Antenna ID"] + [f"Tile{k}" for k in range(n)]
    if header != expected:
        bad = next(k for k, (e, f) in enumerate(zip(expected, header)) if e != f)
        raise InputError(f"{path}: bad header at column {bad}: expected {expected[bad]!r}, "
                         f"found {header[bad]!r}")
    antenna_ids = []
    matrix = []
    for lineno, row in enumerate(rows, start=2):
        row = [c.strip() for c in row]
        if not row or (len(row) == 1 and not row[0]):
            continue
        _require_cols(row, n + 1, path, lineno)
        antenna_ids.append(row[0])
        matrix.append([_parse_float(c, path, lineno, f"Tile{k}") for k, c in enumerate(row[1:])])
    return SignalDominance(tuple(antenna_ids), np.asarray(matrix, dtype=float).reshape(len(antenna_ids), n))


def write_signal(path, signal: SignalDominance) -> None:
    with _writer(path) as fh:
        w = csv.writer(fh)
        w.writerow(["Antenna ID"] + [f"Tile{k}" for k in range(signal.n_tiles)])
        for a, row in zip(signal.antenna_ids, signal.matrix):
            w.writerow([a] + [fmt_num(v) for v in row])


# ---------------------------------------------------------------------------
# posterior location / joint posterior (one file per device)


def posterior_path(directory, device_id: str, prefix: str = POSTERIOR_PREFIX) -> Path:
    return Path(directory) / f"{prefix}{device_id}.csv"


def joint_path(directory, device_id: str, prefix: str = JOINT_PREFIX) -> Path:
    return Path(directory) / f"{prefix}{device_id}.csv"


def write_posterior(path, posterior: PosteriorLocation) -> None:
    with _writer(path) as fh:
        w = csv.writer(fh)
        w.writerow(POSTERIOR_HEADER)
        for t, i, p in zip(posterior.times, posterior.tiles, posterior.probs):
            if p > 0:
                w.writerow([t, i, fmt_num(p)])


def read_posterior(path, device_id: str | None = None) -> PosteriorLocation:
    times, tiles, probs = [], [], []
    for lineno, row in _read_table(path, POSTERIOR_HEADER):
        _require_cols(row, 3, path, lineno)
        times.append(_parse_int(row[0], path, lineno, "time"))
        tiles.append(_parse_int(row[1], path, lineno, "tile"))
        probs.append(_parse_float(row[2], path, lineno, "probL"))
    t = np.asarray(times, dtype=int)
    p = np.asarray(probs, dtype=float)
    for tick in np.unique(t):
        s = p[t == tick].sum()
        if abs(s - 1.0) > READ_SUM_TOL:
            raise InputError(f"{path}: probabilities at time {tick} sum to {s}, outside 1+-{READ_SUM_TOL}")
        if s != 1.0 and abs(s - 1.0) > 1e-12:
            p[t == tick] /= s
    if device_id is None:
        device_id = Path(path).stem
    return PosteriorLocation(device_id, t, np.asarray(tiles, dtype=int), p)


def write_joint(path, joint: JointPosterior) -> None:
    with _writer(path) as fh:
        w = csv.writer(fh)
        w.writerow(JOINT_HEADER)
        for tf, tt, i, j, p in zip(joint.times_from, joint.times_to,
                                   joint.tiles_from, joint.tiles_to, joint.probs):
            if p > 0:
                w.writerow([tf, tt, i, j, fmt_num(p)])


def read_joint(path, device_id: str | None = None, time_axis: TimeAxis | None = None) -> JointPosterior:
    tf, tt, ti, tj, probs = [], [], [], [], []
    for lineno, row in _read_table(path, JOINT_HEADER):
        _require_cols(row, 5, path, lineno)
        a = _parse_int(row[0], path, lineno, "time_from")
        b = _parse_int(row[1], path, lineno, "time_to")
        if time_axis is not None and b - a != time_axis.t_increment:
            raise InputError(
                f"{path}:{lineno}: time_to={b} is not the successor of time_from={a} "
                f"(increment {time_axis.t_increment})")
        tf.append(a)
        tt.append(b)
        ti.append(_parse_int(row[2], path, lineno, "tile_from"))
        tj.append(_parse_int(row[3], path, lineno, "tile_to"))
        probs.append(_parse_float(row[4], path, lineno, "probL"))
    tf = np.asarray(tf, dtype=int)
    tt = np.asarray(tt, dtype=int)
    deltas = np.unique(tt - tf)
    if deltas.size > 1 or (deltas.size == 1 and deltas[0] <= 0):
        raise InputError(f"{path}: transitions must all span the same positive increment, found {deltas.tolist()}")
    p = np.asarray(probs, dtype=float)
    for tick in np.unique(tf):
        s = p[tf == tick].sum()
        if abs(s - 1.0) > READ_SUM_TOL:
            raise InputError(f"{path}: joint at time_from {tick} sums to {s}, outside 1+-{READ_SUM_TOL}")
        if s != 1.0 and abs(s - 1.0) > 1e-12:
            p[tf == tick] /= s
    if device_id is None:
        device_id = Path(path).stem
    return JointPosterior(device_id, tf, tt, np.asarray(ti, dtype=int), np.asarray(tj, dtype=int), p)


# ---------------------------------------------------------------------------
# duplicity


def write_duplicity(path, table: DuplicityTable) -> None:
    with _writer(path) as fh:
        w = csv.writer(fh)
        w.writerow(DUPLICITY_HEADER)
        for d in table.device_ids():
            w.writerow([d, fmt_num(table[d])])


def read_duplicity(path) -> DuplicityTable:
    probs = {}
    for lineno, row in _read_table(path, DUPLICITY_HEADER):
        _require_cols(row, 2, path, lineno)
        p = _parse_float(row[1], path, lineno, "dupP")
        if not 0.0 <= p <= 1.0:
            raise InputError(f"{path}:{lineno}: dupP={p} outside [0, 1]")
        if row[0] in probs:
            raise InputError(f"{path}:{lineno}: duplicate device {row[0]!r}")
        probs[row[0]] = p
    return DuplicityTable(probs)


# ---------------------------------------------------------------------------
# register population / penetration rate / regions / antenna cells


def read_register(path) -> RegisterPopulation:
    counts = {}
    for lineno, row in _read_table(path, REGISTER_HEADER):
        _require_cols(row, 2, path, lineno)
        counts[_parse_int(row[0], path, lineno, "region")] = _parse_int(row[1], path, lineno, "NO")
    return RegisterPopulation(counts)


def write_register(path, register: RegisterPopulation) -> None:
    with _writer(path) as fh:
        w = csv.writer(fh)
        w.writerow(REGISTER_HEADER)
        for r in register.region_ids():
            w.writerow([r, register[r]])


def read_penetration_rate(path) -> PenetrationRate:
    rates = {}
    for lineno, row in _read_table(path, RATE_HEADER):
        _require_cols(row, 2, path, lineno)
        rates[_parse_int(row[0], path, lineno, "region")] = _parse_float(row[1], path, lineno, "pntRate")
    return PenetrationRate(rates)


def write_penetration_rate(path, rate: PenetrationRate) -> None:
    with _writer(path) as fh:
        w = csv.writer(fh)
        w.writerow(RATE_HEADER)
        for r in rate.region_ids():
            w.writerow([r, fmt_num(rate[r])])


def read_regions(path, grid: Grid) -> RegionPartition:
    """Read the tile->region partition; it must cover every grid tile."""
    tile_region = np.zeros(grid.n_tiles, dtype=int)
    seen = np.zeros(grid.n_tiles, dtype=bool)
    for lineno, row in _read_table(path, REGIONS_HEADER):
        _require_cols(row, 2, path, lineno)
        tile = _parse_int(row[0], path, lineno, "tile")
        if not 0 <= tile < grid.n_tiles:
            raise InputError(f"{path}:{lineno}: tile {tile} outside grid with {grid.n_tiles} tiles")
        if seen[tile]:
            raise InputError(f"{path}:{lineno}: tile {tile} assigned to more than one region")
        seen[tile] = True
        tile_region[tile] = _parse_int(row[1], path, lineno, "region")
    if not seen.all():
        missing = int(np.flatnonzero(~seen)[0])
        raise InputError(f"{path}: region partition must cover every tile; tile {missing} is unassigned")
    return RegionPartition(tile_region)


def write_regions(path, regions: RegionPartition) -> None:
    with _writer(path) as fh:
        w = csv.writer(fh)
        w.writerow(REGIONS_HEADER)
        for tile, region in enumerate(regions.tile_region):
            w.writerow([tile, region])


def read_antenna_cells(path) -> AntennaCells:
    cells = {}
    for lineno, row in _read_table(path, ANTENNA_CELLS_HEADER):
        _require_cols(row, 2, path, lineno)
        try:
            poly = shapely_wkt.loads(row[1])
        except Exception as exc:
            raise InputError(f"{path}:{lineno}: bad WKT geometry: {exc}") from None
        if poly.geom_type != "Polygon":
            raise InputError(f"{path}:{lineno}: expected a POLYGON, got {poly.geom_type}")
        cells[row[0]] = tuple((float(x), float(y)) for x, y in poly.exterior.coords)
    return AntennaCells(cells)


def write_antenna_cells(path, cells: AntennaCells) -> None:
    with _writer(path) as fh:
        w = csv.writer(fh)
        w.writerow(ANTENNA_CELLS_HEADER)
        for a in cells.antenna_ids():
            w.writerow([a, Polygon(cells.cells[a]).wkt])


# ---------------------------------------------------------------------------
# grid parameters / simulation parameters


def read_grid(path) -> Grid:
    rows = list(_read_table(path, GRID_HEADER))
    if len(rows) != 1:
        raise InputError(f"{path}: grid file must hold exactly one data row, found {len(rows)}")
    lineno, row = rows[0]
    _require_cols(row, 6, path, lineno)
    return Grid(
        origin_x=_parse_float(row[0], path, lineno, "origin_x"),
        origin_y=_parse_float(row[1], path, lineno, "origin_y"),
        tile_size_x=_parse_float(row[2], path, lineno, "tile_size_x"),
        tile_size_y=_parse_float(row[3], path, lineno, "tile_size_y"),
        n_tiles_x=_parse_int(row[4], path, lineno, "n_tiles_x"),
        n_tiles_y=_parse_int(row[5], path, lineno, "n_tiles_y"),
    )


def write_grid(path, grid: Grid) -> None:
    with _writer(path) as fh:
        w = csv.writer(fh)
        w.writerow(GRID_HEADER)
        w.writerow([fmt_num(grid.origin_x), fmt_num(grid.origin_y),
                    fmt_num(grid.tile_size_x), fmt_num(grid.tile_size_y),
                    grid.n_tiles_x, grid.n_tiles_y])


def read_simulation_params(path) -> TimeAxis:
    """Read start_time, end_time, time_increment from the simulation XML file."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"input file not found: {path}")
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise InputError(f"{path}: malformed XML: {exc}") from None
    values = {}
    for tag in ("start_time", "end_time", "time_increment"):
        node = root.find(f".//{tag}")
        if node is None or node.text is None:
            raise InputError(f"{path}: missing <{tag}> element")
        try:
            values[tag] = int(node.text.strip())
        except ValueError:
            raise InputError(f"{path}: <{tag}> must be an integer, got {node.text!r}") from None
    return TimeAxis(values["start_time"], values["end_time"], values["time_increment"])


def write_simulation_params(path, axis: TimeAxis) -> None:
    root = ET.Element("simulation")
    for tag, value in (("start_time", axis.t_start), ("end_time", axis.t_end),
                       ("time_increment", axis.t_increment)):
        ET.SubElement(root, tag).text = str(value)
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)


# ---------------------------------------------------------------------------
# count draws / OD draws


def write_count_draws(path, draws: CountDraws) -> None:
    with _writer(path) as fh:
        w = csv.writer(fh)
        w.writerow(COUNT_DRAWS_HEADER)
        for t, r, v, k in zip(draws.times, draws.regions, draws.values, draws.iters):
            w.writerow([t, r, fmt_num(v), k])


def read_count_draws(path) -> CountDraws:
    times, regions, values, iters = [], [], [], []
    for lineno, row in _read_table(path, COUNT_DRAWS_HEADER):
        _require_cols(row, 4, path, lineno)
        times.append(_parse_int(row[0], path, lineno, "time"))
        regions.append(_parse_int(row[1], path, lineno, "region"))
        values.append(_parse_float(row[2], path, lineno, "N"))
        iters.append(_parse_int(row[3], path, lineno, "iter"))
    return CountDraws(np.asarray(times, dtype=int), np.asarray(regions, dtype=int),
                      np.asarray(values, dtype=float), np.asarray(iters, dtype=int))


def write_od_draws(path, draws: ODDraws) -> None:
    with _writer(path) as fh:
        w = csv.writer(fh)
        w.writerow(OD_DRAWS_HEADER)
        for tf, tt, rf, rt, v, k in zip(draws.times_from, draws.times_to, draws.regions_from,
                                        draws.regions_to, draws.values, draws.iters):
            w.writerow([tf, tt, rf, rt, fmt_num(v), k])


def read_od_draws(path) -> ODDraws:
    """Read OD draws from a CSV file, or from a zip archive holding one CSV."""
    path = Path(path)
    if path.suffix == ".zip":
        if not path.exists():
            raise InputError(f"input file not found: {path}")
        with zipfile.ZipFile(path) as zf:
            names = [n for n in zf.namelist() if n.endswith(".csv")]
            if len(names) != 1:
                raise InputError(f"{path}: zip archive must hold exactly one CSV, found {names}")
            text = zf.read(names[0]).decode("utf-8")
        return _parse_od_rows(path, csv.reader(io.StringIO(text)))
    return _parse_od_rows(path, _open_rows(path))


def _parse_od_rows(path, rows) -> ODDraws:
    try:
        header = [c.strip() for c in next(rows)]
    except StopIteration:
        raise InputError(f"{path}: empty file") from None
    if header != OD_DRAWS_HEADER:
        raise InputError(f"{path}: bad header: expected {OD_DRAWS_HEADER!r}, found {header!r}")
    cols: tuple[list, ...] = ([], [], [], [], [], [])
    for lineno, row in enumerate(rows, start=2):
        row = [c.strip() for c in row]
        if not row or (len(row) == 1 and not row[0]):
            continue
        _require_cols(row, 6, path, lineno)
        for k in (0, 1, 2, 3, 5):
            cols[k].append(_parse_int(row[k], path, lineno, OD_DRAWS_HEADER[k]))
        cols[4].append(_parse_float(row[4], path, lineno, "Nnet"))
    return ODDraws(np.asarray(cols[0], dtype=int), np.asarray(cols[1], dtype=int),
                   np.asarray(cols[2], dtype=int), np.asarray(cols[3], dtype=int),
                   np.asarray(cols[4], dtype=float), np.asarray(cols[5], dtype=int))


# ---------------------------------------------------------------------------
# descriptive statistics tables


def write_stats(path, rows: dict, key_columns: tuple[str, ...] = ("region",)) -> None:
    """Write a stats table keyed by one or more id columns (e.g. region)."""
    with _writer(path) as fh:
        w = csv.writer(fh)
        w.writerow(list(key_columns) + list(STATS_COLUMNS))
        for key in sorted(rows):
            key_cells = list(key) if isinstance(key, tuple) else [key]
            w.writerow(key_cells + [fmt_num(v) for v in rows[key].as_tuple()])


def read_stats(path, key_columns: tuple[str, ...] = ("region",)) -> dict:
    expected = list(key_columns) + list(STATS_COLUMNS)
    out = {}
    for lineno, row in _read_table(path, expected):
        _require_cols(row, len(expected), path, lineno)
        nk = len(key_columns)
        key_cells = tuple(_parse_int(c, path, lineno, "key") for c in row[:nk])
        key = key_cells[0] if nk == 1 else key_cells
        stats = [_parse_float(c, path, lineno, name) for c, name in zip(row[nk:], STATS_COLUMNS)]
        out[key] = StatsRow(*stats)
    return out
