"""Core domain types shared by every pipeline layer.

All types are immutable after construction (or treated as such) and safe to
share across worker processes. Tile indices are row-major, starting at 0 in
the grid origin corner, so column k of a signal file corresponds to tile k.
Region ids are 1-based. Time instants are integer ticks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

PROB_TOL = 1e-9


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise InputError(msg)


@dataclass(frozen=True)
class Grid:
    """Rectangular reference grid of n_tiles_x * n_tiles_y tiles."""

    n_tiles_x: int
    n_tiles_y: int
    tile_size_x: float
    tile_size_y: float
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        _check(self.n_tiles_x > 0 and self.n_tiles_y > 0, "grid must have positive tile counts")
        _check(self.tile_size_x > 0 and self.tile_size_y > 0, "tile sizes must be positive")

    @property
    def n_tiles(self) -> int:
        return self.n_tiles_x * self.n_tiles_y

    def tile_to_rowcol(self, tile: int) -> tuple[int, int]:
        self._check_tile(tile)
        return tile // self.n_tiles_x, tile % self.n_tiles_x

    def rowcol_to_tile(self, row: int, col: int) -> int:
        _check(0 <= row < self.n_tiles_y and 0 <= col < self.n_tiles_x,
               f"(row={row}, col={col}) outside grid {self.n_tiles_y}x{self.n_tiles_x}")
        return row * self.n_tiles_x + col

    def tile_center(self, tile: int) -> tuple[float, float]:
        """Geometric center of a tile in scenario coordinates."""
        row, col = self.tile_to_rowcol(tile)
        return (self.origin_x + (col + 0.5) * self.tile_size_x,
                self.origin_y + (row + 0.5) * self.tile_size_y)

    def tile_centers(self) -> np.ndarray:
        """(n_tiles, 2) array of all tile centers, indexed by tile."""
        cols = np.arange(self.n_tiles) % self.n_tiles_x
        rows = np.arange(self.n_tiles) // self.n_tiles_x
        return np.column_stack([self.origin_x + (cols + 0.5) * self.tile_size_x,
                                self.origin_y + (rows + 0.5) * self.tile_size_y])

    def tile_neighbors(self, tile: int, adjacency: str = "queen") -> set[int]:
        """Neighboring tiles of `tile` (excluding itself), respecting borders.

        adjacency: "rook" for the 4 orthogonal neighbors, "queen" to also
        include the 4 diagonal ones.
        """
        _check(adjacency in ("rook", "queen"), f"unknown adjacency {adjacency!r}")
        row, col = self.tile_to_rowcol(tile)
        if adjacency == "rook":
            offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
        else:
            offsets = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]
        out = set()
        for dr, dc in offsets:
            r, c = row + dr, col + dc
            if 0 <= r < self.n_tiles_y and 0 <= c < self.n_tiles_x:
                out.add(self.rowcol_to_tile(r, c))
        return out

    def tile_diagonal(self) -> float:
        return float(np.hypot(self.tile_size_x, self.tile_size_y))

    def _check_tile(self, tile: int) -> None:
        _check(0 <= tile < self.n_tiles, f"tile index {tile} out of range [0, {self.n_tiles})")


def tile_center(grid: Grid, tile: int) -> tuple[float, float]:
    return grid.tile_center(tile)


def tile_neighbors(grid: Grid, tile: int, adjacency: str = "queen") -> set[int]:
    return grid.tile_neighbors(tile, adjacency)


@dataclass(frozen=True)
class TimeAxis:
    """Regular sequence of integer time ticks t_start, t_start+dt, ... <= t_end."""

    t_start: int
    t_end: int
    t_increment: int

    def __post_init__(self):
        _check(self.t_increment > 0, "t_increment must be positive")
        _check(self.t_end > self.t_start, "t_end must exceed t_start")
        _check(self.n_times >= 2, "time axis needs at least two instants")

    @property
    def times(self) -> list[int]:
        return list(range(self.t_start, self.t_end + 1, self.t_increment))

    @property
    def n_times(self) -> int:
        return (self.t_end - self.t_start) // self.t_increment + 1

    def index_of(self, t: int) -> int:
        off = t - self.t_start
        _check(off >= 0 and off % self.t_increment == 0 and t <= self.t_end,
               f"time {t} not on axis [{self.t_start}, {self.t_end}] step {self.t_increment}")
        return off // self.t_increment

    def contains(self, t: int) -> bool:
        off = t - self.t_start
        return off >= 0 and t <= self.t_end and off % self.t_increment == 0


@dataclass(frozen=True)
class Event:
    """One network event: device `device_id` seen on `antenna_id` at tick `t`."""

    t: int
    antenna_id: str
    event_code: int
    device_id: str


@dataclass(frozen=True)
class EventLog:
    """Events sorted by (device_id, t); at most one event per (device, tick)."""

    events: tuple[Event, ...]

    @classmethod
    def from_events(cls, events) -> "EventLog":
        ordered = sorted(events, key=lambda e: (e.device_id, e.t))
        seen = set()
        for e in ordered:
            key = (e.device_id, e.t)
            _check(key not in seen, f"duplicate event for device {e.device_id} at t={e.t}")
            seen.add(key)
        return cls(tuple(ordered))

    def __len__(self) -> int:
        return len(self.events)

    def device_ids(self) -> list[str]:
        return sorted({e.device_id for e in self.events})

    def by_device(self) -> dict[str, list[Event]]:
        out: dict[str, list[Event]] = {}
        for e in self.events:
            out.setdefault(e.device_id, []).append(e)
        return out

    def antenna_ids(self) -> list[str]:
        return sorted({e.antenna_id for e in self.events})


@dataclass(frozen=True)
class SignalDominance:
    """Antenna-by-tile dominance matrix s(a, i) >= 0, column k = tile k."""

    antenna_ids: tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        _check(m.ndim == 2 and m.shape[0] == len(self.antenna_ids),
               "dominance matrix must have one row per antenna")
        _check(bool((m >= 0).all()), "dominance values must be nonnegative")
        object.__setattr__(self, "matrix", m)

    @property
    def n_tiles(self) -> int:
        return self.matrix.shape[1]

    def antenna_index(self) -> dict[str, int]:
        return {a: k for k, a in enumerate(self.antenna_ids)}

    def covered_tiles(self) -> np.ndarray:
        """Boolean mask of tiles with at least one positive-dominance antenna."""
        return self.matrix.sum(axis=0) > 0


@dataclass(frozen=True)
class RegionPartition:
    """Total mapping tile -> region id, region ids forming a contiguous 1..R."""

    tile_region: np.ndarray  # shape (n_tiles,), values in 1..R

    def __post_init__(self):
        arr = np.asarray(self.tile_region, dtype=int)
        _check(arr.ndim == 1 and arr.size > 0, "tile_region must be a nonempty vector")
        regions = np.unique(arr)
        _check(regions[0] == 1 and regions[-1] == len(regions),
               f"region ids must form a contiguous 1..R set, got {regions.tolist()}")
        object.__setattr__(self, "tile_region", arr)

    @property
    def n_tiles(self) -> int:
        return self.tile_region.size

    @property
    def n_regions(self) -> int:
        return int(self.tile_region.max())

    def region_ids(self) -> list[int]:
        return list(range(1, self.n_regions + 1))

    def region_of(self, tile: int) -> int:
        return int(self.tile_region[tile])


def _as_sparse_prob_arrays(times, tiles, probs):
    t = np.asarray(times, dtype=int)
    i = np.asarray(tiles, dtype=int)
    p = np.asarray(probs, dtype=float)
    _check(t.shape == i.shape == p.shape and t.ndim == 1, "sparse entries must be parallel 1-d arrays")
    order = np.lexsort((i, t))
    return t[order], i[order], p[order]


@dataclass(frozen=True)
class PosteriorLocation:
    """Sparse per-device location posterior: entries (time, tile, probL > 0)."""

    device_id: str
    times: np.ndarray
    tiles: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        t, i, p = _as_sparse_prob_arrays(self.times, self.tiles, self.probs)
        _check(bool((p >= 0).all()) and bool((p <= 1 + PROB_TOL).all()),
               f"device {self.device_id}: probL entries must lie in [0, 1]")
        keep = p > 0  # zero entries are dropped, not stored
        t, i, p = t[keep], i[keep], p[keep]
        for tt in np.unique(t):
            s = p[t == tt].sum()
            _check(abs(s - 1.0) <= PROB_TOL,
                   f"device {self.device_id}: probabilities at t={tt} sum to {s}, not 1")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "tiles", i)
        object.__setattr__(self, "probs", p)

    def time_instants(self) -> list[int]:
        return np.unique(self.times).tolist()

    def at(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """(tiles, probs) of the posterior at tick t."""
        mask = self.times == t
        _check(bool(mask.any()), f"device {self.device_id}: no posterior at t={t}")
        return self.tiles[mask], self.probs[mask]

    def dense(self, n_tiles: int, times=None) -> np.ndarray:
        """Dense (n_times, n_tiles) posterior matrix for the given tick list."""
        ts = self.time_instants() if times is None else list(times)
        out = np.zeros((len(ts), n_tiles))
        idx = {t: k for k, t in enumerate(ts)}
        for t, i, p in zip(self.times, self.tiles, self.probs):
            if int(t) in idx:
                out[idx[int(t)], int(i)] = p
        return out


@dataclass(frozen=True)
class JointPosterior:
    """Sparse joint posterior over consecutive ticks.

    Entries (time_from, time_to, tile_from, tile_to, probL > 0); for each
    (time_from, time_to) pair the entries sum to 1 and marginalize over
    tile_to to the location posterior at time_from.
    """

    device_id: str
    times_from: np.ndarray
    times_to: np.ndarray
    tiles_from: np.ndarray
    tiles_to: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        tf = np.asarray(self.times_from, dtype=int)
        tt = np.asarray(self.times_to, dtype=int)
        i = np.asarray(self.tiles_from, dtype=int)
        j = np.asarray(self.tiles_to, dtype=int)
        p = np.asarray(self.probs, dtype=float)
        _check(tf.shape == tt.shape == i.shape == j.shape == p.shape and tf.ndim == 1,
               "joint entries must be parallel 1-d arrays")
        _check(bool((p >= 0).all()), "joint probL entries must be nonnegative")
        keep = p > 0
        tf, tt, i, j, p = tf[keep], tt[keep], i[keep], j[keep], p[keep]
        deltas = np.unique(tt - tf)
        _check(deltas.size <= 1 and (deltas.size == 0 or deltas[0] > 0),
               "all transitions must span the same positive time increment")
        order = np.lexsort((j, i, tf))
        tf, tt, i, j, p = tf[order], tt[order], i[order], j[order], p[order]
        for t in np.unique(tf):
            s = p[tf == t].sum()
            _check(abs(s - 1.0) <= PROB_TOL,
                   f"device {self.device_id}: joint at time_from={t} sums to {s}, not 1")
        object.__setattr__(self, "times_from", tf)
        object.__setattr__(self, "times_to", tt)
        object.__setattr__(self, "tiles_from", i)
        object.__setattr__(self, "tiles_to", j)
        object.__setattr__(self, "probs", p)

    def pair_instants(self) -> list[tuple[int, int]]:
        pairs = sorted({(int(a), int(b)) for a, b in zip(self.times_from, self.times_to)})
        return pairs

    def at(self, time_from: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(tiles_from, tiles_to, probs) of the transition starting at time_from."""
        mask = self.times_from == time_from
        _check(bool(mask.any()), f"device {self.device_id}: no joint at time_from={time_from}")
        return self.tiles_from[mask], self.tiles_to[mask], self.probs[mask]

    def marginal_from(self, time_from: int, n_tiles: int) -> np.ndarray:
        """Marginal over tile_to: the location posterior at time_from."""
        i, _, p = self.at(time_from)
        out = np.zeros(n_tiles)
        np.add.at(out, i, p)
        return out


@dataclass(frozen=True)
class DuplicityTable:
    """Per-device probability dupP of being in 2:1 correspondence with its owner."""

    dup_probs: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for d, p in self.dup_probs.items():
            _check(0.0 <= p <= 1.0, f"device {d}: dupP={p} outside [0, 1]")

    def __getitem__(self, device_id: str) -> float:
        return self.dup_probs[device_id]

    def __len__(self) -> int:
        return len(self.dup_probs)

    def device_ids(self) -> list[str]:
        return sorted(self.dup_probs)


@dataclass(frozen=True)
class AntennaCells:
    """Antenna id -> closed cell polygon (list of (x, y) ring vertices)."""

    cells: dict[str, tuple[tuple[float, float], ...]]

    def __post_init__(self):
        for a, ring in self.cells.items():
            _check(len(ring) >= 4 and ring[0] == ring[-1],
                   f"antenna {a}: cell boundary must be a closed ring")

    def antenna_ids(self) -> list[str]:
        return sorted(self.cells)

    def neighbor_sets(self) -> dict[str, set[str]]:
        """Antennas whose cells intersect or touch (every antenna neighbors itself)."""
        from shapely.geometry import Polygon

        polys = {a: Polygon(ring) for a, ring in self.cells.items()}
        ids = self.antenna_ids()
        out: dict[str, set[str]] = {a: {a} for a in ids}
        for k, a in enumerate(ids):
            for b in ids[k + 1:]:
                if polys[a].intersects(polys[b]):
                    out[a].add(b)
                    out[b].add(a)
        return out


def _check_half_integer(values: np.ndarray, what: str) -> None:
    _check(bool((values >= 0).all()), f"{what} values must be nonnegative")
    doubled = values * 2
    _check(bool((doubled == np.round(doubled)).all()), f"{what} values must be multiples of 0.5")


@dataclass(frozen=True)
class CountDraws:
    """Monte-Carlo draws of detected counts: rows (time, region, N, iter)."""

    times: np.ndarray
    regions: np.ndarray
    values: np.ndarray
    iters: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=int)
        r = np.asarray(self.regions, dtype=int)
        v = np.asarray(self.values, dtype=float)
        k = np.asarray(self.iters, dtype=int)
        _check(t.shape == r.shape == v.shape == k.shape and t.ndim == 1,
               "count draws must be parallel 1-d arrays")
        _check_half_integer(v, "detected-count")
        if t.size:
            n = int(k.max())
            pair_key = t.astype(np.int64) * (int(r.max()) + 1) + r
            _, counts = np.unique(pair_key, return_counts=True)
            _check(bool((counts == n).all()),
                   "count draws must hold exactly n rows per (time, region)")
        order = np.lexsort((k, r, t))
        object.__setattr__(self, "times", t[order])
        object.__setattr__(self, "regions", r[order])
        object.__setattr__(self, "values", v[order])
        object.__setattr__(self, "iters", k[order])

    @property
    def n_draws(self) -> int:
        return int(self.iters.max()) if self.iters.size else 0

    def time_instants(self) -> list[int]:
        return np.unique(self.times).tolist()

    def region_ids(self) -> list[int]:
        return np.unique(self.regions).tolist()

    def matrix(self, time: int) -> np.ndarray:
        """(n_regions, n_draws) array of N at one tick, indexed [region-1, iter-1]."""
        mask = self.times == time
        _check(bool(mask.any()), f"no count draws at t={time}")
        regions = self.region_ids()
        out = np.zeros((len(regions), self.n_draws))
        out[self.regions[mask] - 1, self.iters[mask] - 1] = self.values[mask]
        return out


@dataclass(frozen=True)
class ODDraws:
    """Monte-Carlo draws of origin-destination flows between region pairs."""

    times_from: np.ndarray
    times_to: np.ndarray
    regions_from: np.ndarray
    regions_to: np.ndarray
    values: np.ndarray
    iters: np.ndarray

    def __post_init__(self):
        tf = np.asarray(self.times_from, dtype=int)
        tt = np.asarray(self.times_to, dtype=int)
        rf = np.asarray(self.regions_from, dtype=int)
        rt = np.asarray(self.regions_to, dtype=int)
        v = np.asarray(self.values, dtype=float)
        k = np.asarray(self.iters, dtype=int)
        _check(tf.shape == tt.shape == rf.shape == rt.shape == v.shape == k.shape and tf.ndim == 1,
               "OD draws must be parallel 1-d arrays")
        _check_half_integer(v, "OD flow")
        order = np.lexsort((k, rt, rf, tf))
        for name, arr in (("times_from", tf), ("times_to", tt), ("regions_from", rf),
                          ("regions_to", rt), ("values", v), ("iters", k)):
            object.__setattr__(self, name, arr[order])

    @property
    def n_draws(self) -> int:
        return int(self.iters.max()) if self.iters.size else 0

    @property
    def n_regions(self) -> int:
        return int(max(self.regions_from.max(), self.regions_to.max())) if self.values.size else 0

    def pair_instants(self) -> list[tuple[int, int]]:
        return sorted({(int(a), int(b)) for a, b in zip(self.times_from, self.times_to)})

    def matrices(self, time_from: int) -> np.ndarray:
        """(n_regions, n_regions, n_draws) flow array for one tick pair."""
        mask = self.times_from == time_from
        _check(bool(mask.any()), f"no OD draws at time_from={time_from}")
        nr = self.n_regions
        out = np.zeros((nr, nr, self.n_draws))
        out[self.regions_from[mask] - 1, self.regions_to[mask] - 1, self.iters[mask] - 1] = self.values[mask]
        return out


STATS_COLUMNS = ("Mean", "Mode", "Median", "Min", "Max", "Q1", "Q3",
                 "IQR", "SD", "CV", "CI_LOW", "CI_HIGH")


@dataclass(frozen=True)
class StatsRow:
    """Descriptive statistics of one draw distribution (12 columns)."""

    mean: float
    mode: float
    median: float
    min: float
    max: float
    q1: float
    q3: float
    iqr: float
    sd: float
    cv: float
    ci_low: float
    ci_high: float

    def __post_init__(self):
        _check(self.min <= self.q1 <= self.median <= self.q3 <= self.max,
               "stats must satisfy Min <= Q1 <= Median <= Q3 <= Max")
        _check(abs(self.iqr - (self.q3 - self.q1)) <= 1e-9, "IQR must equal Q3 - Q1")
        _check(self.ci_low <= self.ci_high, "CI_LOW must not exceed CI_HIGH")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.mean, self.mode, self.median, self.min, self.max, self.q1,
                self.q3, self.iqr, self.sd, self.cv, self.ci_low, self.ci_high)


@dataclass(frozen=True)
class RegisterPopulation:
    """Register-based population count per region at the initial time."""

    counts: dict[int, int]

    def __post_init__(self):
        for r, n in self.counts.items():
            _check(n >= 0, f"region {r}: register count must be nonnegative")

    def __getitem__(self, region: int) -> int:
        return self.counts[region]

    def region_ids(self) -> list[int]:
        return sorted(self.counts)


@dataclass(frozen=True)
class PenetrationRate:
    """Devices-per-individual ratio per region."""

    rates: dict[int, float]

    def __post_init__(self):
        for r, v in self.rates.items():
            _check(v > 0, f"region {r}: penetration rate must be positive")

    def __getitem__(self, region: int) -> float:
        return self.rates[region]

    def region_ids(self) -> list[int]:
        return sorted(self.rates)
