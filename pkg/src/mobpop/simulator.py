"""Synthetic scenario generator.

Stands in for the data-acquisition layer: persons perform a lattice random
walk over the grid, each carrying 0, 1 or 2 devices; every device emits one
event per tick on an antenna sampled proportionally to signal dominance at
the person's tile. Everything is a deterministic function of the scenario
seed, and the ground truth is kept so estimates can be checked against it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .datamodel import (
    AntennaCells,
    Event,
    EventLog,
    Grid,
    PenetrationRate,
    RegionPartition,
    RegisterPopulation,
    SignalDominance,
    TimeAxis,
)
from .errors import InputError


@dataclass(frozen=True)
class Antenna:
    """Antenna with a logistic path-loss dominance profile."""

    antenna_id: str
    x: float
    y: float
    power: float = 200.0            # distance (m) at which dominance drops to 0.5
    path_loss_exponent: float = 4.0

    def __post_init__(self):
        if self.power <= 0 or self.path_loss_exponent <= 0:
            raise InputError(f"antenna {self.antenna_id}: power and path-loss exponent must be positive")


def signal_dominance(antenna: Antenna, tile_center: tuple[float, float]) -> float:
    """Dominance of one antenna at a point: 1 / (1 + (d/d0)^gamma), in (0, 1]."""
    d = float(np.hypot(tile_center[0] - antenna.x, tile_center[1] - antenna.y))
    return 1.0 / (1.0 + (d / antenna.power) ** antenna.path_loss_exponent)


@dataclass(frozen=True)
class Scenario:
    """Full parameterization of one synthetic run."""

    grid: Grid
    time_axis: TimeAxis
    antennas: tuple[Antenna, ...]
    n_persons: int
    prob_one_device: float = 0.4
    prob_two_devices: float = 0.2
    rng_seed: int = 0
    n_regions: int = 3
    min_dominance: float = 0.05  # dominance below this is treated as no coverage

    def __post_init__(self):
        if not (0 <= self.prob_one_device <= 1 and 0 <= self.prob_two_devices <= 1
                and self.prob_one_device + self.prob_two_devices <= 1):
            raise InputError("device-count probabilities must be in [0,1] and sum to at most 1")
        if self.n_persons < 0:
            raise InputError("n_persons must be nonnegative")
        xmax = self.grid.origin_x + self.grid.n_tiles_x * self.grid.tile_size_x
        ymax = self.grid.origin_y + self.grid.n_tiles_y * self.grid.tile_size_y
        for a in self.antennas:
            if not (self.grid.origin_x <= a.x <= xmax and self.grid.origin_y <= a.y <= ymax):
                raise InputError(f"antenna {a.antenna_id} lies outside the grid bounds")

    def regions(self) -> RegionPartition:
        """Partition the grid into n_regions contiguous horizontal bands."""
        rows = np.arange(self.grid.n_tiles) // self.grid.n_tiles_x
        bands = 1 + (rows * self.n_regions) // self.grid.n_tiles_y
        return RegionPartition(bands)


@dataclass(frozen=True)
class GroundTruth:
    """What actually happened: trajectories, ownership, per-region counts."""

    grid: Grid
    time_axis: TimeAxis
    person_tiles: np.ndarray          # (n_persons, n_times) tile index per tick
    device_owner: dict[str, int]      # device id -> person index
    persons_devices: tuple[int, ...]  # person index -> number of devices carried

    def trajectory_xy(self, person: int) -> np.ndarray:
        """(n_times, 2) coordinates of one person's path (tile centers)."""
        centers = self.grid.tile_centers()
        return centers[self.person_tiles[person]]

    def duplicity_of(self, device_id: str) -> int:
        """1 if the owner carries two devices, else 0."""
        return 1 if self.persons_devices[self.device_owner[device_id]] == 2 else 0


def true_counts(ground_truth: GroundTruth, regions: RegionPartition, time: int,
                detected_only: bool = False) -> dict[int, int]:
    """Per-region person counts at one tick, tallied from the trajectories.

    With detected_only, count just the persons carrying at least one device.
    """
    k = ground_truth.time_axis.index_of(time)
    counts = {r: 0 for r in regions.region_ids()}
    for person, tiles in enumerate(ground_truth.person_tiles):
        if detected_only and ground_truth.persons_devices[person] == 0:
            continue
        counts[regions.region_of(int(tiles[k]))] += 1
    return counts


@dataclass(frozen=True)
class SimulationResult:
    events: EventLog
    signal: SignalDominance
    antenna_cells: AntennaCells
    ground_truth: GroundTruth
    scenario: Scenario = field(repr=False)

    def regions(self) -> RegionPartition:
        return self.scenario.regions()


def _dominance_matrix(scenario: Scenario) -> np.ndarray:
    centers = scenario.grid.tile_centers()
    m = np.zeros((len(scenario.antennas), scenario.grid.n_tiles))
    for k, a in enumerate(scenario.antennas):
        d = np.hypot(centers[:, 0] - a.x, centers[:, 1] - a.y)
        m[k] = 1.0 / (1.0 + (d / a.power) ** a.path_loss_exponent)
    m[m < scenario.min_dominance] = 0.0
    return m


def _antenna_cells(scenario: Scenario, dominance: np.ndarray) -> AntennaCells:
    """Coverage bounding box per antenna.

    The box spans every tile the antenna covers, so two antennas that can both
    serve a tile always get intersecting cells and the downstream
    neighboring-antenna pruning never separates same-person devices.
    """
    grid = scenario.grid
    cells = {}
    for k, a in enumerate(scenario.antennas):
        covered = np.flatnonzero(dominance[k] > 0)
        if covered.size:
            rows = covered // grid.n_tiles_x
            cols = covered % grid.n_tiles_x
            x0 = grid.origin_x + cols.min() * grid.tile_size_x
            x1 = grid.origin_x + (cols.max() + 1) * grid.tile_size_x
            y0 = grid.origin_y + rows.min() * grid.tile_size_y
            y1 = grid.origin_y + (rows.max() + 1) * grid.tile_size_y
        else:
            x0, x1 = a.x - grid.tile_size_x / 2, a.x + grid.tile_size_x / 2
            y0, y1 = a.y - grid.tile_size_y / 2, a.y + grid.tile_size_y / 2
        cells[a.antenna_id] = ((x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0))
    return AntennaCells(cells)


def simulate(scenario: Scenario) -> SimulationResult:
    """Run one scenario end to end; fully determined by scenario.rng_seed."""
    if not scenario.antennas:
        raise InputError("scenario needs at least one antenna")
    grid = scenario.grid
    axis = scenario.time_axis
    dominance = _dominance_matrix(scenario)
    tile_cover = dominance.sum(axis=0)
    if (tile_cover <= 0).any():
        uncovered = int(np.flatnonzero(tile_cover <= 0)[0])
        raise InputError(f"no antenna covers tile {uncovered}; add antennas or lower min_dominance")

    rng = np.random.default_rng(scenario.rng_seed)
    n_times = axis.n_times

    # lattice random walk: uniform choice among the tile itself and its queen neighbors
    moves = []
    for tile in range(grid.n_tiles):
        moves.append(np.asarray(sorted(grid.tile_neighbors(tile, "queen") | {tile}), dtype=int))
    person_tiles = np.zeros((scenario.n_persons, n_times), dtype=int)
    for person in range(scenario.n_persons):
        tile = int(rng.integers(grid.n_tiles))
        person_tiles[person, 0] = tile
        for k in range(1, n_times):
            options = moves[tile]
            tile = int(options[rng.integers(len(options))])
            person_tiles[person, k] = tile

    # device ownership: 0, 1 or 2 devices per person
    persons_devices = []
    for person in range(scenario.n_persons):
        u = rng.random()
        if u < scenario.prob_two_devices:
            persons_devices.append(2)
        elif u < scenario.prob_two_devices + scenario.prob_one_device:
            persons_devices.append(1)
        else:
            persons_devices.append(0)
    device_owner: dict[str, int] = {}
    for person, n_dev in enumerate(persons_devices):
        for _ in range(n_dev):
            device_owner[f"D{len(device_owner) + 1:04d}"] = person

    # one event per device per tick; antenna sampled proportionally to dominance
    cum = dominance / tile_cover
    cum = np.cumsum(cum, axis=0)
    events = []
    antenna_ids = [a.antenna_id for a in scenario.antennas]
    for device_id in sorted(device_owner):
        person = device_owner[device_id]
        for k, t in enumerate(axis.times):
            tile = person_tiles[person, k]
            a = int(np.searchsorted(cum[:, tile], rng.random(), side="right"))
            events.append(Event(t=t, antenna_id=antenna_ids[min(a, len(antenna_ids) - 1)],
                                event_code=0, device_id=device_id))

    signal = SignalDominance(tuple(antenna_ids), dominance)
    ground_truth = GroundTruth(grid, axis, person_tiles, device_owner, tuple(persons_devices))
    return SimulationResult(EventLog.from_events(events), signal,
                            _antenna_cells(scenario, dominance), ground_truth, scenario)


def register_from_truth(result: SimulationResult) -> tuple[RegisterPopulation, PenetrationRate]:
    """Register counts and penetration rates per region, derived at t_start.

    The register holds the true person count; the penetration rate is devices
    per person in the region. Regions without persons get the global rate so
    the downstream inputs stay total.
    """
    regions = result.regions()
    t0 = result.scenario.time_axis.t_start
    persons = true_counts(result.ground_truth, regions, t0)
    k0 = 0
    devices = {r: 0 for r in regions.region_ids()}
    gt = result.ground_truth
    for device_id, person in gt.device_owner.items():
        devices[regions.region_of(int(gt.person_tiles[person, k0]))] += 1
    total_persons = sum(persons.values())
    global_rate = (sum(devices.values()) / total_persons) if total_persons else 1.0
    rates = {}
    for r in regions.region_ids():
        rates[r] = devices[r] / persons[r] if persons[r] > 0 and devices[r] > 0 else max(global_rate, 1e-6)
    return RegisterPopulation(persons), PenetrationRate(rates)


def write_scenario_files(result: SimulationResult, out_dir) -> dict[str, Path]:
    """Write every input file the pipeline layers consume; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "events": out / "events.csv",
        "signal": out / "signal.csv",
        "antenna_cells": out / "antenna_cells.csv",
        "grid": out / "grid.csv",
        "regions": out / "regions.csv",
        "simulation": out / "simulation.xml",
        "register": out / "pop_reg.csv",
        "penetration_rate": out / "pnt_rate.csv",
    }
    fileio.write_events(paths["events"], result.events)
    fileio.write_signal(paths["signal"], result.signal)
    fileio.write_antenna_cells(paths["antenna_cells"], result.antenna_cells)
    fileio.write_grid(paths["grid"], result.scenario.grid)
    fileio.write_regions(paths["regions"], result.regions())
    fileio.write_simulation_params(paths["simulation"], result.scenario.time_axis)
    register, rate = register_from_truth(result)
    fileio.write_register(paths["register"], register)
    fileio.write_penetration_rate(paths["penetration_rate"], rate)
    return paths
