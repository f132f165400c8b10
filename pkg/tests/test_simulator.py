import numpy as np
import pytest

from mobpop import fileio
from mobpop.datamodel import Grid, TimeAxis
from mobpop.errors import InputError
from mobpop.simulator import (
    Antenna,
    Scenario,
    signal_dominance,
    simulate,
    true_counts,
    write_scenario_files,
)


def small_scenario(seed=1, **overrides):
    grid = Grid(5, 5, 100, 100)
    defaults = dict(
        grid=grid,
        time_axis=TimeAxis(0, 9, 1),
        antennas=(Antenna("A1", 100, 100, power=300), Antenna("A2", 400, 400, power=300)),
        n_persons=8,
        prob_one_device=0.5,
        prob_two_devices=0.25,
        rng_seed=seed,
    )
    defaults.update(overrides)
    return Scenario(**defaults)


def test_dominance_at_zero_distance_is_one():
    a = Antenna("A1", 50, 50)
    assert signal_dominance(a, (50, 50)) == 1.0


def test_dominance_monotone_decreasing():
    a = Antenna("A1", 0, 0, power=200, path_loss_exponent=3)
    distances = np.linspace(1, 2000, 60)
    values = [signal_dominance(a, (d, 0.0)) for d in distances]
    assert all(0 < v <= 1 for v in values)
    assert all(b < a_ for a_, b in zip(values, values[1:]))


def test_equidistant_equal_power_equal_dominance():
    a1 = Antenna("A1", 0, 0, power=150)
    a2 = Antenna("A2", 200, 0, power=150)
    tile = (100.0, 0.0)
    assert signal_dominance(a1, tile) == signal_dominance(a2, tile)


def test_single_person_single_antenna_event_count():
    grid = Grid(2, 2, 100, 100)
    scenario = Scenario(
        grid=grid,
        time_axis=TimeAxis(0, 2, 1),
        antennas=(Antenna("A1", 100, 100, power=500),),
        n_persons=1,
        prob_one_device=1.0,
        prob_two_devices=0.0,
        rng_seed=4,
    )
    result = simulate(scenario)
    assert len(result.events) == 3
    assert all(e.antenna_id == "A1" for e in result.events.events)
    assert len(result.events.device_ids()) == 1


def test_all_two_device_persons():
    scenario = small_scenario(prob_one_device=0.0, prob_two_devices=1.0)
    result = simulate(scenario)
    gt = result.ground_truth
    assert all(n == 2 for n in gt.persons_devices)
    assert all(gt.duplicity_of(d) == 1 for d in gt.device_owner)
    assert len(gt.device_owner) == 2 * scenario.n_persons


def test_seed_determinism_byte_identical(tmp_path):
    for sub in ("a", "b"):
        write_scenario_files(simulate(small_scenario(seed=42)), tmp_path / sub)
    for name in ("events.csv", "signal.csv", "antenna_cells.csv", "grid.csv",
                 "regions.csv", "pop_reg.csv", "pnt_rate.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_uncovered_tile_rejected():
    grid = Grid(10, 1, 100, 100)
    scenario = Scenario(
        grid=grid,
        time_axis=TimeAxis(0, 2, 1),
        antennas=(Antenna("A1", 50, 50, power=80, path_loss_exponent=6),),
        n_persons=1,
        min_dominance=0.2,
        rng_seed=0,
    )
    with pytest.raises(InputError, match="covers"):
        simulate(scenario)


def test_events_only_on_covering_antennas():
    result = simulate(small_scenario(seed=9))
    sig = result.signal
    a_index = sig.antenna_index()
    gt = result.ground_truth
    axis = result.scenario.time_axis
    for e in result.events.events:
        person = gt.device_owner[e.device_id]
        tile = gt.person_tiles[person, axis.index_of(e.t)]
        assert sig.matrix[a_index[e.antenna_id], tile] > 0


def test_true_counts_all_in_one_region():
    scenario = small_scenario(n_regions=1)
    result = simulate(scenario)
    counts = true_counts(result.ground_truth, result.regions(), 0)
    assert counts == {1: scenario.n_persons}


def test_true_counts_match_brute_force_tally():
    result = simulate(small_scenario(seed=11, n_regions=3))
    regions = result.regions()
    axis = result.scenario.time_axis
    gt = result.ground_truth
    for t in axis.times:
        counts = true_counts(gt, regions, t)
        assert sum(counts.values()) == result.scenario.n_persons
        k = axis.index_of(t)
        tally = {r: 0 for r in regions.region_ids()}
        for person in range(result.scenario.n_persons):
            tally[regions.region_of(int(gt.person_tiles[person, k]))] += 1
        assert counts == tally


def test_true_counts_detected_only():
    result = simulate(small_scenario(seed=5))
    gt = result.ground_truth
    counts = true_counts(gt, result.regions(), 0, detected_only=True)
    with_devices = sum(1 for n in gt.persons_devices if n >= 1)
    assert sum(counts.values()) == with_devices


def test_scenario_files_parse_back(tmp_path):
    result = simulate(small_scenario(seed=2))
    paths = write_scenario_files(result, tmp_path)
    grid = fileio.read_grid(paths["grid"])
    assert grid == result.scenario.grid
    events = fileio.read_events(paths["events"])
    assert len(events) == len(result.events)
    signal = fileio.read_signal(paths["signal"], grid)
    assert np.array_equal(signal.matrix, result.signal.matrix)
    axis = fileio.read_simulation_params(paths["simulation"])
    assert axis == result.scenario.time_axis
    fileio.read_regions(paths["regions"], grid)
    fileio.read_antenna_cells(paths["antenna_cells"])
    fileio.read_register(paths["register"])
    fileio.read_penetration_rate(paths["penetration_rate"])
