import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobpop import fileio
from mobpop.datamodel import (
    AntennaCells,
    CountDraws,
    DuplicityTable,
    Grid,
    JointPosterior,
    PosteriorLocation,
    RegionPartition,
    StatsRow,
    TimeAxis,
)
from mobpop.errors import InputError


def test_read_events_single_row(tmp_path):
    p = tmp_path / "events.csv"
    p.write_text("t,Antenna ID,Event Code,Device ID\n0,A1,0,D1\n")
    log = fileio.read_events(p)
    e = log.events[0]
    assert (e.t, e.antenna_id, e.event_code, e.device_id) == (0, "A1", 0, "D1")


def test_read_events_empty_with_header(tmp_path):
    p = tmp_path / "events.csv"
    p.write_text("t,Antenna ID,Event Code,Device ID\n")
    assert len(fileio.read_events(p)) == 0


def test_read_events_conflicting_rows_rejected(tmp_path):
    p = tmp_path / "events.csv"
    p.write_text("t,Antenna ID,Event Code,Device ID\n3,A1,0,D1\n3,A2,0,D1\n")
    with pytest.raises(InputError, match="duplicate"):
        fileio.read_events(p)


def test_read_events_sorts_unsorted_input(tmp_path):
    p = tmp_path / "events.csv"
    p.write_text("t,Antenna ID,Event Code,Device ID\n5,A1,0,D2\n1,A2,0,D1\n3,A1,0,D1\n")
    log = fileio.read_events(p)
    assert [(e.device_id, e.t) for e in log.events] == [("D1", 1), ("D1", 3), ("D2", 5)]


def test_read_events_malformed_row_names_line(tmp_path):
    p = tmp_path / "events.csv"
    p.write_text("t,Antenna ID,Event Code,Device ID\n0,A1,0,D1\nxx,A1,0,D2\n")
    with pytest.raises(InputError, match=":3"):
        fileio.read_events(p)


def test_read_events_wrong_header_names_both(tmp_path):
    p = tmp_path / "events.csv"
    p.write_text("time,antenna,code,device\n")
    with pytest.raises(InputError, match="Antenna ID"):
        fileio.read_events(p)


def test_read_events_header_tolerates_whitespace(tmp_path):
    p = tmp_path / "events.csv"
    p.write_text("t, Antenna ID, Event Code, Device ID\n0, A1, 0, D1\n")
    log = fileio.read_events(p)
    assert log.events[0].antenna_id == "A1"


def test_signal_round_trip_and_shape(tmp_path):
    grid = Grid(2, 2, 100, 100)
    p = tmp_path / "signal.csv"
    p.write_text("Antenna ID,Tile0,Tile1,Tile2,Tile3\nA1,0.9,0.1,0,0\n")
    sig = fileio.read_signal(p, grid)
    assert sig.matrix.tolist() == [[0.9, 0.1, 0.0, 0.0]]
    out = tmp_path / "signal2.csv"
    fileio.write_signal(out, sig)
    again = fileio.read_signal(out, grid)
    assert np.array_equal(again.matrix, sig.matrix)


def test_signal_column_mismatch_names_counts(tmp_path):
    grid = Grid(10, 10, 100, 100)
    p = tmp_path / "signal.csv"
    header = "Antenna ID," + ",".join(f"Tile{k}" for k in range(99))
    p.write_text(header + "\n")
    with pytest.raises(InputError, match="99.*100|100.*99"):
        fileio.read_signal(p, grid)


def test_posterior_single_entry_round_trip(tmp_path):
    post = PosteriorLocation("D1", [0], [3], [1.0])
    path = tmp_path / "post.csv"
    fileio.write_posterior(path, post)
    lines = path.read_text().strip().splitlines()
    assert lines == ["time,tile,probL", "0,3,1"]
    again = fileio.read_posterior(path, "D1")
    assert again.times.tolist() == [0] and again.tiles.tolist() == [3]
    assert again.probs.tolist() == [1.0]


def test_posterior_bad_sum_rejected_on_read(tmp_path):
    path = tmp_path / "post.csv"
    path.write_text("time,tile,probL\n0,1,0.5\n0,2,0.4\n")
    with pytest.raises(InputError, match="sum"):
        fileio.read_posterior(path)


@settings(max_examples=25, deadline=None)
@given(data=st.data())
def test_posterior_random_round_trip(tmp_path_factory, data):
    n_tiles, n_times = 5, 3
    rng = np.random.default_rng(data.draw(st.integers(0, 10**6)))
    times, tiles, probs = [], [], []
    for t in range(n_times):
        support = rng.choice(n_tiles, size=rng.integers(1, n_tiles + 1), replace=False)
        w = rng.random(len(support)) + 0.01
        w /= w.sum()
        times.extend([t] * len(support))
        tiles.extend(support.tolist())
        probs.extend(w.tolist())
    post = PosteriorLocation("D1", times, tiles, probs)
    path = tmp_path_factory.mktemp("rt") / "post.csv"
    fileio.write_posterior(path, post)
    again = fileio.read_posterior(path, "D1")
    assert again.times.tolist() == post.times.tolist()
    assert again.tiles.tolist() == post.tiles.tolist()
    np.testing.assert_allclose(again.probs, post.probs, rtol=1e-12)


def test_joint_single_transition_round_trip(tmp_path):
    joint = JointPosterior("D1", [0], [1], [2], [2], [1.0])
    path = tmp_path / "joint.csv"
    fileio.write_joint(path, joint)
    again = fileio.read_joint(path, "D1")
    assert again.tiles_from.tolist() == [2] and again.tiles_to.tolist() == [2]


def test_joint_non_consecutive_rejected(tmp_path):
    path = tmp_path / "joint.csv"
    path.write_text("time_from,time_to,tile_from,tile_to,probL\n0,2,0,1,1\n")
    axis = TimeAxis(0, 4, 1)
    with pytest.raises(InputError, match="successor"):
        fileio.read_joint(path, time_axis=axis)


def test_joint_random_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    tf, tt, ti, tj, probs = [], [], [], [], []
    for t in range(3):
        w = rng.random(4)
        w /= w.sum()
        for k in range(4):
            tf.append(t)
            tt.append(t + 1)
            ti.append(k % 2)
            tj.append(k // 2)
            probs.append(w[k])
    joint = JointPosterior("D9", tf, tt, ti, tj, probs)
    path = tmp_path / "joint.csv"
    fileio.write_joint(path, joint)
    again = fileio.read_joint(path, "D9")
    np.testing.assert_allclose(again.probs, joint.probs, rtol=1e-12)
    assert again.tiles_from.tolist() == joint.tiles_from.tolist()


def test_duplicity_round_trip(tmp_path):
    table = DuplicityTable({"D1": 0.25})
    path = tmp_path / "dup.csv"
    fileio.write_duplicity(path, table)
    assert path.read_text().strip().splitlines() == ["deviceID,dupP", "D1,0.25"]
    assert fileio.read_duplicity(path)["D1"] == 0.25


def test_duplicity_out_of_range_rejected(tmp_path):
    path = tmp_path / "dup.csv"
    path.write_text("deviceID,dupP\nD1,1.3\n")
    with pytest.raises(InputError, match=r"\[0, 1\]"):
        fileio.read_duplicity(path)


def test_duplicity_many_devices_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    table = DuplicityTable({f"D{k:03d}": float(p) for k, p in enumerate(rng.random(100))})
    path = tmp_path / "dup.csv"
    fileio.write_duplicity(path, table)
    again = fileio.read_duplicity(path)
    assert again.dup_probs == table.dup_probs


def test_register_paper_rows(tmp_path):
    path = tmp_path / "pop_reg.csv"
    path.write_text("region, NO\n1, 38\n2, 55\n3, 65\n")
    reg = fileio.read_register(path)
    assert reg.counts == {1: 38, 2: 55, 3: 65}


def test_penetration_rate_paper_rows(tmp_path):
    path = tmp_path / "pnt_rate.csv"
    path.write_text("region, pntRate\n1, 0.3684211\n2, 0.4\n3, 0.4153846\n")
    rate = fileio.read_penetration_rate(path)
    assert rate.rates == {1: 0.3684211, 2: 0.4, 3: 0.4153846}


def test_regions_partial_cover_rejected(tmp_path):
    grid = Grid(2, 2, 1, 1)
    path = tmp_path / "regions.csv"
    path.write_text("tile,region\n0,1\n1,1\n")
    with pytest.raises(InputError, match="cover"):
        fileio.read_regions(path, grid)


def test_regions_round_trip(tmp_path):
    grid = Grid(2, 2, 1, 1)
    part = RegionPartition(np.array([1, 1, 2, 2]))
    path = tmp_path / "regions.csv"
    fileio.write_regions(path, part)
    again = fileio.read_regions(path, grid)
    assert np.array_equal(again.tile_region, part.tile_region)


def test_antenna_cells_round_trip(tmp_path):
    cells = AntennaCells({"A1": ((0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0), (0.0, 0.0))})
    path = tmp_path / "cells.csv"
    fileio.write_antenna_cells(path, cells)
    again = fileio.read_antenna_cells(path)
    assert again.cells["A1"] == cells.cells["A1"]


def test_antenna_cells_wkt_parsing(tmp_path):
    path = tmp_path / "cells.csv"
    path.write_text('AntennaId,Cell Coordinates\nA1,"POLYGON ((0 0, 1 0, 1 1, 0 1, 0 0))"\n')
    cells = fileio.read_antenna_cells(path)
    assert cells.cells["A1"][0] == (0.0, 0.0)
    neighbors = cells.neighbor_sets()
    assert neighbors["A1"] == {"A1"}


def test_grid_round_trip(tmp_path):
    grid = Grid(10, 5, 100.0, 250.0, origin_x=-10.0, origin_y=3.5)
    path = tmp_path / "grid.csv"
    fileio.write_grid(path, grid)
    assert fileio.read_grid(path) == grid


def test_simulation_params_round_trip(tmp_path):
    axis = TimeAxis(0, 230, 10)
    path = tmp_path / "simulation.xml"
    fileio.write_simulation_params(path, axis)
    assert fileio.read_simulation_params(path) == axis


def test_simulation_params_ignores_extra_fields(tmp_path):
    path = tmp_path / "simulation.xml"
    path.write_text("<simulation><start_time>0</start_time><end_time>10</end_time>"
                    "<time_increment>1</time_increment>"
                    "<movement_type>random_walk</movement_type></simulation>")
    assert fileio.read_simulation_params(path) == TimeAxis(0, 10, 1)


def test_simulation_params_missing_field_rejected(tmp_path):
    path = tmp_path / "simulation.xml"
    path.write_text("<simulation><start_time>0</start_time></simulation>")
    with pytest.raises(InputError, match="end_time"):
        fileio.read_simulation_params(path)


def test_count_draws_paper_head_row(tmp_path):
    path = tmp_path / "nnet.csv"
    path.write_text("time,region,N,iter\n1,1,11,1\n1,1,11,2\n1,1,10,3\n1,1,13,4\n")
    draws = fileio.read_count_draws(path)
    assert draws.values.tolist() == [11.0, 11.0, 10.0, 13.0]
    out = tmp_path / "nnet_out.csv"
    fileio.write_count_draws(out, draws)
    assert out.read_text().splitlines()[1] == "1,1,11,1"


def test_od_draws_paper_half_integer_row(tmp_path):
    path = tmp_path / "nnetOD.csv"
    path.write_text(
        "time_from,time_to,region_from,region_to,Nnet,iter\n"
        "0,10,1,1,18,1\n0,10,1,1,18.5,2\n0,10,1,1,19,3\n")
    draws = fileio.read_od_draws(path)
    assert draws.values.tolist() == [18.0, 18.5, 19.0]
    out = tmp_path / "od_out.csv"
    fileio.write_od_draws(out, draws)
    assert "0,10,1,1,18.5,2" in out.read_text().splitlines()


def test_od_draws_zip_archive(tmp_path):
    import zipfile

    csv_text = ("time_from,time_to,region_from,region_to,Nnet,iter\n"
                "0,1,1,1,5,1\n0,1,1,2,0.5,1\n")
    zpath = tmp_path / "nnetOD.zip"
    with zipfile.ZipFile(zpath, "w") as zf:
        zf.writestr("nnetOD.csv", csv_text)
    draws = fileio.read_od_draws(zpath)
    assert draws.values.tolist() == [5.0, 0.5]


def test_empty_draws_header_only(tmp_path):
    empty = CountDraws(np.array([], dtype=int), np.array([], dtype=int),
                       np.array([]), np.array([], dtype=int))
    path = tmp_path / "empty.csv"
    fileio.write_count_draws(path, empty)
    assert path.read_text().strip() == "time,region,N,iter"
    assert fileio.read_count_draws(path).values.size == 0


def test_stats_table_round_trip(tmp_path):
    row = StatsRow(mean=43.0, mode=33.0, median=39.0, min=11.0, max=133.0,
                   q1=30.0, q3=51.0, iqr=21.0, sd=17.90, cv=41.96,
                   ci_low=21.0, ci_high=73.0)
    path = tmp_path / "stats.csv"
    fileio.write_stats(path, {1: row})
    header = path.read_text().splitlines()[0]
    assert header == "region,Mean,Mode,Median,Min,Max,Q1,Q3,IQR,SD,CV,CI_LOW,CI_HIGH"
    again = fileio.read_stats(path)
    assert again[1] == row
