import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobpop import fileio
from mobpop.datamodel import Event, Grid, SignalDominance, TimeAxis
from mobpop.errors import InputError, NumericalError
from mobpop.geolocation import (
    GeolocationConfig,
    TileHmm,
    emission_from_signal,
    event_likelihoods,
    fit_transition_params,
    forward_backward,
    forward_loglik,
    geolocate_all,
    initial_distribution,
    smooth_dense,
    transition_matrix,
)
from mobpop.simulator import Antenna, Scenario, simulate

from .oracles import enumerate_smoothing


def make_events(device, antennas_by_tick):
    return [Event(t=t, antenna_id=a, event_code=0, device_id=device)
            for t, a in antennas_by_tick.items()]


# ---------------------------------------------------------------------------
# emission


def test_emission_single_antenna_is_one():
    sig = SignalDominance(("A1",), np.array([[0.2, 0.7, 0.01]]))
    emission, uncovered = emission_from_signal(sig)
    assert np.allclose(emission, 1.0)
    assert not uncovered.any()


def test_emission_two_antennas_normalized():
    sig = SignalDominance(("A1", "A2"), np.array([[0.9, 0.5], [0.1, 0.5]]))
    emission, _ = emission_from_signal(sig)
    assert np.allclose(emission[0], [0.9, 0.1])
    assert np.allclose(emission[1], [0.5, 0.5])


def test_emission_uncovered_tile_uniform_and_flagged():
    sig = SignalDominance(("A1", "A2"), np.array([[0.9, 0.0], [0.1, 0.0]]))
    emission, uncovered = emission_from_signal(sig)
    assert uncovered.tolist() == [False, True]
    assert np.allclose(emission[1], [0.5, 0.5])


@settings(max_examples=25)
@given(seed=st.integers(0, 10**6))
def test_emission_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    sig = SignalDominance(tuple(f"A{k}" for k in range(4)), rng.random((4, 6)) + 1e-3)
    emission, _ = emission_from_signal(sig)
    np.testing.assert_allclose(emission.sum(axis=1), 1.0, atol=1e-12)


def test_emission_strength_mode_applies_logistic():
    strengths = np.array([[2.0, 0.0], [1.0, 3.0]])
    sig = SignalDominance(("A1", "A2"), strengths)
    emission, uncovered = emission_from_signal(sig, values="strength")
    dominance = np.where(strengths > 0, 1 / (1 + np.exp(-strengths)), 0.0)
    expected = (dominance / dominance.sum(axis=0)).T
    np.testing.assert_allclose(emission, expected, atol=1e-12)
    assert not uncovered.any()
    with pytest.raises(InputError):
        emission_from_signal(sig, values="db")


# ---------------------------------------------------------------------------
# event likelihoods / initial distribution


def test_likelihood_zero_outside_antenna_support():
    sig = SignalDominance(("A", "B"), np.array([[0.0, 0.6, 0.4], [1.0, 0.0, 0.0]]))
    emission, _ = emission_from_signal(sig)
    axis = TimeAxis(0, 2, 1)
    events = make_events("D1", {0: "A", 1: "A", 2: "A"})
    L = event_likelihoods(events, emission, sig.antenna_ids, axis)
    assert (L[:, 0] == 0).all()
    assert (L[:, 1:] > 0).all()


def test_likelihood_no_events_uninformative():
    sig = SignalDominance(("A",), np.array([[0.5, 0.5]]))
    emission, _ = emission_from_signal(sig)
    L = event_likelihoods([], emission, sig.antenna_ids, TimeAxis(0, 3, 1))
    assert np.array_equal(L, np.ones((4, 2)))


def test_likelihood_missing_tick_is_ones():
    sig = SignalDominance(("A", "B"), np.array([[0.8, 0.2], [0.2, 0.8]]))
    emission, _ = emission_from_signal(sig)
    axis = TimeAxis(0, 2, 1)
    L = event_likelihoods(make_events("D1", {0: "A", 2: "B"}), emission, sig.antenna_ids, axis)
    assert np.array_equal(L[1], np.ones(2))


def test_likelihood_unknown_antenna_rejected():
    sig = SignalDominance(("A",), np.array([[1.0]]))
    emission, _ = emission_from_signal(sig)
    with pytest.raises(InputError, match="unknown antenna"):
        event_likelihoods(make_events("D1", {0: "Z"}), emission, sig.antenna_ids, TimeAxis(0, 1, 1))


def test_initial_distribution_proportional():
    pi = initial_distribution(np.array([0.9, 0.1]), 2)
    assert np.allclose(pi, [0.9, 0.1])
    pi4 = initial_distribution(np.array([0.25, 0.25, 0.25, 0.25]), 4)
    assert np.allclose(pi4, 0.25)


def test_initial_distribution_uniform_without_events():
    assert np.allclose(initial_distribution(None, 5), 0.2)


# ---------------------------------------------------------------------------
# transition matrix


def test_transition_degenerate_grid():
    t = transition_matrix(Grid(1, 1, 1, 1), "queen", 0.3, 0.7)
    assert t.toarray().tolist() == [[1.0]]


def test_transition_center_rook_equal_split():
    t = transition_matrix(Grid(3, 3, 1, 1), "rook", 0.6).toarray()
    assert t[4, 4] == pytest.approx(0.6)
    for nb in (1, 3, 5, 7):
        assert t[4, nb] == pytest.approx(0.1)
    assert t[4, 0] == 0.0


def test_transition_queen_diag_ratio():
    t = transition_matrix(Grid(3, 3, 1, 1), "queen", 0.2, 0.5).toarray()
    # center tile: 4 orthogonal (weight 1) + 4 diagonal (weight 0.5) -> sum 6
    assert t[4, 1] == pytest.approx(0.8 / 6)
    assert t[4, 0] == pytest.approx(0.4 / 6)
    np.testing.assert_allclose(t.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=30)
@given(nx=st.integers(1, 4), ny=st.integers(1, 4),
       p_stay=st.floats(0.01, 0.99), ratio=st.floats(0.0, 1.0),
       adjacency=st.sampled_from(["rook", "queen"]))
def test_transition_rows_stochastic_support_local(nx, ny, p_stay, ratio, adjacency):
    grid = Grid(nx, ny, 10, 10)
    t = transition_matrix(grid, adjacency, p_stay, ratio).toarray()
    np.testing.assert_allclose(t.sum(axis=1), 1.0, atol=1e-12)
    for i in range(grid.n_tiles):
        support = set(np.flatnonzero(t[i]).tolist())
        allowed = grid.tile_neighbors(i, adjacency) | {i}
        assert support <= allowed


def test_transition_p_stay_out_of_box_rejected():
    with pytest.raises(InputError):
        transition_matrix(Grid(2, 2, 1, 1), "queen", 0.999)


# ---------------------------------------------------------------------------
# forward-backward vs. enumeration oracle


def test_single_tick_posterior_is_bayes():
    grid = Grid(3, 1, 1, 1)
    t = transition_matrix(grid, "rook", 0.5)
    pi = np.array([0.5, 0.3, 0.2])
    L = np.array([[0.1, 0.4, 0.5]])
    posteriors, joints, loglik = smooth_dense(pi, t, L)
    expected = pi * L[0]
    np.testing.assert_allclose(posteriors[0], expected / expected.sum(), atol=1e-15)
    assert joints == []
    assert loglik == pytest.approx(np.log(expected.sum()))


def test_three_tile_chain_matches_enumeration():
    grid = Grid(3, 1, 1, 1)
    t = transition_matrix(grid, "rook", 0.7)
    pi = np.array([0.6, 0.3, 0.1])
    L = np.array([[0.9, 0.3, 0.1], [0.2, 0.5, 0.8]])
    posteriors, joints, loglik = smooth_dense(pi, t, L)
    post_ref, joint_ref, loglik_ref = enumerate_smoothing(pi, t.toarray(), L)
    np.testing.assert_allclose(posteriors, post_ref, atol=1e-12)
    np.testing.assert_allclose(joints[0].toarray(), joint_ref[0], atol=1e-12)
    assert loglik == pytest.approx(loglik_ref, abs=1e-12)


def test_uninformative_likelihoods_follow_prior_powers():
    grid = Grid(2, 2, 1, 1)
    t = transition_matrix(grid, "queen", 0.4, 0.3)
    dense = t.toarray()
    pi = np.array([0.7, 0.1, 0.1, 0.1])
    L = np.ones((5, 4))
    posteriors, _, loglik = smooth_dense(pi, t, L)
    expected = pi.copy()
    for k in range(5):
        np.testing.assert_allclose(posteriors[k], expected, atol=1e-12)
        expected = expected @ dense
    assert loglik == pytest.approx(0.0, abs=1e-12)


def test_impossible_observation_identifies_tick():
    grid = Grid(2, 1, 1, 1)
    t = transition_matrix(grid, "rook", 0.9)
    pi = np.array([1.0, 0.0])
    L = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    with pytest.raises(NumericalError, match="tick index 1"):
        smooth_dense(pi, t, L)


def test_joint_marginals_match_posteriors():
    rng = np.random.default_rng(0)
    grid = Grid(2, 2, 1, 1)
    t = transition_matrix(grid, "queen", 0.55, 0.8)
    pi = np.full(4, 0.25)
    L = rng.random((4, 4)) + 0.05
    posteriors, joints, _ = smooth_dense(pi, t, L)
    for k, xi in enumerate(joints):
        dense = xi.toarray()
        np.testing.assert_allclose(dense.sum(), 1.0, atol=1e-9)
        np.testing.assert_allclose(dense.sum(axis=1), posteriors[k], atol=1e-9)
        np.testing.assert_allclose(dense.sum(axis=0), posteriors[k + 1], atol=1e-9)


def test_forward_backward_sparse_outputs():
    grid = Grid(2, 1, 1, 1)
    axis = TimeAxis(0, 2, 1)
    t = transition_matrix(grid, "rook", 0.8)
    pi = np.array([1.0, 0.0])
    L = np.array([[1.0, 0.0], [1.0, 1.0], [0.5, 0.5]])
    posterior, joint, loglik = forward_backward(grid, t, pi, L, axis, "D7")
    assert posterior.device_id == "D7"
    assert set(posterior.time_instants()) == {0, 1, 2}
    assert joint.pair_instants() == [(0, 1), (1, 2)]
    marg = joint.marginal_from(0, 2)
    tiles, probs = posterior.at(0)
    dense0 = np.zeros(2)
    dense0[tiles] = probs
    np.testing.assert_allclose(marg, dense0, atol=1e-9)


# ---------------------------------------------------------------------------
# fitting


def chain_signal():
    return SignalDominance(("A", "B"), np.array([[0.9, 0.3, 0.05], [0.05, 0.3, 0.9]]))


def test_fit_glued_device_prefers_staying():
    grid = Grid(3, 1, 1, 1)
    axis = TimeAxis(0, 49, 1)
    sig = chain_signal()
    emission, _ = emission_from_signal(sig)
    events = make_events("D1", {t: "A" for t in axis.times})
    L = event_likelihoods(events, emission, sig.antenna_ids, axis)
    pi = initial_distribution(L[0], 3)

    # oracle: profile the likelihood on a p_stay grid; staying must win
    p_grid = np.linspace(0.1, 0.99, 20)
    logliks = [forward_loglik(pi, transition_matrix(grid, "rook", p), L) for p in p_grid]
    assert p_grid[int(np.argmax(logliks))] >= 0.9

    result = fit_transition_params(grid, "rook", pi, L, retrain=3, seed=5)
    assert result.p_stay >= 0.9
    assert result.log_likelihood >= max(logliks) - 1e-9
    assert result.restarts_used == 3


def test_fit_deterministic_under_seed():
    grid = Grid(3, 1, 1, 1)
    axis = TimeAxis(0, 19, 1)
    sig = chain_signal()
    emission, _ = emission_from_signal(sig)
    events = make_events("D1", {t: ("A" if t < 10 else "B") for t in axis.times})
    L = event_likelihoods(events, emission, sig.antenna_ids, axis)
    pi = initial_distribution(L[0], 3)
    r1 = fit_transition_params(grid, "rook", pi, L, retrain=5, seed=11)
    r2 = fit_transition_params(grid, "rook", pi, L, retrain=5, seed=11)
    assert r1 == r2


def test_fit_dominates_random_probes():
    rng = np.random.default_rng(2)
    grid = Grid(2, 2, 1, 1)
    axis = TimeAxis(0, 29, 1)
    sig = SignalDominance(("A", "B"),
                          np.array([[0.9, 0.5, 0.4, 0.1], [0.1, 0.5, 0.6, 0.9]]))
    emission, _ = emission_from_signal(sig)
    events = make_events("D1", {t: ("A" if (t // 5) % 2 == 0 else "B") for t in axis.times})
    L = event_likelihoods(events, emission, sig.antenna_ids, axis)
    pi = initial_distribution(L[0], 4)
    result = fit_transition_params(grid, "queen", pi, L, retrain=5, seed=3, maxiter=400)
    for _ in range(100):
        p_stay = rng.uniform(0.01, 0.99)
        ratio = rng.uniform(0.0, 1.0)
        probe = forward_loglik(pi, transition_matrix(grid, "queen", p_stay, ratio), L)
        assert result.log_likelihood >= probe - 1e-9


# ---------------------------------------------------------------------------
# estimator API


def test_tile_hmm_estimator_roundtrip():
    grid = Grid(3, 1, 1, 1)
    axis = TimeAxis(0, 9, 1)
    sig = chain_signal()
    events = make_events("D1", {t: "A" for t in axis.times})
    est = TileHmm(grid=grid, signal=sig, time_axis=axis, adjacency="rook",
                  retrain=2, seed=7)
    params = est.get_params()
    assert params["retrain"] == 2 and params["adjacency"] == "rook"
    est.set_params(retrain=3)
    fitted = est.fit(events)
    assert fitted is est
    proba = est.predict_proba(events)
    assert proba.shape == (axis.n_times, grid.n_tiles)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-9)
    joints = est.predict_joint_proba(events)
    assert len(joints) == axis.n_times - 1
    assert np.isfinite(est.score(events))
    assert est.log_likelihood_ == pytest.approx(est.score(events), abs=1e-6)


def test_tile_hmm_unfitted_predict_rejected():
    est = TileHmm(grid=Grid(2, 1, 1, 1),
                  signal=SignalDominance(("A",), np.array([[1.0, 1.0]])),
                  time_axis=TimeAxis(0, 1, 1))
    with pytest.raises(InputError, match="not fitted"):
        est.predict_proba([])


# ---------------------------------------------------------------------------
# geolocate_all on a simulated scenario


@pytest.fixture(scope="module")
def scenario_run():
    grid = Grid(6, 6, 100, 100)
    scenario = Scenario(
        grid=grid,
        time_axis=TimeAxis(0, 14, 1),
        antennas=(Antenna("A1", 120, 120, power=250), Antenna("A2", 480, 480, power=250),
                  Antenna("A3", 120, 480, power=250)),
        n_persons=10,
        prob_one_device=0.5,
        prob_two_devices=0.3,
        rng_seed=31,
    )
    return simulate(scenario)


def test_geolocate_all_invariants(scenario_run, tmp_path):
    result = scenario_run
    config = GeolocationConfig(retrain=1, seed=1, maxiter=80)
    out = geolocate_all(result.events, result.signal, result.scenario.grid,
                        result.scenario.time_axis, config, out_dir=tmp_path)
    devices = result.events.device_ids()
    assert sorted(out) == devices
    for device_id in devices:
        loc = out[device_id]
        for t in result.scenario.time_axis.times:
            _, probs = loc.posterior.at(t)
            assert probs.sum() == pytest.approx(1.0, abs=1e-9)
        written = fileio.read_posterior(fileio.posterior_path(tmp_path, device_id), device_id)
        assert written.times.tolist() == loc.posterior.times.tolist()
    # one posterior + one joint file per device
    assert len(list(tmp_path.glob("postLocDevice*.csv"))) == len(devices)
    assert len(list(tmp_path.glob("postLocJointProbDevice*.csv"))) == len(devices)


def test_geolocate_true_tile_gets_above_uniform_mass(scenario_run):
    result = scenario_run
    config = GeolocationConfig(retrain=1, seed=1, maxiter=80)
    out = geolocate_all(result.events, result.signal, result.scenario.grid,
                        result.scenario.time_axis, config)
    grid = result.scenario.grid
    axis = result.scenario.time_axis
    gt = result.ground_truth
    masses = []
    for device_id, loc in out.items():
        person = gt.device_owner[device_id]
        dense = loc.posterior.dense(grid.n_tiles, axis.times)
        for k in range(axis.n_times):
            masses.append(dense[k, gt.person_tiles[person, k]])
    assert np.mean(masses) > 1.0 / grid.n_tiles


def test_geolocate_worker_count_invariance(scenario_run, tmp_path):
    result = scenario_run
    outputs = {}
    for workers in (1, 2):
        out_dir = tmp_path / f"w{workers}"
        config = GeolocationConfig(retrain=1, seed=9, workers=workers, maxiter=60)
        geolocate_all(result.events, result.signal, result.scenario.grid,
                      result.scenario.time_axis, config, out_dir=out_dir)
        outputs[workers] = {p.name: p.read_bytes() for p in sorted(out_dir.iterdir())}
    assert outputs[1] == outputs[2]
