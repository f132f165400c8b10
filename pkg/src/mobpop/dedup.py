"""Device duplicity estimation: the probability a device shares its owner.

Three methods produce a per-device probability of being one of two devices
carried by the same person:

- one_to_one: Bayes factors from a shared-trajectory HMM, devices matched
  greedily so each is paired with at most one partner;
- pairs: the same evidence averaged over all candidate partners;
- trajectory: similarity of posterior-mean trajectories relative to their
  dispersion radii.

Candidate pruning uses the neighboring-antenna relation from the antenna
cells file: devices seen on non-neighboring antennas at a common tick cannot
share an owner.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from multiprocessing import get_context

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import logsumexp

from .datamodel import AntennaCells, DuplicityTable, EventLog, Grid
from .errors import InputError
from .geolocation import (
    DeviceLocation,
    forward_loglik,
    initial_distribution,
    transition_matrix,
)

# Bayes-factor floor for devices without (matched) candidates; keeps the
# posterior odds finite and pulls dupP below the prior.
EVIDENCE_FLOOR = 1e-6
LOG_FLOOR = float(np.log(EVIDENCE_FLOOR))


@dataclass(frozen=True)
class DuplicityConfig:
    method: str = "one_to_one"  # one_to_one | pairs | trajectory
    prior_two_devices: float = 0.2
    lambda_: float | None = None  # prior-odds scale for one_to_one; 1 when absent
    adjacency: str = "queen"
    workers: int = 1

    def __post_init__(self):
        if self.method not in ("one_to_one", "pairs", "trajectory"):
            raise InputError(f"unknown duplicity method {self.method!r}; "
                             "expected one_to_one, pairs or trajectory")
        if not 0.0 <= self.prior_two_devices <= 1.0:
            raise InputError("prior_two_devices must lie in [0, 1]")
        if self.lambda_ is not None and self.lambda_ <= 0:
            raise InputError("lambda must be positive")


@dataclass(frozen=True)
class PairScore:
    """Log Bayes factor for two devices sharing one owner (symmetric)."""

    device_a: str
    device_b: str
    log_bayes_factor: float


def candidate_pairs(events: EventLog, antenna_cells: AntennaCells | None) -> set[tuple[str, str]]:
    """Device pairs that could share an owner.

    A pair survives iff at every common tick the two antennas are identical
    or neighbors (cells intersect). Without antenna cells no pruning happens
    and every pair is a candidate.
    """
    devices = events.device_ids()
    by_device = events.by_device()
    if antenna_cells is None:
        return {(a, b) for k, a in enumerate(devices) for b in devices[k + 1:]}
    neighbors = antenna_cells.neighbor_sets()
    for e in events.events:
        if e.antenna_id not in neighbors:
            raise InputError(f"antenna {e.antenna_id!r} missing from the antenna cells file")
    antenna_at = {d: {e.t: e.antenna_id for e in evs} for d, evs in by_device.items()}
    out = set()
    for k, a in enumerate(devices):
        for b in devices[k + 1:]:
            ok = True
            ticks_a = antenna_at[a]
            ticks_b = antenna_at[b]
            for t, ant_a in ticks_a.items():
                ant_b = ticks_b.get(t)
                if ant_b is not None and ant_b not in neighbors[ant_a]:
                    ok = False
                    break
            if ok:
                out.add((a, b))
    return out


def _pair_params(loc_a: DeviceLocation, loc_b: DeviceLocation) -> tuple[float, float]:
    return ((loc_a.fit.p_stay + loc_b.fit.p_stay) / 2.0,
            (loc_a.fit.p_diag_ratio + loc_b.fit.p_diag_ratio) / 2.0)


def pair_evidence(loc_a: DeviceLocation, loc_b: DeviceLocation, grid: Grid,
                  adjacency: str = "queen", candidate: bool = True) -> PairScore:
    """Log Bayes factor: shared-trajectory HMM vs. independent devices.

    The shared model observes both devices' events from a single trajectory,
    so its per-tick emission is the elementwise product of the two devices'
    likelihood vectors. Both hypotheses are evaluated at the same transition
    parameters (the mean of the two fitted parameter sets), which keeps the
    score exactly symmetric. Pairs already ruled out by pruning get a -inf
    sentinel without any computation.
    """
    a, b = sorted((loc_a, loc_b), key=lambda loc: loc.device_id)
    if not candidate:
        return PairScore(a.device_id, b.device_id, -np.inf)
    p_stay, ratio = _pair_params(a, b)
    t_matrix = transition_matrix(grid, adjacency, p_stay, ratio)

    joint_l = a.likelihoods * b.likelihoods
    informative = np.flatnonzero(np.abs(joint_l - 1.0).sum(axis=1) > 0)
    first = joint_l[informative[0]] if informative.size else None
    if first is not None and first.sum() <= 0.0:
        return PairScore(a.device_id, b.device_id, LOG_FLOOR)
    try:
        pi_joint = initial_distribution(first, grid.n_tiles)
        log_joint = forward_loglik(pi_joint, t_matrix, joint_l)
    except Exception:
        log_joint = -np.inf
    log_a = forward_loglik(a.pi, t_matrix, a.likelihoods)
    log_b = forward_loglik(b.pi, t_matrix, b.likelihoods)
    log_bf = log_joint - log_a - log_b
    if not np.isfinite(log_bf):
        log_bf = LOG_FLOOR
    return PairScore(a.device_id, b.device_id, float(log_bf))


def _score_chunk(args):
    pairs, geodata, grid, adjacency = args
    return [pair_evidence(geodata[a], geodata[b], grid, adjacency) for a, b in pairs]


def score_candidates(candidates, geodata: dict[str, DeviceLocation], grid: Grid,
                     adjacency: str = "queen", workers: int = 1) -> dict[tuple[str, str], PairScore]:
    """Score every candidate pair; parallel over pairs, deterministic order."""
    ordered = sorted(candidates)
    if workers > 1 and len(ordered) > 1:
        chunks = np.array_split(np.arange(len(ordered)), workers * 4)
        tasks = [([ordered[k] for k in chunk], geodata, grid, adjacency)
                 for chunk in chunks if chunk.size]
        with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("fork")) as pool:
            results = [s for part in pool.map(_score_chunk, tasks) for s in part]
    else:
        results = _score_chunk((ordered, geodata, grid, adjacency))
    return {(s.device_a, s.device_b): s for s in results}


def _prior_log_odds(prior: float, lambda_: float = 1.0) -> float:
    return float(np.log(lambda_) + np.log(prior) - np.log1p(-prior))


def _dup_from_log_odds(log_odds: float) -> float:
    # numerically stable sigmoid
    if log_odds >= 0:
        return float(1.0 / (1.0 + np.exp(-log_odds)))
    e = np.exp(log_odds)
    return float(e / (1.0 + e))


def duplicity_one_to_one(devices, scores: dict[tuple[str, str], PairScore],
                         prior: float, lambda_: float | None = None) -> DuplicityTable:
    """Bayesian 1-to-1 variant: greedy mutual best matching, then posterior odds.

    Matched devices use their partner's Bayes factor; unmatched ones fall to
    the evidence floor, which pulls dupP below the prior.
    """
    lambda_ = 1.0 if lambda_ is None else lambda_
    if prior <= 0.0:
        return DuplicityTable({d: 0.0 for d in devices})
    if prior >= 1.0:
        return DuplicityTable({d: 1.0 for d in devices})
    matched_bf: dict[str, float] = {}
    order = sorted(scores.values(), key=lambda s: (-s.log_bayes_factor, s.device_a, s.device_b))
    for s in order:
        if s.device_a not in matched_bf and s.device_b not in matched_bf:
            matched_bf[s.device_a] = s.log_bayes_factor
            matched_bf[s.device_b] = s.log_bayes_factor
    base = _prior_log_odds(prior, lambda_)
    out = {}
    for d in devices:
        log_bf = matched_bf.get(d, LOG_FLOOR)
        out[d] = _dup_from_log_odds(base + log_bf)
    return DuplicityTable(out)


def duplicity_pairs(devices, scores: dict[tuple[str, str], PairScore],
                    prior: float) -> DuplicityTable:
    """Bayesian pairs variant: evidence averaged over all candidate partners."""
    if prior <= 0.0:
        return DuplicityTable({d: 0.0 for d in devices})
    if prior >= 1.0:
        return DuplicityTable({d: 1.0 for d in devices})
    per_device: dict[str, list[float]] = {d: [] for d in devices}
    for (a, b), s in scores.items():
        per_device[a].append(s.log_bayes_factor)
        per_device[b].append(s.log_bayes_factor)
    base = _prior_log_odds(prior)
    out = {}
    for d in devices:
        bfs = per_device[d]
        log_mean_bf = (logsumexp(bfs) - np.log(len(bfs))) if bfs else LOG_FLOOR
        out[d] = _dup_from_log_odds(base + log_mean_bf)
    return DuplicityTable(out)


def trajectory_coordinates(loc: DeviceLocation, grid: Grid) -> tuple[list[int], np.ndarray]:
    """Posterior-mean coordinates per tick: (time instants, (n_times, 2) array)."""
    centers = grid.tile_centers()
    post = loc.posterior
    times = post.time_instants()
    out = np.zeros((len(times), 2))
    for k, t in enumerate(times):
        tiles, probs = post.at(t)
        out[k] = probs @ centers[tiles]
    return times, out


def dispersion_radius(trajectory: np.ndarray, grid: Grid) -> float:
    """Mean pairwise distance among trajectory points.

    Degenerate trajectories (a single tick, or one that never moves) fall
    back to the tile diagonal so downstream ratios stay finite.
    """
    if trajectory.shape[0] < 2:
        return grid.tile_diagonal()
    r = float(pdist(trajectory).mean())
    return r if r > 0.0 else grid.tile_diagonal()


def duplicity_trajectory(devices, geodata: dict[str, DeviceLocation], grid: Grid,
                         prior: float, candidates=None) -> DuplicityTable:
    """Trajectory-similarity variant.

    The mean per-tick distance between two posterior-mean trajectories,
    scaled by the mean of their dispersion radii, feeds a likelihood-ratio
    kernel exp(1 - distance/radius), clipped to keep the odds finite.
    """
    if prior <= 0.0:
        return DuplicityTable({d: 0.0 for d in devices})
    if prior >= 1.0:
        return DuplicityTable({d: 1.0 for d in devices})
    devices = sorted(devices)
    if candidates is None:
        candidates = {(a, b) for k, a in enumerate(devices) for b in devices[k + 1:]}
    trajs = {}
    for d in devices:
        times, coords = trajectory_coordinates(geodata[d], grid)
        trajs[d] = dict(zip(times, map(tuple, coords)))
    radii = {d: dispersion_radius(np.asarray(list(trajs[d].values())), grid) for d in devices}
    best_log_lr = {d: LOG_FLOOR for d in devices}
    for a, b in sorted(candidates):
        common = sorted(set(trajs[a]) & set(trajs[b]))
        if not common:
            continue
        pa = np.asarray([trajs[a][t] for t in common])
        pb = np.asarray([trajs[b][t] for t in common])
        delta = float(np.linalg.norm(pa - pb, axis=1).mean())
        radius = (radii[a] + radii[b]) / 2.0
        log_lr = 1.0 - delta / radius
        log_lr = float(np.clip(log_lr, LOG_FLOOR, -LOG_FLOOR))
        for d in (a, b):
            best_log_lr[d] = max(best_log_lr[d], log_lr)
    base = _prior_log_odds(prior)
    return DuplicityTable({d: _dup_from_log_odds(base + best_log_lr[d]) for d in devices})


def compute_duplicity(config: DuplicityConfig, events: EventLog,
                      geodata: dict[str, DeviceLocation], grid: Grid,
                      antenna_cells: AntennaCells | None = None) -> DuplicityTable:
    """Dispatch to the configured duplicity method.

    geodata is the geolocation layer's per-device output; the Bayesian
    methods reuse its likelihoods and fitted transition parameters, the
    trajectory method its posteriors.
    """
    devices = events.device_ids()
    missing = [d for d in devices if d not in geodata]
    if missing:
        raise InputError(f"geolocation output missing for devices: {missing[:5]}")
    candidates = candidate_pairs(events, antenna_cells)
    if config.method == "trajectory":
        return duplicity_trajectory(devices, geodata, grid, config.prior_two_devices, candidates)
    scores = score_candidates(candidates, geodata, grid, config.adjacency, config.workers)
    if config.method == "one_to_one":
        return duplicity_one_to_one(devices, scores, config.prior_two_devices, config.lambda_)
    return duplicity_pairs(devices, scores, config.prior_two_devices)
