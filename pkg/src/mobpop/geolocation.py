"""Per-device geolocation with a hidden Markov model on the tile grid.

The hidden state is the tile, the observation is the antenna recording the
device's event. Emission probabilities come from normalized signal dominance,
transitions from a two-parameter neighborhood kernel (p_stay, and for queen
adjacency a diagonal-to-orthogonal weight ratio) tied across all tiles.
Smoothing uses the scaled forward-backward recursion on a sparse transition
matrix; model fitting maximizes the forward log-likelihood with a
multi-restart Nelder-Mead search inside box constraints.
"""

from __future__ import annotations

import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from multiprocessing import get_context
from pathlib import Path

import numpy as np
import scipy.optimize
import scipy.sparse as sp
from sklearn.base import BaseEstimator

from . import fileio
from .datamodel import (
    Event,
    EventLog,
    Grid,
    JointPosterior,
    PosteriorLocation,
    SignalDominance,
    TimeAxis,
)
from .errors import FitError, InputError, NumericalError

logger = logging.getLogger(__name__)

P_STAY_MIN = 0.01
P_STAY_MAX = 0.99


def emission_from_signal(signal: SignalDominance,
                         values: str = "dominance") -> tuple[np.ndarray, np.ndarray]:
    """Normalize dominance into emission probabilities per tile.

    Returns (emission, uncovered): emission[i, a] = P(antenna a | tile i),
    rows summing to 1; uncovered flags tiles no antenna serves, which get a
    uniform emission row so they can still carry posterior mass.

    With values="strength" the file is taken to hold raw signal strengths
    and a logistic transform maps them into (0, 1) dominance first (zero
    entries stay zero: no measurement means no coverage).
    """
    if values not in ("dominance", "strength"):
        raise InputError(f"unknown signal value kind {values!r}")
    s = signal.matrix
    if values == "strength":
        s = np.where(s > 0, 1.0 / (1.0 + np.exp(-s)), 0.0)
    totals = s.sum(axis=0)
    uncovered = totals <= 0.0
    if uncovered.any():
        logger.warning("%d of %d tiles have no antenna coverage; using uniform emission there",
                       int(uncovered.sum()), s.shape[1])
    safe_totals = np.where(uncovered, 1.0, totals)
    emission = (s / safe_totals).T
    emission[uncovered] = 1.0 / s.shape[0]
    return emission, uncovered


def event_likelihoods(events: list[Event], emission: np.ndarray,
                      antenna_ids: tuple[str, ...], time_axis: TimeAxis) -> np.ndarray:
    """Per-tick observation likelihood vectors over tiles for one device.

    Ticks with an event on antenna a get the emission column for a; ticks
    without an event get an uninformative all-ones vector.
    """
    index = {a: k for k, a in enumerate(antenna_ids)}
    out = np.ones((time_axis.n_times, emission.shape[0]))
    for e in events:
        if e.antenna_id not in index:
            raise InputError(f"device {e.device_id}: event at t={e.t} references "
                             f"unknown antenna {e.antenna_id!r}")
        out[time_axis.index_of(e.t)] = emission[:, index[e.antenna_id]]
    return out


def initial_distribution(first_event_likelihood: np.ndarray | None, n_tiles: int) -> np.ndarray:
    """Initial tile distribution: proportional to the first observed tick's
    likelihood, or uniform when the device produced no events."""
    if first_event_likelihood is None:
        return np.full(n_tiles, 1.0 / n_tiles)
    v = np.asarray(first_event_likelihood, dtype=float)
    total = v.sum()
    if total <= 0.0:
        raise NumericalError("first event likelihood has no support")
    return v / total


@lru_cache(maxsize=32)
def _transition_structure(grid: Grid, adjacency: str):
    """Sparse pattern of the transition matrix plus per-row neighbor counts."""
    rows, cols, diag_mask = [], [], []
    n_orth = np.zeros(grid.n_tiles)
    n_diag = np.zeros(grid.n_tiles)
    for tile in range(grid.n_tiles):
        rows.append(tile)
        cols.append(tile)
        diag_mask.append(False)
        r0, c0 = grid.tile_to_rowcol(tile)
        for nb in sorted(grid.tile_neighbors(tile, adjacency)):
            r1, c1 = grid.tile_to_rowcol(nb)
            is_diag = r0 != r1 and c0 != c1
            rows.append(tile)
            cols.append(nb)
            diag_mask.append(is_diag)
            if is_diag:
                n_diag[tile] += 1
            else:
                n_orth[tile] += 1
    return (np.asarray(rows), np.asarray(cols), np.asarray(diag_mask, dtype=bool),
            n_orth, n_diag)


def transition_matrix(grid: Grid, adjacency: str, p_stay: float,
                      p_diag_ratio: float = 1.0) -> sp.csr_matrix:
    """Row-stochastic sparse transition matrix over tiles.

    The tile keeps p_stay; the remaining mass is split among its neighbors,
    orthogonal ones with weight 1 and (for queen adjacency) diagonal ones
    with weight p_diag_ratio, renormalized over the neighbors that exist.
    Isolated tiles (1x1 grid) keep probability 1.
    """
    if not P_STAY_MIN <= p_stay <= P_STAY_MAX:
        raise InputError(f"p_stay={p_stay} outside [{P_STAY_MIN}, {P_STAY_MAX}]")
    if not 0.0 <= p_diag_ratio <= 1.0:
        raise InputError(f"p_diag_ratio={p_diag_ratio} outside [0, 1]")
    rows, cols, diag_mask, n_orth, n_diag = _transition_structure(grid, adjacency)
    weight_sum = n_orth + p_diag_ratio * n_diag
    isolated = (n_orth + n_diag) == 0
    data = np.empty(len(rows))
    self_mask = rows == cols
    data[self_mask] = np.where(isolated, 1.0, p_stay)
    neighbor_rows = rows[~self_mask]
    w = np.where(diag_mask[~self_mask], p_diag_ratio, 1.0)
    # neighbor rows always have weight_sum > 0: a diagonal neighbor implies
    # orthogonal ones exist, so weight_sum == 0 only for isolated tiles
    data[~self_mask] = (1.0 - p_stay) * w / weight_sum[neighbor_rows]
    return sp.csr_matrix((data, (rows, cols)), shape=(grid.n_tiles, grid.n_tiles))


def forward_loglik(pi: np.ndarray, transition: sp.csr_matrix, likelihoods: np.ndarray) -> float:
    """Log-likelihood of the observation sequence (forward pass only)."""
    t_transpose = transition.T.tocsr()
    alpha = pi * likelihoods[0]
    total = 0.0
    for t in range(likelihoods.shape[0]):
        if t > 0:
            alpha = (t_transpose @ alpha) * likelihoods[t]
        c = alpha.sum()
        if c <= 0.0:
            return -np.inf
        total += np.log(c)
        alpha = alpha / c
    return float(total)


def smooth_dense(pi: np.ndarray, transition: sp.csr_matrix, likelihoods: np.ndarray):
    """Scaled forward-backward smoothing.

    Returns (posteriors (n_times, n), joints: list of n_times-1 sparse coo
    matrices over tile pairs, log_likelihood). Raises NumericalError when some
    tick's observation is impossible under the model.
    """
    L = np.asarray(likelihoods, dtype=float)
    n_times, n = L.shape
    t_transpose = transition.T.tocsr()

    alphas = np.empty((n_times, n))
    scales = np.empty(n_times)
    alpha = pi * L[0]
    for t in range(n_times):
        if t > 0:
            alpha = (t_transpose @ alpha) * L[t]
        c = alpha.sum()
        if c <= 0.0:
            raise NumericalError(f"impossible observation at tick index {t}: "
                                 "likelihood has no support under the model")
        scales[t] = c
        alpha = alpha / c
        alphas[t] = alpha

    betas = np.empty((n_times, n))
    beta = np.ones(n)
    betas[-1] = beta
    for t in range(n_times - 2, -1, -1):
        beta = (transition @ (L[t + 1] * beta)) / scales[t + 1]
        betas[t] = beta

    posteriors = alphas * betas
    posteriors /= posteriors.sum(axis=1, keepdims=True)

    joints = []
    for t in range(n_times - 1):
        right = L[t + 1] * betas[t + 1] / scales[t + 1]
        xi = transition.multiply(alphas[t][:, None]).multiply(right[None, :]).tocoo()
        total = xi.sum()
        if total > 0:
            xi = xi.multiply(1.0 / total).tocoo()
        joints.append(xi)
    return posteriors, joints, float(np.log(scales).sum())


@dataclass(frozen=True)
class FitResult:
    """Outcome of the transition-parameter search."""

    p_stay: float
    p_diag_ratio: float
    log_likelihood: float
    restarts_used: int


def fit_transition_params(grid: Grid, adjacency: str, pi: np.ndarray,
                          likelihoods: np.ndarray, retrain: int = 1,
                          seed: int = 0, maxiter: int = 200) -> FitResult:
    """Maximize the forward log-likelihood over (p_stay, p_diag_ratio).

    Runs a bounded Nelder-Mead search from `retrain` random starting points
    (seeded, so the result is deterministic) and returns the best restart.
    """
    if retrain < 1:
        raise InputError("retrain must be at least 1")
    rng = np.random.default_rng(seed)
    use_ratio = adjacency == "queen"
    bounds = [(P_STAY_MIN, P_STAY_MAX)] + ([(0.0, 1.0)] if use_ratio else [])

    def clip_params(theta):
        p_stay = float(min(max(theta[0], P_STAY_MIN), P_STAY_MAX))
        ratio = float(min(max(theta[1], 0.0), 1.0)) if use_ratio else 1.0
        return p_stay, ratio

    def objective(theta):
        p_stay, ratio = clip_params(theta)
        return -forward_loglik(pi, transition_matrix(grid, adjacency, p_stay, ratio), likelihoods)

    best: FitResult | None = None
    used = 0
    for _ in range(retrain):
        start = [rng.uniform(lo, hi) for lo, hi in bounds]
        try:
            res = scipy.optimize.minimize(
                objective, start, method="Nelder-Mead", bounds=bounds,
                options={"maxiter": maxiter, "xatol": 1e-4, "fatol": 1e-8})
        except Exception:
            continue
        if not np.isfinite(res.fun):
            continue
        used += 1
        p_stay, ratio = clip_params(res.x)
        if best is None or -res.fun > best.log_likelihood:
            best = FitResult(p_stay, ratio, -float(res.fun), used)
    if best is None:
        raise FitError(f"all {retrain} optimizer restarts failed", best_partial=best)
    return replace(best, restarts_used=used)


class TileHmm(BaseEstimator):
    """Sklearn-style estimator: fit a device's HMM and predict tile posteriors.

    Parameters are the state-space description (grid, signal, time axis) and
    the transition/search settings. `fit` expects the event list of a single
    device; fitted attributes follow the trailing-underscore convention.
    """

    def __init__(self, grid=None, signal=None, time_axis=None, adjacency="queen",
                 p_stay=0.9, p_diag_ratio=0.5, retrain=1, seed=0,
                 optimize=True, maxiter=200):
        self.grid = grid
        self.signal = signal
        self.time_axis = time_axis
        self.adjacency = adjacency
        self.p_stay = p_stay
        self.p_diag_ratio = p_diag_ratio
        self.retrain = retrain
        self.seed = seed
        self.optimize = optimize
        self.maxiter = maxiter

    def _check_setup(self):
        if self.grid is None or self.signal is None or self.time_axis is None:
            raise InputError("TileHmm needs grid, signal and time_axis")
        if self.grid.n_tiles != self.signal.n_tiles:
            raise InputError(f"signal covers {self.signal.n_tiles} tiles "
                             f"but the grid has {self.grid.n_tiles}")

    def _likelihoods(self, events):
        emission, _ = emission_from_signal(self.signal)
        L = event_likelihoods(list(events), emission, self.signal.antenna_ids, self.time_axis)
        event_ticks = sorted(self.time_axis.index_of(e.t) for e in events)
        first = L[event_ticks[0]] if event_ticks else None
        return L, initial_distribution(first, self.grid.n_tiles)

    def fit(self, X, y=None):
        """Fit transition parameters to one device's events (a list of Event)."""
        self._check_setup()
        L, pi = self._likelihoods(X)
        if self.optimize:
            result = fit_transition_params(self.grid, self.adjacency, pi, L,
                                           retrain=self.retrain, seed=self.seed,
                                           maxiter=self.maxiter)
        else:
            t_matrix = transition_matrix(self.grid, self.adjacency, self.p_stay, self.p_diag_ratio)
            result = FitResult(self.p_stay, self.p_diag_ratio,
                               forward_loglik(pi, t_matrix, L), 0)
        self.p_stay_ = result.p_stay
        self.p_diag_ratio_ = result.p_diag_ratio
        self.log_likelihood_ = result.log_likelihood
        self.restarts_used_ = result.restarts_used
        self.fit_result_ = result
        return self

    def _fitted_transition(self):
        if not hasattr(self, "p_stay_"):
            raise InputError("TileHmm is not fitted yet; call fit first")
        return transition_matrix(self.grid, self.adjacency, self.p_stay_, self.p_diag_ratio_)

    def predict_proba(self, X):
        """Smoothed tile posteriors, dense (n_times, n_tiles)."""
        L, pi = self._likelihoods(X)
        posteriors, _, _ = smooth_dense(pi, self._fitted_transition(), L)
        return posteriors

    def predict_joint_proba(self, X):
        """Consecutive-tick joint posteriors as a list of sparse matrices."""
        L, pi = self._likelihoods(X)
        _, joints, _ = smooth_dense(pi, self._fitted_transition(), L)
        return joints

    def score(self, X, y=None):
        """Forward log-likelihood of the events under the fitted model."""
        L, pi = self._likelihoods(X)
        return forward_loglik(pi, self._fitted_transition(), L)


def forward_backward(grid: Grid, transition: sp.csr_matrix, pi: np.ndarray,
                     likelihoods: np.ndarray, time_axis: TimeAxis,
                     device_id: str) -> tuple[PosteriorLocation, JointPosterior, float]:
    """Smooth one device and package the sparse posterior/joint outputs."""
    posteriors, joints, loglik = smooth_dense(pi, transition, likelihoods)
    times = time_axis.times
    post_t, post_i, post_p = [], [], []
    for k, t in enumerate(times):
        support = np.flatnonzero(posteriors[k] > 0)
        post_t.extend([t] * len(support))
        post_i.extend(support.tolist())
        post_p.extend(posteriors[k, support].tolist())
    posterior = PosteriorLocation(device_id, post_t, post_i, post_p)

    j_tf, j_tt, j_i, j_j, j_p = [], [], [], [], []
    for k, xi in enumerate(joints):
        keep = xi.data > 0
        j_tf.extend([times[k]] * int(keep.sum()))
        j_tt.extend([times[k + 1]] * int(keep.sum()))
        j_i.extend(xi.row[keep].tolist())
        j_j.extend(xi.col[keep].tolist())
        j_p.extend(xi.data[keep].tolist())
    joint = JointPosterior(device_id, j_tf, j_tt, j_i, j_j, j_p)
    return posterior, joint, loglik


@dataclass(frozen=True)
class GeolocationConfig:
    adjacency: str = "queen"
    retrain: int = 1
    seed: int = 0
    workers: int = 1
    optimize: bool = True
    p_stay: float = 0.9
    p_diag_ratio: float = 0.5
    maxiter: int = 200
    signal_values: str = "dominance"  # "strength" applies the logistic transform
    posterior_prefix: str = fileio.POSTERIOR_PREFIX
    joint_prefix: str = fileio.JOINT_PREFIX


def device_seed(global_seed: int, device_id: str) -> int:
    """Stable per-device seed, independent of scheduling and worker count."""
    return (int(global_seed) * (2**32) + zlib.crc32(device_id.encode("utf-8"))) % (2**63)


@dataclass(frozen=True)
class DeviceLocation:
    """Geolocation output for one device, shared with the dedup layer."""

    device_id: str
    posterior: PosteriorLocation
    joint: JointPosterior
    fit: FitResult
    likelihoods: np.ndarray
    pi: np.ndarray


def _geolocate_one(args) -> DeviceLocation:
    device_id, events, emission, antenna_ids, grid, time_axis, config = args
    L = event_likelihoods(events, emission, antenna_ids, time_axis)
    event_ticks = sorted(time_axis.index_of(e.t) for e in events)
    first = L[event_ticks[0]] if event_ticks else None
    pi = initial_distribution(first, grid.n_tiles)
    if config.optimize:
        result = fit_transition_params(grid, config.adjacency, pi, L,
                                       retrain=config.retrain,
                                       seed=device_seed(config.seed, device_id),
                                       maxiter=config.maxiter)
    else:
        t_fixed = transition_matrix(grid, config.adjacency, config.p_stay, config.p_diag_ratio)
        result = FitResult(config.p_stay, config.p_diag_ratio,
                           forward_loglik(pi, t_fixed, L), 0)
    t_matrix = transition_matrix(grid, config.adjacency, result.p_stay, result.p_diag_ratio)
    posterior, joint, _ = forward_backward(grid, t_matrix, pi, L, time_axis, device_id)
    return DeviceLocation(device_id, posterior, joint, result, L, pi)


def geolocate_all(events: EventLog, signal: SignalDominance, grid: Grid,
                  time_axis: TimeAxis, config: GeolocationConfig = GeolocationConfig(),
                  out_dir=None) -> dict[str, DeviceLocation]:
    """Run the full geolocation step for every device in the event log.

    Devices are processed independently (in parallel when config.workers > 1)
    and merged in device order, so outputs do not depend on the worker count.
    When out_dir is given, one posterior file and one joint file per device
    are written with the configured prefixes.
    """
    if grid.n_tiles != signal.n_tiles:
        raise InputError(f"signal covers {signal.n_tiles} tiles but the grid has {grid.n_tiles}")
    emission, _ = emission_from_signal(signal, config.signal_values)
    by_device = events.by_device()
    tasks = [(d, by_device[d], emission, signal.antenna_ids, grid, time_axis, config)
             for d in sorted(by_device)]
    if config.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.workers,
                                 mp_context=get_context("fork")) as pool:
            results = list(pool.map(_geolocate_one, tasks, chunksize=max(1, len(tasks) // (4 * config.workers))))
    else:
        results = [_geolocate_one(t) for t in tasks]
    out = {r.device_id: r for r in results}
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        for device_id in sorted(out):
            r = out[device_id]
            fileio.write_posterior(fileio.posterior_path(out_path, device_id, config.posterior_prefix),
                                   r.posterior)
            fileio.write_joint(fileio.joint_path(out_path, device_id, config.joint_prefix), r.joint)
    return out
