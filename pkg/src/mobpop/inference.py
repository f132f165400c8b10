"""Target-population inference from detected counts and auxiliary data.

Detected counts underestimate the population because not everyone carries a
device and some carry two. Per region, a deduplication factor (individuals
per detected device) and the operator penetration rate combine into a
detection probability p. Conditional on a detected count N, the undetected
remainder is modeled as negative binomial with N+1 successes and success
probability p (the posterior of the total under a flat prior and binomial
detection), optionally Beta-mixing p (BetaNegBin) or inflating the variance
(STNegBin). Population evolution over time redistributes each draw through
the observed flow proportions of the matching OD draw.
"""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .datamodel import (
    CountDraws,
    DuplicityTable,
    Grid,
    ODDraws,
    PenetrationRate,
    PosteriorLocation,
    RegionPartition,
    RegisterPopulation,
    StatsRow,
)
from .errors import InputError
from .fileio import fmt_num

logger = logging.getLogger(__name__)

POP_DISTRIBUTIONS = ("BetaNegBin", "NegBin", "STNegBin")


@dataclass(frozen=True)
class DeduplicationFactors:
    """Expected individuals per detected device, per region (in [0.5, 1])."""

    omega: dict[int, float]

    def __post_init__(self):
        for r, v in self.omega.items():
            if not 0.5 - 1e-12 <= v <= 1.0 + 1e-12:
                raise InputError(f"region {r}: deduplication factor {v} outside [0.5, 1]")

    def __getitem__(self, region: int) -> float:
        return self.omega[region]


@dataclass(frozen=True)
class RegionParams:
    detection_prob: float  # p in (0, 1]
    alpha: float           # Beta prior pseudo-counts, alpha/(alpha+beta) = p
    beta: float
    dispersion: float      # variance inflation for the state-process variant


@dataclass(frozen=True)
class DistrParams:
    regions: dict[int, RegionParams]

    def __getitem__(self, region: int) -> RegionParams:
        return self.regions[region]


@dataclass(frozen=True)
class PopulationDraws:
    """Initial-population draws, paired with the detected counts that produced them."""

    regions: np.ndarray
    detected: np.ndarray
    population: np.ndarray
    iters: np.ndarray

    def vectors(self) -> dict[int, np.ndarray]:
        """Region -> population draw vector ordered by iter."""
        out = {}
        for r in np.unique(self.regions):
            mask = self.regions == r
            order = np.argsort(self.iters[mask])
            out[int(r)] = self.population[mask][order]
        return out


@dataclass(frozen=True)
class InitialPopulation:
    stats: dict[int, StatsRow]
    draws: PopulationDraws | None


@dataclass(frozen=True)
class TimePopulation:
    time: int
    stats: dict[int, StatsRow]
    draws: dict[int, np.ndarray] | None  # region -> NPop per iter


@dataclass(frozen=True)
class ODPopulation:
    time_from: int
    time_to: int
    stats: dict[tuple[int, int], StatsRow]
    draws: dict[tuple[int, int], np.ndarray] | None


def compute_dedup_factors(duplicity: DuplicityTable, posteriors: dict[str, PosteriorLocation],
                          regions: RegionPartition, t0: int) -> DeduplicationFactors:
    """Per-region individuals-per-device factor at the initial time.

    The factor is the posterior-mass-weighted mean of (1 - dupP/2) over
    devices; regions carrying no device mass fall back to the global mean.
    """
    devices = sorted(posteriors)
    missing = [d for d in devices if d not in duplicity.dup_probs]
    if missing:
        raise InputError(f"duplicity table missing devices: {missing[:5]}")
    nr = regions.n_regions
    mass = np.zeros(nr)
    weighted = np.zeros(nr)
    for d in devices:
        tiles, probs = posteriors[d].at(t0)
        contribution = np.bincount(regions.tile_region[tiles] - 1, weights=probs, minlength=nr)
        mass += contribution
        weighted += contribution * (1.0 - duplicity[d] / 2.0)
    mean_dup = float(np.mean([duplicity[d] for d in devices])) if devices else 0.0
    fallback = 1.0 - mean_dup / 2.0
    omega = {}
    for r in regions.region_ids():
        omega[r] = float(weighted[r - 1] / mass[r - 1]) if mass[r - 1] > 0 else fallback
    return DeduplicationFactors(omega)


def compute_distr_params(omega: DeduplicationFactors, register: RegisterPopulation,
                         pnt_rate: PenetrationRate, regions: RegionPartition,
                         grid: Grid | None = None, dispersion: float = 1.5) -> DistrParams:
    """Detection probabilities and Beta hyperparameters per region.

    p = pntRate * omega is the expected detected individuals per target
    individual (clipped to 1 with a warning when dedup still leaves more
    devices than people); the Beta prior is moment-matched with the register
    count as its strength: mean p, alpha + beta = N0.
    """
    if grid is not None and grid.n_tiles != regions.n_tiles:
        raise InputError(f"grid has {grid.n_tiles} tiles but the region partition covers "
                         f"{regions.n_tiles}")
    if dispersion <= 1.0:
        raise InputError("dispersion must exceed 1 (it inflates the variance)")
    out = {}
    for r in regions.region_ids():
        if r not in register.counts:
            raise InputError(f"register population missing region {r}")
        if r not in pnt_rate.rates:
            raise InputError(f"penetration rate missing region {r}")
        p = pnt_rate[r] * omega[r]
        if p > 1.0:
            logger.warning("region %d: pntRate*omega = %.4f > 1, clipping detection "
                           "probability to 1", r, p)
            p = 1.0
        strength = max(float(register[r]), 1.0)
        out[r] = RegionParams(detection_prob=float(p), alpha=p * strength,
                              beta=(1.0 - p) * strength, dispersion=dispersion)
    return DistrParams(out)


def _sample_undetected(rng: np.random.Generator, detected: np.ndarray,
                       params: RegionParams, pop_distr: str) -> np.ndarray:
    """Draws of the undetected remainder M given detected counts.

    M ~ NegBin(successes = N+1, p); BetaNegBin first draws p ~ Beta(alpha,
    beta) per draw; STNegBin keeps the mean and inflates the variance by the
    dispersion factor. Full detection (p = 1) means nothing was missed.
    """
    p = params.detection_prob
    n_success = detected + 1.0  # N may be half-integer; negative_binomial takes real n
    if p >= 1.0:
        return np.zeros(detected.shape)
    if pop_distr == "NegBin":
        return rng.negative_binomial(n_success, p).astype(float)
    if pop_distr == "BetaNegBin":
        p_draws = rng.beta(params.alpha, params.beta, size=detected.shape)
        p_draws = np.clip(p_draws, 1e-9, 1.0)
        return rng.negative_binomial(n_success, p_draws).astype(float)
    if pop_distr == "STNegBin":
        mean = n_success * (1.0 - p) / p
        variance = params.dispersion * n_success * (1.0 - p) / p**2
        prob = mean / variance                      # = p / dispersion
        size = mean * prob / (1.0 - prob)           # matched mean, inflated variance
        return rng.negative_binomial(size, prob).astype(float)
    raise InputError(f"unknown popDistr {pop_distr!r}; expected one of {POP_DISTRIBUTIONS}")


def compute_initial_population(nnet: CountDraws, params: DistrParams,
                               pop_distr: str = "BetaNegBin", rnd_val: bool = True,
                               seed: int = 0, t0: int | None = None,
                               ci_level: float = 0.9) -> InitialPopulation:
    """Population distribution at the initial time, per region.

    Each aggregation draw N gets a matched population draw NPop = N + M with
    M the sampled undetected remainder, so NPop >= N always holds.
    """
    if pop_distr not in POP_DISTRIBUTIONS:
        raise InputError(f"unknown popDistr {pop_distr!r}; expected one of {POP_DISTRIBUTIONS}")
    times = nnet.time_instants()
    if not times:
        raise InputError("count draws are empty")
    t0 = times[0] if t0 is None else t0
    detected = nnet.matrix(t0)  # (n_regions, n_draws)
    region_ids = nnet.region_ids()
    rng = np.random.default_rng(seed)
    stats = {}
    rows_region, rows_n, rows_pop, rows_iter = [], [], [], []
    n_draws = detected.shape[1]
    for idx, r in enumerate(region_ids):
        if r not in params.regions:
            raise InputError(f"distribution parameters missing region {r}")
        n_vec = detected[idx]
        m_vec = _sample_undetected(rng, n_vec, params[r], pop_distr)
        pop = n_vec + m_vec  # keeps the pairing NPop >= N exact, halves included
        stats[r] = compute_stats(pop, ci_level=ci_level)
        rows_region.append(np.full(n_draws, r))
        rows_n.append(n_vec)
        rows_pop.append(pop)
        rows_iter.append(np.arange(1, n_draws + 1))
    draws = None
    if rnd_val:
        draws = PopulationDraws(np.concatenate(rows_region), np.concatenate(rows_n),
                                np.concatenate(rows_pop), np.concatenate(rows_iter))
    return InitialPopulation(stats, draws)


def largest_remainder_round(values: np.ndarray) -> np.ndarray:
    """Round nonnegative values to integers preserving their (integral) total.

    Floors everything, then hands out the remaining units by descending
    fractional part (ties to the lower index, so the result is deterministic).
    """
    values = np.asarray(values, dtype=float)
    floors = np.floor(values)
    remainder = int(round(values.sum() - floors.sum()))
    if remainder > 0:
        fracs = values - floors
        order = np.lexsort((np.arange(values.size), -fracs))
        floors[order[:remainder]] += 1.0
    return floors


def _flow_proportions(flows: np.ndarray) -> np.ndarray:
    """Row-normalize a flow matrix; zero-outflow regions keep their population."""
    out = np.array(flows, dtype=float)
    totals = out.sum(axis=1)
    for r in range(out.shape[0]):
        if totals[r] > 0:
            out[r] /= totals[r]
        else:
            out[r] = 0.0
            out[r, r] = 1.0
    return out


def _evolve(nt0_vectors: dict[int, np.ndarray], od: ODDraws):
    """Advance each population draw through the OD flow proportions.

    Yields (time_from, time_to, prev (R, n), od_rounded (R, R, n), next (R, n));
    evolution is sequential in t because each step conditions on the previous.
    """
    region_ids = sorted(nt0_vectors)
    nr = len(region_ids)
    if od.n_regions > nr:
        raise InputError(f"OD draws cover {od.n_regions} regions but the population "
                         f"draws cover {nr}")
    n = len(next(iter(nt0_vectors.values())))
    if od.n_draws != n:
        raise InputError(f"population draws have {n} iterations but OD draws have {od.n_draws}")
    current = np.stack([np.asarray(nt0_vectors[r], dtype=float) for r in region_ids])
    for tf, tt in od.pair_instants():
        flows = od.matrices(tf)  # (R, R, n)
        rounded = np.zeros((nr, nr, n))
        nxt = np.zeros((nr, n))
        for k in range(n):
            pi = _flow_proportions(flows[:, :, k])
            moved = current[:, k][:, None] * pi
            for r in range(nr):
                rounded[r, :, k] = largest_remainder_round(moved[r])
            nxt[:, k] = largest_remainder_round(moved.sum(axis=0))
        yield tf, tt, current, rounded, nxt
        current = nxt


def compute_population_t(nt0: PopulationDraws, od: ODDraws, rnd_val: bool = True,
                         ci_level: float = 0.9) -> list[TimePopulation]:
    """Population distributions at every time after the initial one."""
    out = []
    region_ids = sorted(nt0.vectors())
    for _, tt, _, _, nxt in _evolve(nt0.vectors(), od):
        stats = {r: compute_stats(nxt[i], ci_level=ci_level) for i, r in enumerate(region_ids)}
        draws = {r: nxt[i].copy() for i, r in enumerate(region_ids)} if rnd_val else None
        out.append(TimePopulation(tt, stats, draws))
    return out


def compute_population_od(nt0: PopulationDraws, od: ODDraws, rnd_val: bool = True,
                          ci_level: float = 0.9) -> list[ODPopulation]:
    """Population OD matrices for every consecutive tick pair."""
    out = []
    region_ids = sorted(nt0.vectors())
    for tf, tt, _, rounded, _ in _evolve(nt0.vectors(), od):
        stats = {}
        draws = {} if rnd_val else None
        for i, rf in enumerate(region_ids):
            for j, rt in enumerate(region_ids):
                cell = rounded[i, j]
                stats[(rf, rt)] = compute_stats(cell, ci_level=ci_level)
                if rnd_val:
                    draws[(rf, rt)] = cell.copy()
        out.append(ODPopulation(tf, tt, stats, draws))
    return out


def write_population_draws(path, draws: PopulationDraws) -> None:
    """Initial-population draws CSV: region, N, NPop (ordered by region, iter)."""
    order = np.lexsort((draws.iters, draws.regions))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["region", "N", "NPop"])
        for k in order:
            w.writerow([int(draws.regions[k]), fmt_num(draws.detected[k]),
                        fmt_num(draws.population[k])])


def write_time_population_draws(path, results: list[TimePopulation]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "region", "iter", "NPop"])
        for res in results:
            if res.draws is None:
                continue
            for r in sorted(res.draws):
                for k, v in enumerate(res.draws[r], start=1):
                    w.writerow([res.time, r, k, fmt_num(v)])


def write_od_population_draws(path, results: list[ODPopulation]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["time_from", "time_to", "region_from", "region_to", "iter", "NPop"])
        for res in results:
            if res.draws is None:
                continue
            for rf, rt in sorted(res.draws):
                for k, v in enumerate(res.draws[(rf, rt)], start=1):
                    w.writerow([res.time_from, res.time_to, rf, rt, k, fmt_num(v)])


def compute_stats(draws: np.ndarray, ci_level: float = 0.9) -> StatsRow:
    """Descriptive statistics of one draw vector.

    Mode is the smallest most-frequent value; quartiles and the equal-tailed
    credible interval use linear interpolation; CV is 100*SD/Mean, defined as
    0 (with a warning) when the mean is 0.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.size == 0:
        raise InputError("cannot compute statistics of an empty draw set")
    if not 0.0 < ci_level < 1.0:
        raise InputError("ci_level must lie in (0, 1)")
    mean = float(draws.mean())
    sd = float(draws.std(ddof=1)) if draws.size > 1 else 0.0
    counts = Counter(draws.tolist())
    top = max(counts.values())
    mode = min(v for v, c in counts.items() if c == top)
    q1, median, q3 = (float(v) for v in np.percentile(draws, [25, 50, 75]))
    if mean == 0.0:
        logger.warning("draws have zero mean; defining CV = 0")
        cv = 0.0
    else:
        cv = 100.0 * sd / mean
    tail = (1.0 - ci_level) / 2.0
    ci_low, ci_high = (float(v) for v in np.percentile(draws, [100 * tail, 100 * (1 - tail)]))
    return StatsRow(mean=mean, mode=float(mode), median=median,
                    min=float(draws.min()), max=float(draws.max()),
                    q1=q1, q3=q3, iqr=q3 - q1, sd=sd, cv=cv,
                    ci_low=ci_low, ci_high=ci_high)
