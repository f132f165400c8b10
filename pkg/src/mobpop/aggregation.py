"""Monte-Carlo draws of network-detected counts and origin-destination flows.

The number of individuals detected per region is a sum over devices of
Bernoulli-weighted categorical variables (a Poisson-multinomial mixture), so
draws are generated by convolution: per draw, every device samples a tile
from its location posterior and a duplicity indicator from its dupP; a
device counts 1 when alone and 1/2 when its owner carries two, which is what
produces the half-integer support visible in the outputs.

Each draw has an independent seed stream derived from (seed, iter), so
results are identical no matter how draws are partitioned across workers.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from multiprocessing import get_context

import numpy as np

from .datamodel import (
    CountDraws,
    DuplicityTable,
    JointPosterior,
    ODDraws,
    PosteriorLocation,
    RegionPartition,
)
from .errors import InputError


@dataclass(frozen=True)
class _CategoricalBank:
    """Vectorized inverse-CDF sampler for a (keys, slots) family of
    categorical distributions with ragged support, padded to equal width."""

    cum: np.ndarray     # (n_keys, n_slots, max_support) cumulative probabilities
    values: np.ndarray  # same shape, the encoded outcomes

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """One outcome per (key, slot), shape (n_keys, n_slots)."""
        u = rng.random(self.cum.shape[:2])
        idx = (self.cum < u[..., None]).sum(axis=2)
        keys = np.arange(self.cum.shape[0])[:, None]
        slots = np.arange(self.cum.shape[1])[None, :]
        return self.values[keys, slots, idx]


def _build_bank(support_table: list[list[tuple[np.ndarray, np.ndarray]]]) -> _CategoricalBank:
    n_keys = len(support_table)
    n_slots = len(support_table[0])
    width = max(len(vals) for row in support_table for vals, _ in row)
    cum = np.ones((n_keys, n_slots, width))
    values = np.zeros((n_keys, n_slots, width), dtype=np.int64)
    for d, row in enumerate(support_table):
        for s, (vals, probs) in enumerate(row):
            c = np.cumsum(probs)
            c /= c[-1]
            cum[d, s, :len(c)] = c
            cum[d, s, len(c):] = 1.0
            values[d, s, :len(vals)] = vals
            values[d, s, len(vals):] = vals[-1]
    return _CategoricalBank(cum, values)


def counts_from_tiles(tiles: np.ndarray, weights: np.ndarray,
                      regions: RegionPartition) -> np.ndarray:
    """Weighted per-region counts (index region-1) of devices at given tiles."""
    region_idx = regions.tile_region[tiles] - 1
    return np.bincount(region_idx, weights=weights, minlength=regions.n_regions)


def flows_from_paths(tiles_from: np.ndarray, tiles_to: np.ndarray, weights: np.ndarray,
                     regions: RegionPartition) -> np.ndarray:
    """Weighted (n_regions, n_regions) flow matrix for one tick pair."""
    nr = regions.n_regions
    rf = regions.tile_region[tiles_from] - 1
    rt = regions.tile_region[tiles_to] - 1
    flows = np.zeros((nr, nr))
    np.add.at(flows, (rf, rt), weights)
    return flows


def _device_vector(duplicity: DuplicityTable, devices: list[str]) -> np.ndarray:
    missing = [d for d in devices if d not in duplicity.dup_probs]
    if missing:
        raise InputError(f"duplicity table missing devices: {missing[:5]}")
    return np.asarray([duplicity[d] for d in devices])


def _sample_weights(rng: np.random.Generator, dup: np.ndarray) -> np.ndarray:
    """Per-device draw weight: 1, or 1/2 when the duplicity indicator fires.

    The indicator is sampled once per draw and held fixed across times, since
    a device's multiplicity does not change within a draw.
    """
    z = rng.random(dup.size) < dup
    return 1.0 - 0.5 * z


def _count_bank(posteriors: dict[str, PosteriorLocation], devices: list[str],
                times: list[int]) -> _CategoricalBank:
    table = []
    for d in devices:
        post = posteriors[d]
        covered = set(post.time_instants())
        row = []
        for t in times:
            if t not in covered:
                raise InputError(f"device {d} has no posterior at time {t}")
            row.append(post.at(t))
        table.append(row)
    return _build_bank(table)


def _count_chunk(args):
    iters, seed, dup, bank, tile_region, n_regions, n_times = args
    out = np.empty((len(iters), n_times, n_regions))
    for row, k in enumerate(iters):
        rng = np.random.default_rng([seed, k])
        w = _sample_weights(rng, dup)
        tiles = bank.sample(rng)                      # (devices, times)
        region_idx = tile_region[tiles] - 1
        counts = np.zeros((n_times, n_regions))
        np.add.at(counts, (np.arange(n_times)[None, :], region_idx),
                  np.broadcast_to(w[:, None], region_idx.shape))
        out[row] = counts
    return out


def sample_detected_counts(n: int, duplicity: DuplicityTable, regions: RegionPartition,
                           posteriors: dict[str, PosteriorLocation], times: list[int],
                           seed: int = 0, workers: int = 1) -> CountDraws:
    """Draw n Monte-Carlo realizations of detected counts per (time, region)."""
    if n < 1:
        raise InputError("n must be at least 1")
    devices = sorted(posteriors)
    if not devices:
        raise InputError("no posteriors given")
    dup = _device_vector(duplicity, devices)
    bank = _count_bank(posteriors, devices, list(times))
    counts = _run_chunks(_count_chunk, n, workers,
                         (seed, dup, bank, regions.tile_region, regions.n_regions, len(times)))
    return _counts_to_draws(counts, list(times), regions)


def _counts_to_draws(counts: np.ndarray, times: list[int], regions: RegionPartition) -> CountDraws:
    n, n_times, n_regions = counts.shape
    iters = np.repeat(np.arange(1, n + 1), n_times * n_regions)
    t_col = np.tile(np.repeat(times, n_regions), n)
    r_col = np.tile(np.tile(regions.region_ids(), n_times), n)
    return CountDraws(t_col, r_col, counts.reshape(-1), iters)


def _joint_bank(joints: dict[str, JointPosterior], devices: list[str],
                pairs: list[tuple[int, int]], n_tiles: int) -> _CategoricalBank:
    table = []
    for d in devices:
        joint = joints[d]
        have = set(joint.pair_instants())
        row = []
        for tf, tt in pairs:
            if (tf, tt) not in have:
                raise InputError(f"device {d} has no joint posterior for ticks ({tf}, {tt})")
            tiles_from, tiles_to, probs = joint.at(tf)
            row.append((tiles_from.astype(np.int64) * n_tiles + tiles_to, probs))
        table.append(row)
    return _build_bank(table)


def _flow_chunk(args):
    iters, seed, dup, bank, tile_region, n_regions, n_pairs, n_tiles = args
    out = np.empty((len(iters), n_pairs, n_regions, n_regions))
    for row, k in enumerate(iters):
        rng = np.random.default_rng([seed, k])
        w = _sample_weights(rng, dup)
        encoded = bank.sample(rng)                    # (devices, pairs)
        rf = tile_region[encoded // n_tiles] - 1
        rt = tile_region[encoded % n_tiles] - 1
        flows = np.zeros((n_pairs, n_regions, n_regions))
        np.add.at(flows, (np.arange(n_pairs)[None, :], rf, rt),
                  np.broadcast_to(w[:, None], rf.shape))
        out[row] = flows
    return out


def sample_od_flows(n: int, duplicity: DuplicityTable, regions: RegionPartition,
                    joints: dict[str, JointPosterior], seed: int = 0,
                    workers: int = 1) -> ODDraws:
    """Draw n Monte-Carlo realizations of region-to-region flows per tick pair."""
    if n < 1:
        raise InputError("n must be at least 1")
    devices = sorted(joints)
    if not devices:
        raise InputError("no joint posteriors given")
    pairs = sorted({p for j in joints.values() for p in j.pair_instants()})
    if not pairs:
        raise InputError("joint posteriors hold no tick pairs")
    dup = _device_vector(duplicity, devices)
    n_tiles = regions.n_tiles
    bank = _joint_bank(joints, devices, pairs, n_tiles)
    flows = _run_chunks(_flow_chunk, n, workers,
                        (seed, dup, bank, regions.tile_region, regions.n_regions,
                         len(pairs), n_tiles))
    return _flows_to_draws(flows, pairs, regions)


def _flows_to_draws(flows: np.ndarray, pairs: list[tuple[int, int]],
                    regions: RegionPartition) -> ODDraws:
    n, n_pairs, nr, _ = flows.shape
    region_ids = np.asarray(regions.region_ids())
    iters = np.repeat(np.arange(1, n + 1), n_pairs * nr * nr)
    tf = np.tile(np.repeat([p[0] for p in pairs], nr * nr), n)
    tt = np.tile(np.repeat([p[1] for p in pairs], nr * nr), n)
    rf = np.tile(np.tile(np.repeat(region_ids, nr), n_pairs), n)
    rt = np.tile(np.tile(np.tile(region_ids, nr), n_pairs), n)
    return ODDraws(tf, tt, rf, rt, flows.reshape(-1), iters)


def _run_chunks(chunk_fn, n: int, workers: int, common_args: tuple) -> np.ndarray:
    all_iters = np.arange(1, n + 1)
    if workers > 1 and n > 1:
        splits = [c for c in np.array_split(all_iters, workers * 4) if c.size]
        tasks = [(chunk.tolist(), *common_args) for chunk in splits]
        with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("fork")) as pool:
            parts = list(pool.map(chunk_fn, tasks))
        return np.concatenate(parts, axis=0)
    return chunk_fn((all_iters.tolist(), *common_args))
