"""Command-line pipeline orchestrator.

One subcommand per layer (simulate, geolocate, dedup, aggregate, infer) plus
an end-to-end `pipeline` command. Results are cached content-addressed: a
subcommand whose inputs and relevant settings are unchanged restores its
outputs from the cache instead of recomputing. All settings can come from a
JSON config file, with command-line flags taking precedence.

Exit codes: 0 success, 1 input error, 2 numerical failure.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np

from . import fileio
from .aggregation import sample_detected_counts, sample_od_flows
from .cache import ResultCache
from .datamodel import Grid, TimeAxis
from .dedup import DuplicityConfig, compute_duplicity
from .errors import InputError, NumericalError
from .geolocation import GeolocationConfig, geolocate_all
from .inference import (
    compute_dedup_factors,
    compute_distr_params,
    compute_initial_population,
    compute_population_od,
    compute_population_t,
    write_od_population_draws,
    write_population_draws,
    write_time_population_draws,
)
from .simulator import Antenna, Scenario, simulate, write_scenario_files


@dataclass
class PipelineConfig:
    """Every setting of every layer; loadable from a JSON file."""

    workdir: str = "mobpop_out"
    seed: int = 1
    workers: int = 1
    cache_dir: str | None = None   # default: <workdir>/cache
    use_cache: bool = True
    # scenario
    grid_nx: int = 10
    grid_ny: int = 10
    tile_size: float = 100.0
    t_start: int = 0
    t_end: int = 19
    t_increment: int = 1
    n_antennas: int = 5
    antenna_power: float = 250.0
    path_loss_exponent: float = 4.0
    n_persons: int = 30
    prob_one_device: float = 0.4
    prob_two_devices: float = 0.2
    n_regions: int = 3
    min_dominance: float = 0.05
    # geolocation
    adjacency: str = "queen"
    retrain: int = 1
    optimize: bool = True
    p_stay: float = 0.9
    p_diag_ratio: float = 0.5
    maxiter: int = 120
    # dedup
    method: str = "one_to_one"
    prior: float = 0.2
    lambda_: float | None = None
    # aggregation
    draws: int = 200
    # inference
    pop_distr: str = "BetaNegBin"
    ci_level: float = 0.9
    dispersion: float = 1.5
    rnd_val: bool = True

    @classmethod
    def load(cls, config_path=None, **overrides) -> "PipelineConfig":
        values = {}
        if config_path is not None:
            path = Path(config_path)
            if not path.exists():
                raise InputError(f"config file not found: {path}")
            try:
                loaded = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}: malformed JSON config: {exc}") from None
            known = {f.name for f in dataclasses.fields(cls)}
            unknown = set(loaded) - known
            if unknown:
                raise InputError(f"{path}: unknown config keys {sorted(unknown)}")
            values.update(loaded)
        values.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**values)
        if cfg.seed < 0 or cfg.workers < 1:
            raise InputError("seed must be nonnegative and workers positive")
        return cfg


class Layout:
    """File layout inside the working directory."""

    def __init__(self, cfg: PipelineConfig):
        self.workdir = Path(cfg.workdir)
        self.input_dir = self.workdir / "input"
        self.geo_dir = self.workdir / "geo"
        self.events = self.input_dir / "events.csv"
        self.signal = self.input_dir / "signal.csv"
        self.grid = self.input_dir / "grid.csv"
        self.regions = self.input_dir / "regions.csv"
        self.antenna_cells = self.input_dir / "antenna_cells.csv"
        self.simulation = self.input_dir / "simulation.xml"
        self.register = self.input_dir / "pop_reg.csv"
        self.pnt_rate = self.input_dir / "pnt_rate.csv"
        self.duplicity = self.workdir / "duplicity.csv"
        self.nnet = self.workdir / "nnet.csv"
        self.nnet_od = self.workdir / "nnetOD.csv"
        self.stats_initial = self.workdir / "stats_initial.csv"
        self.draws_initial = self.workdir / "pop_draws_initial.csv"
        self.stats_t = self.workdir / "stats_t.csv"
        self.draws_t = self.workdir / "pop_draws_t.csv"
        self.stats_od = self.workdir / "stats_od.csv"
        self.draws_od = self.workdir / "pop_draws_od.csv"
        self.cache_dir = Path(cfg.cache_dir) if cfg.cache_dir else self.workdir / "cache"

    def scenario_inputs(self) -> dict[str, Path]:
        return {"events": self.events, "signal": self.signal, "grid": self.grid,
                "regions": self.regions, "antenna_cells": self.antenna_cells,
                "simulation": self.simulation, "register": self.register,
                "pnt_rate": self.pnt_rate}


def build_scenario(cfg: PipelineConfig) -> Scenario:
    """Deterministic synthetic scenario from the config: antennas on an even
    sub-lattice over the grid."""
    grid = Grid(cfg.grid_nx, cfg.grid_ny, cfg.tile_size, cfg.tile_size)
    width = cfg.grid_nx * cfg.tile_size
    height = cfg.grid_ny * cfg.tile_size
    cols = int(np.ceil(np.sqrt(cfg.n_antennas)))
    rows = int(np.ceil(cfg.n_antennas / cols))
    antennas = []
    for k in range(cfg.n_antennas):
        r, c = divmod(k, cols)
        antennas.append(Antenna(
            antenna_id=f"A{k + 1:02d}",
            x=(c + 0.5) * width / cols,
            y=(r + 0.5) * height / rows,
            power=cfg.antenna_power,
            path_loss_exponent=cfg.path_loss_exponent,
        ))
    return Scenario(
        grid=grid,
        time_axis=TimeAxis(cfg.t_start, cfg.t_end, cfg.t_increment),
        antennas=tuple(antennas),
        n_persons=cfg.n_persons,
        prob_one_device=cfg.prob_one_device,
        prob_two_devices=cfg.prob_two_devices,
        rng_seed=cfg.seed,
        n_regions=cfg.n_regions,
        min_dominance=cfg.min_dominance,
    )


def _require_inputs(paths: dict[str, Path], producer: str) -> None:
    missing = [str(p) for p in paths.values() if not Path(p).exists()]
    if missing:
        raise InputError(f"missing upstream files {missing[:3]}; "
                         f"run `mobpop {producer}` first")


def _config_subset(cfg: PipelineConfig, names: list[str]) -> dict:
    return {n: getattr(cfg, n) for n in names}


def _cached_step(cfg: PipelineConfig, operation: str, key_config: dict,
                 inputs: dict[str, Path], outputs: dict[str, Path], compute) -> bool:
    """Run `compute` unless the cache already holds this exact problem.

    Returns True on a cache hit. Outputs may be files or directories; they
    are stored after a fresh run and copied back verbatim on a hit.
    """
    cache = ResultCache(Layout(cfg).cache_dir) if cfg.use_cache else None
    key = cache.key(operation, key_config, inputs) if cache else None
    if cache is not None:
        entry = cache.lookup(key)
        if entry is not None:
            cache.restore(entry, outputs)
            click.echo(f"[cache] hit for {operation}")
            return True
    compute()
    if cache is not None:
        cache.store(key, operation, outputs)
    return False


SCENARIO_KEYS = ["seed", "grid_nx", "grid_ny", "tile_size", "t_start", "t_end",
                 "t_increment", "n_antennas", "antenna_power", "path_loss_exponent",
                 "n_persons", "prob_one_device", "prob_two_devices", "n_regions",
                 "min_dominance"]
GEO_KEYS = ["seed", "adjacency", "retrain", "optimize", "p_stay", "p_diag_ratio", "maxiter"]
DEDUP_KEYS = GEO_KEYS + ["method", "prior", "lambda_"]
AGG_KEYS = ["seed", "draws"]
INFER_KEYS = ["seed", "pop_distr", "ci_level", "dispersion", "rnd_val"]


def run_simulate(cfg: PipelineConfig) -> bool:
    layout = Layout(cfg)
    scenario = build_scenario(cfg)

    def compute():
        click.echo(f"[simulate] {scenario.n_persons} persons, "
                   f"{len(scenario.antennas)} antennas, seed {cfg.seed}")
        result = simulate(scenario)
        write_scenario_files(result, layout.input_dir)

    return _cached_step(cfg, "simulate", _config_subset(cfg, SCENARIO_KEYS), {},
                        dict(layout.scenario_inputs()), compute)


def _load_shared(layout: Layout):
    grid = fileio.read_grid(layout.grid)
    axis = fileio.read_simulation_params(layout.simulation)
    events = fileio.read_events(layout.events)
    signal = fileio.read_signal(layout.signal, grid)
    return grid, axis, events, signal


def _geo_config(cfg: PipelineConfig) -> GeolocationConfig:
    return GeolocationConfig(adjacency=cfg.adjacency, retrain=cfg.retrain, seed=cfg.seed,
                             workers=cfg.workers, optimize=cfg.optimize, p_stay=cfg.p_stay,
                             p_diag_ratio=cfg.p_diag_ratio, maxiter=cfg.maxiter)


def run_geolocate(cfg: PipelineConfig) -> bool:
    layout = Layout(cfg)
    inputs = {"events": layout.events, "signal": layout.signal, "grid": layout.grid,
              "simulation": layout.simulation}
    _require_inputs(inputs, "simulate")

    def compute():
        grid, axis, events, signal = _load_shared(layout)
        click.echo(f"[geolocate] fitting {len(events.device_ids())} devices "
                   f"on {cfg.workers} worker(s)")
        geolocate_all(events, signal, grid, axis, _geo_config(cfg), out_dir=layout.geo_dir)

    return _cached_step(cfg, "geolocate", _config_subset(cfg, GEO_KEYS), inputs,
                        {"geo": layout.geo_dir}, compute)


def run_dedup(cfg: PipelineConfig, geodata=None) -> bool:
    layout = Layout(cfg)
    inputs = {"events": layout.events, "signal": layout.signal, "grid": layout.grid,
              "simulation": layout.simulation, "antenna_cells": layout.antenna_cells}
    _require_inputs(inputs, "simulate")

    def compute():
        grid, axis, events, signal = _load_shared(layout)
        click.echo(f"[dedup] method {cfg.method}, prior {cfg.prior}")
        cells = fileio.read_antenna_cells(layout.antenna_cells)
        geo = geodata if geodata is not None else geolocate_all(
            events, signal, grid, axis, _geo_config(cfg))
        dedup_cfg = DuplicityConfig(method=cfg.method, prior_two_devices=cfg.prior,
                                    lambda_=cfg.lambda_, adjacency=cfg.adjacency,
                                    workers=cfg.workers)
        table = compute_duplicity(dedup_cfg, events, geo, grid, cells)
        fileio.write_duplicity(layout.duplicity, table)

    return _cached_step(cfg, "dedup", _config_subset(cfg, DEDUP_KEYS), inputs,
                        {"duplicity.csv": layout.duplicity}, compute)


def run_aggregate(cfg: PipelineConfig) -> bool:
    layout = Layout(cfg)
    inputs = {"duplicity": layout.duplicity, "regions": layout.regions,
              "grid": layout.grid, "simulation": layout.simulation, "geo": layout.geo_dir}
    _require_inputs({"duplicity": layout.duplicity}, "dedup")
    _require_inputs({"geo": layout.geo_dir}, "geolocate")
    _require_inputs({"regions": layout.regions, "grid": layout.grid,
                    "simulation": layout.simulation}, "simulate")

    def compute():
        grid = fileio.read_grid(layout.grid)
        axis = fileio.read_simulation_params(layout.simulation)
        regions = fileio.read_regions(layout.regions, grid)
        duplicity = fileio.read_duplicity(layout.duplicity)
        posteriors, joints = _read_geo_outputs(layout, axis)
        click.echo(f"[aggregate] {cfg.draws} draws over {len(posteriors)} devices")
        counts = sample_detected_counts(cfg.draws, duplicity, regions, posteriors,
                                        axis.times, seed=cfg.seed, workers=cfg.workers)
        fileio.write_count_draws(layout.nnet, counts)
        flows = sample_od_flows(cfg.draws, duplicity, regions, joints,
                                seed=cfg.seed, workers=cfg.workers)
        fileio.write_od_draws(layout.nnet_od, flows)

    return _cached_step(cfg, "aggregate", _config_subset(cfg, AGG_KEYS), inputs,
                        {"nnet.csv": layout.nnet, "nnetOD.csv": layout.nnet_od}, compute)


def _read_geo_outputs(layout: Layout, axis: TimeAxis):
    posteriors, joints = {}, {}
    post_files = sorted(layout.geo_dir.glob(f"{fileio.POSTERIOR_PREFIX}*.csv"))
    if not post_files:
        raise InputError(f"no posterior files under {layout.geo_dir}; run `mobpop geolocate` first")
    for path in post_files:
        device = path.stem[len(fileio.POSTERIOR_PREFIX):]
        posteriors[device] = fileio.read_posterior(path, device)
        jpath = fileio.joint_path(layout.geo_dir, device)
        if not jpath.exists():
            raise InputError(f"missing joint posterior file for device {device}")
        joints[device] = fileio.read_joint(jpath, device, time_axis=axis)
    return posteriors, joints


def run_infer(cfg: PipelineConfig) -> bool:
    layout = Layout(cfg)
    inputs = {"nnet": layout.nnet, "nnetOD": layout.nnet_od, "duplicity": layout.duplicity,
              "regions": layout.regions, "grid": layout.grid, "register": layout.register,
              "pnt_rate": layout.pnt_rate, "simulation": layout.simulation,
              "geo": layout.geo_dir}
    _require_inputs({"nnet": layout.nnet, "nnetOD": layout.nnet_od}, "aggregate")
    _require_inputs({"duplicity": layout.duplicity}, "dedup")
    _require_inputs({"register": layout.register, "pnt_rate": layout.pnt_rate}, "simulate")

    outputs = {"stats_initial.csv": layout.stats_initial,
               "pop_draws_initial.csv": layout.draws_initial,
               "stats_t.csv": layout.stats_t, "pop_draws_t.csv": layout.draws_t,
               "stats_od.csv": layout.stats_od, "pop_draws_od.csv": layout.draws_od}

    def compute():
        grid = fileio.read_grid(layout.grid)
        axis = fileio.read_simulation_params(layout.simulation)
        regions = fileio.read_regions(layout.regions, grid)
        duplicity = fileio.read_duplicity(layout.duplicity)
        register = fileio.read_register(layout.register)
        pnt_rate = fileio.read_penetration_rate(layout.pnt_rate)
        posteriors, _ = _read_geo_outputs(layout, axis)
        nnet = fileio.read_count_draws(layout.nnet)
        nnet_od = fileio.read_od_draws(layout.nnet_od)

        click.echo(f"[infer] {cfg.pop_distr}, {len(nnet.time_instants())} time instants")
        omega = compute_dedup_factors(duplicity, posteriors, regions, axis.t_start)
        params = compute_distr_params(omega, register, pnt_rate, regions, grid,
                                      dispersion=cfg.dispersion)
        initial = compute_initial_population(nnet, params, cfg.pop_distr, rnd_val=True,
                                             seed=cfg.seed, t0=axis.t_start,
                                             ci_level=cfg.ci_level)
        fileio.write_stats(layout.stats_initial, initial.stats)
        write_population_draws(layout.draws_initial, initial.draws)

        by_time = compute_population_t(initial.draws, nnet_od, rnd_val=cfg.rnd_val,
                                       ci_level=cfg.ci_level)
        fileio.write_stats(layout.stats_t,
                           {(res.time, r): s for res in by_time for r, s in res.stats.items()},
                           key_columns=("time", "region"))
        write_time_population_draws(layout.draws_t, by_time)

        by_pair = compute_population_od(initial.draws, nnet_od, rnd_val=cfg.rnd_val,
                                        ci_level=cfg.ci_level)
        fileio.write_stats(layout.stats_od,
                           {(res.time_from, res.time_to, rf, rt): s
                            for res in by_pair for (rf, rt), s in res.stats.items()},
                           key_columns=("time_from", "time_to", "region_from", "region_to"))
        write_od_population_draws(layout.draws_od, by_pair)

    return _cached_step(cfg, "infer", _config_subset(cfg, INFER_KEYS), inputs, outputs, compute)


def _print_summary(cfg: PipelineConfig) -> None:
    layout = Layout(cfg)
    stats = fileio.read_stats(layout.stats_initial)
    click.echo("initial population estimates per region "
               f"({cfg.pop_distr}, {int(cfg.ci_level * 100)}% CI):")
    click.echo(f"{'region':>6} {'Mean':>9} {'Median':>9} {'SD':>9} {'CI_LOW':>9} {'CI_HIGH':>9}")
    for region in sorted(stats):
        s = stats[region]
        click.echo(f"{region:>6} {s.mean:>9.2f} {s.median:>9.2f} {s.sd:>9.2f} "
                   f"{s.ci_low:>9.2f} {s.ci_high:>9.2f}")


CONFIG_OPTIONS = [
    click.option("--config", "config_path", type=click.Path(), default=None,
                 help="JSON file with any PipelineConfig settings."),
    click.option("--workdir", default=None, help="Working directory for all files."),
    click.option("--seed", type=int, default=None, help="Global random seed."),
    click.option("--workers", type=int, default=None, help="Worker process count."),
    click.option("--cache-dir", default=None, help="Cache directory (default workdir/cache)."),
    click.option("--no-cache", "use_cache", flag_value=False, default=None,
                 help="Disable the result cache."),
]

LAYER_OPTIONS = [
    click.option("--method", default=None,
                 type=click.Choice(["one_to_one", "pairs", "trajectory"]),
                 help="Duplicity method."),
    click.option("--pop-distr", default=None,
                 type=click.Choice(["BetaNegBin", "NegBin", "STNegBin"]),
                 help="Population count distribution."),
    click.option("--retrain", type=int, default=None, help="HMM optimizer restarts."),
    click.option("--lambda", "lambda_", type=float, default=None,
                 help="Prior-odds scale for the one_to_one method."),
    click.option("--prior", type=float, default=None,
                 help="A-priori probability of owning two devices."),
    click.option("--draws", type=int, default=None, help="Monte-Carlo draw count."),
]


def _with_options(options):
    def wrap(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn
    return wrap


@click.group()
def cli():
    """Population estimation pipeline over mobile network event data."""


@cli.command(name="simulate")
@_with_options(CONFIG_OPTIONS)
def simulate_cmd(config_path, **overrides):
    """Generate a synthetic scenario (events, signal, grid, regions, truth-derived register)."""
    cfg = PipelineConfig.load(config_path, **overrides)
    run_simulate(cfg)


@cli.command(name="geolocate")
@_with_options(CONFIG_OPTIONS + [LAYER_OPTIONS[2]])
def geolocate_cmd(config_path, **overrides):
    """Fit per-device HMMs and write posterior/joint location files."""
    cfg = PipelineConfig.load(config_path, **overrides)
    run_geolocate(cfg)


@cli.command(name="dedup")
@_with_options(CONFIG_OPTIONS + [LAYER_OPTIONS[0], LAYER_OPTIONS[3], LAYER_OPTIONS[4]])
def dedup_cmd(config_path, **overrides):
    """Compute per-device duplicity probabilities."""
    cfg = PipelineConfig.load(config_path, **overrides)
    run_dedup(cfg)


@cli.command(name="aggregate")
@_with_options(CONFIG_OPTIONS + [LAYER_OPTIONS[5]])
def aggregate_cmd(config_path, **overrides):
    """Draw detected-count and origin-destination Monte-Carlo samples."""
    cfg = PipelineConfig.load(config_path, **overrides)
    run_aggregate(cfg)


@cli.command(name="infer")
@_with_options(CONFIG_OPTIONS + [LAYER_OPTIONS[1]])
def infer_cmd(config_path, **overrides):
    """Estimate target-population distributions (initial, per-time, OD)."""
    cfg = PipelineConfig.load(config_path, **overrides)
    run_infer(cfg)


@cli.command(name="pipeline")
@_with_options(CONFIG_OPTIONS + LAYER_OPTIONS)
@click.option("--skip-simulate", is_flag=True, default=False,
              help="Use existing input files instead of simulating.")
def pipeline_cmd(config_path, skip_simulate, **overrides):
    """Run simulate -> geolocate -> dedup -> aggregate -> infer end to end."""
    cfg = PipelineConfig.load(config_path, **overrides)
    if not skip_simulate:
        run_simulate(cfg)
    run_geolocate(cfg)
    run_dedup(cfg)
    run_aggregate(cfg)
    run_infer(cfg)
    _print_summary(cfg)


class _DedupeFilter(logging.Filter):
    """Emit each distinct log message once (zero OD cells would repeat it)."""

    def __init__(self):
        super().__init__()
        self._seen = set()

    def filter(self, record):
        key = (record.name, record.getMessage())
        if key in self._seen:
            return False
        self._seen.add(key)
        return True


def _setup_logging() -> None:
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler.addFilter(_DedupeFilter())
    logging.basicConfig(level=logging.WARNING, handlers=[handler])


def main(argv=None) -> None:
    _setup_logging()
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except InputError as exc:
        click.echo(f"input error: {exc}", err=True)
        sys.exit(1)
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    main()
