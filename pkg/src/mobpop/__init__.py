"""Population count estimation from mobile network event data.

Four statistical layers connected by CSV interfaces:

- geolocation: per-device hidden Markov model on a tiled grid, producing
  posterior location and joint (consecutive-tick) location probabilities;
- dedup: per-device probability of being one of two devices carried by the
  same person;
- aggregation: Monte-Carlo draws of network-detected counts per region and
  of origin-destination flows;
- inference: target-population distributions combining detected counts with
  register populations and operator penetration rates.

A synthetic scenario simulator provides desk-scale input data, and the
``mobpop`` CLI orchestrates the layers with a content-addressed result cache.
"""

__version__ = "0.1.0"

from .datamodel import (  # noqa: F401
    AntennaCells,
    CountDraws,
    DuplicityTable,
    Event,
    EventLog,
    Grid,
    JointPosterior,
    ODDraws,
    PenetrationRate,
    PosteriorLocation,
    RegionPartition,
    RegisterPopulation,
    SignalDominance,
    StatsRow,
    TimeAxis,
)
from .errors import FitError, InputError, NumericalError, PipelineError  # noqa: F401
