"""Grant-free random access over MIMO-OTFS LEO links: channel simulation and
joint activity detection / channel estimation with coupled-prior GAMP."""

from .grid import ConfigurationError, OtfsGrid, default_grid, make_grid
from .hyper import EmOptions, Kernel2D, LearnedFilters, run_conv_gamp, run_dl_gamp, run_em_gamp
from .gamp import GampDivergence, run_fixed_prior
from .harness import ExperimentConfig, run_sweep, run_trial

__version__ = "0.1.0"
