"""Resolution-adaptive multi-scale network with early exits, on a small numpy autodiff engine."""

from .config import RANetConfig, StepMode, load_preset, resolve_config, validate_config
from .errors import (
    ConfigError,
    DataError,
    DegenerateBatchError,
    FormatError,
    InfeasibleBudgetError,
    RANetError,
    TrainingDivergedError,
    UsageError,
)
from .inference import ExitPolicy, forward_adaptive, forward_anytime, select_exit
from .network import NetworkGraph, build_graph

__version__ = "0.1.0"
