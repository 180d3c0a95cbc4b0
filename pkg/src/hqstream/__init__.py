"""Progressive hierarchical quantization and coding of Gaussian latents."""

from .errors import (
    DecodeError,
    DegeneratePMFError,
    FormatError,
    HQError,
    NestingError,
    ScheduleError,
    ShapeError,
)
from .latent import (
    FULL_SELECTION_GAMMA,
    GaussianParams,
    SourceConfig,
    StepSchedule,
    load_latent,
    sample_source,
    store_latent,
    trit_schedule,
    validate_schedule,
)
from .stream import decode, encode, inspect_container, measure, truncate

__version__ = "0.1.0"
from .estimator import HierarchicalQuantizer
from .optimize import LossConfig, optimize_schedule, total_loss
