"""
qdcascade: simulation and analysis of photon statistics from a coherently
driven quantum-dot biexciton-exciton cascade.

Times are integer or float picoseconds throughout. Channel 0 carries XX
photons and channel 1 X photons.
"""

from .core import (CHANNEL_X, CHANNEL_XX, DetectionChain, EmitterModel, FitResult, Histogram,
                   PeakSeries, PulseTrain, RabiParams, TagStream, TimeTag)
from .errors import (CalibrationError, ConfigurationError, ContractError, FitError, FormatError,
                     IntegrityError, ModelDomainError, NormalizationError, QDCascadeError,
                     UndefinedFidelityError, ValidationError)

__version__ = "0.1.0"
