"""Co-occurrent feature matching (inter-image spectral co-masks and
intra-image top-k propagation) on a small numpy CAM classifier."""

from .errors import (ComatchError, ContractError, DataError, DimensionError, NumericAbort,
                     ParameterError, ParseError)

__version__ = "0.1.0"

__all__ = [
    "ComatchError", "ContractError", "DataError", "DimensionError", "NumericAbort",
    "ParameterError", "ParseError", "__version__",
]
