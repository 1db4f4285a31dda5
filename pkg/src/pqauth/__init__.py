"""PPG biometric verification from diffusive (p,q)-plane patterns.

Pipeline: synthesize or load PPG records, condition them (Butterworth
band-pass variants, optional [0,1] normalization), map 1000-point segments
to binary (p,q)-plane images through the 0-1 test's translation variables,
and score identity claims with a Siamese residual CNN.  Evaluation covers
ROC/AUC, precision/recall/F1, EER and rank-1 identification.
"""

from .errors import (
    ConflictError,
    DegenerateRangeError,
    FormatError,
    InsufficientDataError,
    ModelVersionError,
    NotEnrolledError,
    ParameterError,
    PqAuthError,
    ShapeError,
    TrainingDivergedError,
)

__version__ = "0.1.0"

__all__ = [
    "ConflictError",
    "DegenerateRangeError",
    "FormatError",
    "InsufficientDataError",
    "ModelVersionError",
    "NotEnrolledError",
    "ParameterError",
    "PqAuthError",
    "ShapeError",
    "TrainingDivergedError",
    "__version__",
]
