"""Exception hierarchy shared across the package."""


class GlaucomaOctError(Exception):
    """Base class for all package errors."""


class DimensionError(GlaucomaOctError, ValueError):
    """Tensor extents are incompatible with an operation."""


class ParameterError(GlaucomaOctError, ValueError):
    """A scalar argument is outside its admissible range."""


class ConfigurationError(GlaucomaOctError, ValueError):
    """A model, training or generator configuration is inconsistent."""


class DataError(GlaucomaOctError):
    """Dataset ingestion failed."""


class MissingImageError(DataError):
    pass


class UnknownLabelError(DataError):
    pass


class DuplicateSampleError(DataError):
    pass


class ManifestFormatError(DataError):
    pass


class PartitionError(GlaucomaOctError):
    """A patient-grouped split cannot be built."""


class UndefinedMetricError(GlaucomaOctError, ValueError):
    """A metric is undefined for the given input (e.g. single-class AUC)."""


class UnsupportedArchitectureError(GlaucomaOctError):
    pass


class ArchiveError(GlaucomaOctError):
    """Base class for weight archive failures."""


class ArchiveFormatError(ArchiveError):
    """Bad magic, truncated payload or unknown dtype code."""


class DuplicateTensorError(ArchiveError):
    pass


class TensorShapeError(ArchiveError):
    pass


class MissingTensorError(ArchiveError):
    pass


class UnexpectedTensorError(ArchiveError):
    pass
