"""Exception types shared across the package."""


class AvFusionError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(AvFusionError):
    """Tensor operands have incompatible dimensions."""


class ContractError(AvFusionError):
    """A caller violated an operation's precondition."""


class NumericError(AvFusionError):
    """A forward computation produced NaN/Inf from finite inputs."""


class VocabularyError(AvFusionError):
    """A token id falls outside the configured vocabulary."""


class ConfigError(AvFusionError):
    """Invalid configuration value; message names the offending field."""


class TrainingError(AvFusionError):
    """Training diverged (non-finite loss); message reports the step."""


class CorpusParseError(AvFusionError):
    """Corpus file is malformed; message names the line number."""


class DegenerateNoiseError(AvFusionError):
    """Noise track has zero power and cannot be scaled to a target SNR."""


class DegenerateSignalError(AvFusionError):
    """Signal has zero power, making the SNR undefined."""


class DependencyError(AvFusionError):
    """A required artifact (checkpoint, corpus, manifest) is missing."""


class CompatibilityError(AvFusionError):
    """Checkpoint and corpus/config disagree (e.g. vocabulary size)."""


class SchemaError(AvFusionError):
    """A results/report file is missing required columns or digests differ."""
