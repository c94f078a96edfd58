"""Exception types shared across the toolkit."""


class ConfigurationError(ValueError):
    """A config value or structure is invalid (bad grid, unknown block, ...)."""


class BackendError(RuntimeError):
    """An embedding or extraction backend failed; never silently defaulted."""


class ExtractionError(RuntimeError):
    """Object extraction failed for a caption."""


class CurationError(RuntimeError):
    """A caption/mention pair could not be curated (e.g. span straddles a split)."""


class TrainingError(RuntimeError):
    """Training aborted; message names the offending step/batch."""


class DegenerateVarianceError(ValueError):
    """Both samples are constant and equal; the t statistic is undefined."""


class MissingArtifactError(FileNotFoundError):
    """An upstream pipeline artifact is absent; message names the producing command."""

    def __init__(self, path, producer: str):
        super().__init__(f"missing artifact {path}; produce it with `efuf {producer}` first")
        self.path = path
        self.producer = producer
