"""Exception types shared across the package."""


class AnoclassError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(AnoclassError):
    """Bad inputs: malformed trees, specs, configs, or taxonomy mismatches."""


class DatasetError(ValidationError):
    """Dataset tree or index problems (missing files, duplicate ids, ...)."""


class RefinementError(ValidationError):
    """Refinement spec references unknown entities or produces an invalid index."""


class TaxonomyError(ValidationError):
    """Taxonomy file problems or mismatches against a dataset index."""


class ConfigError(ValidationError):
    """Invalid run, backend, or detector configuration."""


class ExpertError(ValidationError):
    """Vision-expert failures: missing maps, unfitted banks, shape mismatches."""


class GatewayError(AnoclassError):
    """Backend call failed after all retries."""

    def __init__(self, message: str, sample_id: str | None = None):
        super().__init__(message)
        self.sample_id = sample_id
