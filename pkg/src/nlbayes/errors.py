"""Exception types shared across the package.

Every error carries a short machine-readable ``code`` so the command line
front end can emit stable one-line diagnostics.
"""


class NlbayesError(Exception):
    """Base class for package errors."""

    code = "runtime"


class FormatError(NlbayesError):
    """Malformed or unsupported file content."""

    code = "bad-format"


class CoverageError(NlbayesError):
    """A reconstruction target pixel is covered by no patch."""

    code = "coverage-gap"


class SearchError(NlbayesError):
    """Neighbor search cannot satisfy the request (too few candidates)."""

    code = "knn-candidates"


class FactorizationError(NlbayesError):
    """Cholesky factorization failed even after jitter escalation."""

    code = "cholesky-failure"


class CheckpointMismatchError(NlbayesError):
    """Checkpoint configuration conflicts with the requested inference setup."""

    code = "ckpt-mismatch"


class ConfigError(NlbayesError):
    """Invalid or inconsistent configuration."""

    code = "config"


class NumericsError(NlbayesError):
    """Non-finite value produced where finite math is required."""

    code = "non-finite"
