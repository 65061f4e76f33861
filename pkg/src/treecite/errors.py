"""Exception types shared across the package."""


class TreeciteError(Exception):
    """Base class for all package errors."""


class ConfigError(TreeciteError):
    """Invalid configuration, corpus, dataset, or CLI usage. Maps to exit code 2."""


class ProtocolError(TreeciteError):
    """Model output did not match the action grammar. Carries the raw text."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class CitationError(TreeciteError):
    """An output's citations were all invalid after filtering against visible documents."""


class SearchExhausted(TreeciteError):
    """No expandable node remains anywhere in the tree."""


class EvaluationError(TreeciteError):
    """A reward or metric computation failed (usually a backend failure)."""


class BackendUnavailable(TreeciteError):
    """A model endpoint stayed unreachable after retries."""


class CapabilityError(TreeciteError):
    """A backend lacks a required capability (e.g. token logprobs for scoring)."""


class ScriptedBackendError(TreeciteError):
    """A scripted backend received a prompt no rule matches. Rule tables must be exhaustive."""
