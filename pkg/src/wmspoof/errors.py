"""Exception hierarchy shared by every stage of the lab."""


class WmSpoofError(Exception):
    """Base class; ``code`` is the stable error tag used in diagnostics."""

    code = "Error"

    def __init__(self, message: str = ""):
        super().__init__(f"{self.code}: {message}" if message else self.code)


class EmptyCorpus(WmSpoofError):
    code = "EmptyCorpus"


class CorpusTooSmall(WmSpoofError):
    code = "CorpusTooSmall"


class EmptySequence(WmSpoofError):
    code = "EmptySequence"


class InvalidLogits(WmSpoofError):
    code = "InvalidLogits"


class NoScorableTokens(WmSpoofError):
    code = "NoScorableTokens"


class EmptyRequest(WmSpoofError):
    code = "EmptyRequest"


class VocabMismatch(WmSpoofError):
    code = "VocabMismatch"


class InsufficientSupport(WmSpoofError):
    code = "InsufficientSupport"


class FormatError(WmSpoofError):
    """Unreadable, wrong-version or tampered artifact file."""

    code = "FormatError"


class ConfigError(WmSpoofError):
    """Invalid experiment configuration; ``key`` names the offending field."""

    code = "ConfigError"

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class StageError(WmSpoofError):
    """Wraps a failure inside one pipeline stage."""

    code = "StageError"

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
