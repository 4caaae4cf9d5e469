"""Exception hierarchy shared by every stage of the toolkit."""


class AdvSigError(Exception):
    """Base class; the CLI maps subclasses to exit codes."""


class ConfigurationError(AdvSigError):
    pass


class DataError(AdvSigError):
    pass


class NumericError(AdvSigError):
    pass


class UsageError(AdvSigError):
    pass


class DependencyError(AdvSigError):
    """A required input artifact is missing on disk."""

    def __init__(self, path, what="artifact"):
        self.path = str(path)
        super().__init__(f"missing {what}: {self.path}")


class UndefinedMetricError(AdvSigError):
    pass


class ManifestParseError(DataError):
    def __init__(self, path, lineno, reason):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}:{lineno}: {reason}")
