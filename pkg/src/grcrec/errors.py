"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation's preconditions (shapes, roles, lengths) were not met."""


class NumericalFault(ArithmeticError):
    """A computation produced NaN or Inf."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        super().__init__(f"non-finite output in '{op}'" + (f": {detail}" if detail else ""))


class ConfigError(ValueError):
    """Invalid or degenerate configuration."""


class MissingArtifact(FileNotFoundError):
    """An upstream pipeline artifact is absent."""

    def __init__(self, path, stage: str):
        self.stage = stage
        super().__init__(f"missing {path}; run `grcrec {stage}` first")


class DataFormatError(ValueError):
    """Malformed input file; ``line`` is 1-based and counts the header."""

    def __init__(self, path, line: int, msg: str):
        self.path, self.line = str(path), line
        super().__init__(f"{path}:{line}: {msg}")
