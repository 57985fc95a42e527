"""Exception types shared across the package."""


class EsfpnetError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(EsfpnetError, ValueError):
    """Invalid or unknown configuration (variant ids, hyperparameters, protocols)."""


class ShapeError(EsfpnetError, ValueError):
    """A tensor shape violates an operation's contract; message names the offending axis."""


class CheckpointError(EsfpnetError, RuntimeError):
    """A model archive is missing, truncated, or inconsistent with the requested variant."""


class IngestError(EsfpnetError, ValueError):
    """Dataset ingestion failed; carries an itemized list of problems."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        summary = "; ".join(self.problems[:10])
        if len(self.problems) > 10:
            summary += f"; ... ({len(self.problems)} problems total)"
        super().__init__(f"dataset ingestion failed: {summary}")


class TrainingDiverged(EsfpnetError, RuntimeError):
    """Loss became non-finite during optimization; message carries diagnostics."""
