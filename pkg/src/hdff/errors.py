"""Exception hierarchy shared across the framework."""


class HdffError(Exception):
    """Base class for all framework errors."""


class RegistryError(HdffError):
    """Bad backbone registration or lookup."""


class WeightsUnavailableError(HdffError):
    """A weights source cannot be resolved (missing file, external download required)."""


class DataError(HdffError):
    """Manifest, image decoding, or loader failure."""


class PolicyError(HdffError):
    """Malformed augmentation op or policy file."""


class ScheduleError(HdffError):
    """Invalid schedule parameters or corrupted schedule state."""


class FreezeError(HdffError):
    """Freeze policy refers to unknown parameter groups."""


class FreezeViolationError(HdffError):
    """A parameter that was frozen for a stage changed during that stage."""


class StageError(HdffError):
    """Illegal stage configuration or stage transition."""


class TrainingError(HdffError):
    """Runtime training failure (non-finite loss, etc.)."""


class CheckpointError(HdffError):
    """Unreadable, partial, or schema-mismatched checkpoint."""


class EvalError(HdffError):
    """Evaluation was asked to run on unusable data."""


class BudgetError(HdffError):
    """Parameter budget exceeded where a pass is mandatory."""


class ConfigError(HdffError):
    """One or more run-config validation failures.

    Carries the full list so callers can report every problem at once,
    not just the first.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
