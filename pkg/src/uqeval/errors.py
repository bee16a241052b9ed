"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class UQEvalError(Exception):
    exit_code = 1


class ConfigError(UQEvalError, ValueError):
    exit_code = 2


class InputError(UQEvalError, ValueError):
    """A precondition on an operation's arguments does not hold."""

    exit_code = 3


class DataError(UQEvalError):
    exit_code = 3


class InfeasibleSplitError(DataError):
    pass


class FormatError(DataError):
    """Checkpoint, manifest or summary file is malformed or has the wrong version."""


class DegenerateUncertaintyError(InputError):
    pass


class LineageError(InputError):
    pass


class TrainingDivergenceError(UQEvalError, RuntimeError):
    exit_code = 4

    def __init__(self, epoch, member=None, detail="non-finite loss"):
        self.epoch = epoch
        self.member = member
        where = f"epoch {epoch}" if member is None else f"member {member}, epoch {epoch}"
        super().__init__(f"training diverged at {where}: {detail}")

    def with_member(self, member):
        return TrainingDivergenceError(self.epoch, member=member)
