"""Exception hierarchy. Each class carries the machine-readable category and
the process exit code the CLI reports for it."""


class MecchError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(MecchError):
    category = "config"
    exit_code = 1


class ParseError(MecchError):
    category = "parse_error"
    exit_code = 2

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class IntegrityError(MecchError):
    category = "integrity_error"
    exit_code = 2


class SchemaError(MecchError):
    category = "schema_error"
    exit_code = 2


class ContractViolation(MecchError, ValueError):
    category = "contract_violation"
    exit_code = 2


class ShapeError(MecchError, ValueError):
    category = "shape_error"
    exit_code = 2


class NonFiniteError(MecchError, FloatingPointError):
    category = "non_finite"
    exit_code = 3


class ResourceGuardError(MecchError):
    category = "resource_guard"
    exit_code = 4


class MetapathCapExceeded(ResourceGuardError):
    category = "metapath_cap_exceeded"


class InstanceGuardExceeded(ResourceGuardError):
    category = "instance_guard"


class CheckpointFormatError(MecchError):
    category = "checkpoint_format"
    exit_code = 2


class TaskMismatchError(MecchError):
    category = "task_mismatch"
    exit_code = 1


class CheckpointMismatchError(MecchError):
    category = "checkpoint_mismatch"
    exit_code = 2
