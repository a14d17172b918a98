"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes: configuration problems exit 2,
bad data exits 3 and numerical failures exit 4.
"""


class VQARError(Exception):
    exit_code = 1


class ContractError(VQARError, ValueError):
    """A caller broke a documented precondition (shape, range, type)."""

    exit_code = 2


class ConfigError(VQARError):
    exit_code = 2


class DataError(VQARError):
    exit_code = 3


class StateError(VQARError, RuntimeError):
    """Object used before it was ready, e.g. an uninitialised codebook."""

    exit_code = 2


class GraphError(VQARError, RuntimeError):
    exit_code = 4


class DomainError(VQARError, ValueError):
    exit_code = 4


class NonFiniteError(VQARError, FloatingPointError):
    exit_code = 4


class FeatureMismatchError(ConfigError):
    pass
