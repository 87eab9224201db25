"""Exception types shared across the package."""


class NormlabError(Exception):
    pass


class DimensionError(NormlabError, ValueError):
    """Operand shapes or axes are incompatible."""


class ContractError(NormlabError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(NormlabError, ValueError):
    """A configuration value is invalid or inconsistent."""


class InputError(NormlabError, ValueError):
    """Token ids, lengths, or targets are out of range."""


class CheckpointError(NormlabError):
    """A checkpoint file is corrupted or has an unsupported version."""
