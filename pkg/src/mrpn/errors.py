"""Exception types shared across the package."""


class MRPNError(Exception):
    pass


class DimensionError(MRPNError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MRPNError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(MRPNError, ValueError):
    """Invalid configuration value."""


class BuildError(MRPNError, ValueError):
    """A network or unit cannot be constructed as configured."""


class WavParseError(MRPNError, ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


class NonFiniteGradient(MRPNError, FloatingPointError):
    def __init__(self, path):
        super().__init__(f"non-finite gradient in parameter {path!r}")
        self.path = path
