from typing import Optional


class SepPruneError(Exception):
    pass


class InvalidArgumentError(SepPruneError, ValueError):
    pass


class NumericFailureError(SepPruneError, ArithmeticError):
    def __init__(self, op: str, message: Optional[str] = None) -> None:
        self.op = op
        super().__init__("Numeric failure in op '{}': {}".format(op, message or "non-finite value"))


class ConfigError(SepPruneError):
    pass


class StageOrderError(SepPruneError):
    pass


class ArtifactExistsError(SepPruneError):
    pass
