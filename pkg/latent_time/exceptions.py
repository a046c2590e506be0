class LatentTimeError(Exception):
    """Base class for every error raised by the latent_time package."""


class ContractError(LatentTimeError, ValueError):
    pass


class ShapeError(ContractError):
    def __init__(self, primitive: str, *shapes):
        shown = " x ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {shown}")
        self.primitive = primitive
        self.shapes = shapes


class DomainError(ContractError):
    pass


class OutOfRangeError(ContractError):
    pass


class ConfigError(ContractError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


class NumericError(LatentTimeError, ArithmeticError):
    pass


class NonConvergenceError(NumericError):
    def __init__(self, message: str, last_time: float | None = None):
        super().__init__(message)
        self.last_time = last_time


class TrainingDivergedError(NumericError):
    def __init__(self, iteration: int, message: str):
        super().__init__(f"training diverged at iteration {iteration}: {message}")
        self.iteration = iteration


class CheckpointIntegrityError(LatentTimeError):
    pass


class SpecMismatchError(LatentTimeError):
    def __init__(self, mismatches: dict):
        detail = ", ".join(f"{k}: expected {v[0]!r}, found {v[1]!r}" for k, v in mismatches.items())
        super().__init__(f"checkpoint does not match model spec ({detail})")
        self.mismatches = mismatches
