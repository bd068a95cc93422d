"""Exception hierarchy shared across the package."""


class ContractError(ValueError):
    """An operation was called outside its precondition (bad shape, bad rank, ...)."""


class ShapeError(ContractError):
    """Input batch does not match the declared input shape of a model."""


class ConfigurationError(ValueError):
    """An estimator or attack configuration is invalid."""


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite in epoch {epoch}")
        self.epoch = epoch


class AttackDivergedError(FloatingPointError):
    def __init__(self, iteration: int):
        super().__init__(f"non-finite gradient estimate at attack iteration {iteration}")
        self.iteration = iteration


class InvariantError(AssertionError):
    """A runtime invariant (budget, bookkeeping) was violated."""


class WeightFormatError(ValueError):
    """Weight file has the wrong magic bytes or an unsupported version."""


class TruncatedWeightsError(WeightFormatError):
    pass


class ArchitectureMismatchError(WeightFormatError):
    pass


class IDXFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class IDXTruncatedError(IDXFormatError):
    pass


class IDXMagicError(IDXFormatError):
    pass


class IDXOverflowError(IDXFormatError):
    pass
