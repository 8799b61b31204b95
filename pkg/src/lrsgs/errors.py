"""Exception hierarchy. DataError maps to CLI exit 2, NumericalError to exit 3."""


class LrsgsError(Exception):
    pass


class DataError(LrsgsError):
    pass


class NumericalError(LrsgsError):
    pass


class EmptySweep(DataError):
    pass


class EmptyInput(DataError):
    pass


class DegenerateNeighborhood(DataError):
    pass


class InsufficientNeighbors(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class FrameOutOfRange(DataError):
    pass


class OracleTooLarge(DataError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term} = {value}")
        self.term = term
        self.value = value
