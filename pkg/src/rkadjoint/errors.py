"""Exception types raised across the package."""


class RkError(Exception):
    """Base class for all errors raised by rkadjoint."""


class ZeroWeight(RkError):
    """A tableau operation needs every weight b_i to be nonzero."""

    def __init__(self, index: int):
        self.index = index
        super().__init__(
            f"weight b[{index}] vanishes; use rkadjoint.zero_weight for such schemes"
        )


class UnknownTableau(RkError):
    pass


class StageSolveFailed(RkError):
    pass


class NonFiniteValue(RkError):
    pass


class GridMismatch(RkError):
    pass


class MissingJacobian(RkError):
    pass


class BlockSolveFailed(RkError):
    pass


class SingularBlock(RkError):
    pass


class SingularMSystem(RkError):
    pass


class NotSpecialForm(RkError):
    pass


class UnsupportedMode(RkError):
    pass


class NewtonDiverged(RkError):
    def __init__(self, message: str, iterate=None):
        super().__init__(message)
        self.iterate = iterate


class SingularHuu(RkError):
    def __init__(self, where: str, cond: float):
        self.where = where
        self.cond = cond
        super().__init__(f"d2H/du2 is singular at {where} (condition estimate {cond:.3e})")


class MismatchReport(RkError):
    """Raised when reproduced numbers disagree with the published ones."""

    def __init__(self, cells):
        self.cells = list(cells)
        lines = "\n".join(f"  {c}" for c in self.cells)
        super().__init__(f"{len(self.cells)} cell(s) mismatch:\n{lines}")
