"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes that do not fit together."""

    def __init__(self, what: str, expected=None, got=None):
        self.what = what
        self.expected = expected
        self.got = got
        super().__init__(f"{what}: expected {expected}, got {got}")


class NumericalError(ArithmeticError):
    """A numerical routine failed (non-convergence, NaN, lost definiteness)."""


class SvdConvergenceError(NumericalError):
    pass


class RankDeficiencyError(NumericalError):
    pass


class GpFitError(NumericalError):
    def __init__(self, message: str, feature: int | None = None):
        self.feature = feature
        prefix = f"feature {feature}: " if feature is not None else ""
        super().__init__(prefix + message)


class AngleUndeterminable(ValueError):
    """No positive sensitivity inside the search annulus."""


class GridMismatchError(ValueError):
    pass


class ConfigError(ValueError):
    pass
