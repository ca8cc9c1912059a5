"""Exception hierarchy shared by the library and the command line."""


class ChaosLabError(Exception):
    """Base class for all library errors."""


class JumpAtMinusOne(ChaosLabError):
    """A jump equal to -1 makes the stochastic exponential vanish."""


class EqualExponents(ChaosLabError):
    """Two exponents that must differ were equal."""


class UnknownTheorem(ChaosLabError):
    pass


class NonZeroMean(ChaosLabError):
    """An increment law that should be centred is not."""


class DegenerateStep(ChaosLabError):
    pass


class NonPSD(ChaosLabError):
    pass


class ThetaBoundViolated(ChaosLabError):
    pass


class BudgetExceeded(ChaosLabError):
    """The scenario tree would exceed the node budget."""

    def __init__(self, nodes, budget):
        super().__init__(f"tree needs {nodes} nodes, budget is {budget}")
        self.nodes = nodes
        self.budget = budget


class NotConverged(ChaosLabError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


class DivergenceDetected(NotConverged):
    pass


class DimensionMismatch(ChaosLabError):
    pass


class SizeMismatch(ChaosLabError):
    pass


class SpaceMismatch(ChaosLabError):
    pass


class QTooSmall(ChaosLabError):
    pass


class ConfigError(ChaosLabError):
    pass
