"""Exception hierarchy shared by all modules."""


class QuadHedgeError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(QuadHedgeError, ValueError):
    """Inputs violate a documented precondition."""


class InvalidParams(ValidationError):
    pass


class OutOfOmega(ValidationError):
    """A return lies outside the band [sigma_lo, sigma_hi] in absolute value."""


class ShapeMismatch(ValidationError):
    pass


class InvalidMeasure(ValidationError):
    pass


class NegativeInput(ValidationError):
    pass


class CapExceeded(ValidationError):
    """The scenario tree would exceed the configured node cap."""

    def __init__(self, nodes, cap):
        super().__init__(f"tree needs {nodes} nodes, cap is {cap}")
        self.nodes = nodes
        self.cap = cap


class BlockTooShort(ValidationError):
    def __init__(self, block, a, b, c):
        super().__init__(
            f"block {block}: ramp end b={b} is not before liquidation start c={c} (a={a})"
        )
        self.block = block


class CflViolation(ValidationError):
    pass


class NumericalError(QuadHedgeError, ArithmeticError):
    """A numerical routine failed to produce a trustworthy answer."""


class NoConvergence(NumericalError):
    def __init__(self, iterations, best_gap):
        super().__init__(f"no convergence after {iterations} iterations (gap {best_gap:.3e})")
        self.iterations = iterations
        self.best_gap = best_gap


class InvalidProbability(NumericalError):
    def __init__(self, k, node, prob):
        super().__init__(f"transition probability {prob:.6g} outside [0, 1] at step {k}, node {node}")
        self.k = k
        self.node = node
        self.prob = prob


class UnstableDetected(NumericalError):
    pass


class BudgetExhausted(NumericalError):
    pass
