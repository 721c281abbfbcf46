"""Exception hierarchy shared across the package."""


class IqlLabError(Exception):
    """Base class for all errors raised by iql_lab."""


class ParameterError(IqlLabError, ValueError):
    """An argument is outside its documented domain."""


class UsageError(IqlLabError, RuntimeError):
    """An operation was invoked in a state where it is not allowed."""


class ShapeError(IqlLabError, ValueError):
    pass


class DivergenceError(IqlLabError, ArithmeticError):
    """A loss, weight or gradient became non-finite during training."""

    def __init__(self, message, step=None, config=None):
        self.step = step
        self.config = config
        if step is not None:
            message = f"{message} (step {step})"
        if config is not None:
            message = f"{message}; config={config}"
        super().__init__(message)


class InfeasibleSupportError(IqlLabError, ValueError):
    """A reachable non-terminal state has no supported action."""


class ParseError(IqlLabError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(IqlLabError, ValueError):
    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class UnsupportedLayoutError(IqlLabError, ValueError):
    pass
