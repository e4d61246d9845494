"""
Domain errors raised by the simulator.

Input validation uses django.core.exceptions.ValidationError with a
field -> message dict; the classes here cover failures that only show up
while computing.
"""


class ConvergenceError(Exception):
    """Newton iteration did not converge within its budget."""

    def __init__(self, message, worst_residual_a=None, last_iterate=None, step_index=None):
        super().__init__(message)
        self.worst_residual_a = worst_residual_a
        self.last_iterate = last_iterate or {}
        self.step_index = step_index

    def __str__(self):
        text = super().__str__()
        if self.step_index is not None:
            text = f'{text} (step {self.step_index})'
        if self.worst_residual_a is not None:
            text = f'{text}; worst residual {self.worst_residual_a:.3e} A'
        return text


class FitError(Exception):
    """An IV sweep cannot be fitted."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CalibrationError(Exception):
    """A comparator reference cannot be placed inside the measured window."""

    def __init__(self, message, low_v=None, high_v=None):
        super().__init__(message)
        self.low_v = low_v
        self.high_v = high_v
