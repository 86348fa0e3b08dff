"""Exception hierarchy.

The CLI maps ``ConfigurationError``/``ValidationError``/``RegistryLookupError``
to exit code 2 and ``NumericalError``/``TrainingError`` to exit code 3.
"""


class ProjProbeError(Exception):
    pass


class ConfigurationError(ProjProbeError, ValueError):
    """Shapes, geometry or settings that cannot work together."""


class ValidationError(ProjProbeError, ValueError):
    """A value is outside its documented domain."""


class RegistryLookupError(ProjProbeError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing registry entry"


class NumericalError(ProjProbeError, ArithmeticError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class TrainingError(ProjProbeError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
