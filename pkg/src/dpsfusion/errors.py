"""Exception hierarchy shared by the library and the CLI."""


class DPSFusionError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(DPSFusionError, ValueError):
    pass


class ShapeError(DPSFusionError, ValueError):
    pass


class LayoutError(DPSFusionError, ValueError):
    pass


class ConfigError(DPSFusionError, ValueError):
    pass


class FormatError(DPSFusionError, ValueError):
    """Malformed or unsupported file on disk."""


class DegenerateStatsError(DPSFusionError, ValueError):
    pass


class UndefinedMetricError(DPSFusionError, ValueError):
    pass


class NumericalError(DPSFusionError, ArithmeticError):
    """A computation produced non-finite values.

    ``step`` is the diffusion step (or optimizer step during training) and
    ``chain`` the chain index, when known.
    """

    def __init__(self, message, step=None, chain=None):
        parts = [message]
        if step is not None:
            parts.append(f"step={step}")
        if chain is not None:
            parts.append(f"chain={chain}")
        super().__init__(" ".join(parts))
        self.step = step
        self.chain = chain


class TrainingError(NumericalError):
    pass


class SamplingError(NumericalError):
    pass
