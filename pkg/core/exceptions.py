class SepBNError(Exception):
    """Base class of every error raised by the kernel and the harness."""


class DimensionError(SepBNError, ValueError):
    pass


class ParameterError(SepBNError, ValueError):
    pass


class ConfigurationError(SepBNError, ValueError):
    pass


class RoutingError(SepBNError, KeyError):
    def __str__(self):
        # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ''


class DegenerateStatisticsError(SepBNError, ValueError):
    pass


class UndefinedSimilarityError(SepBNError, ValueError):
    pass


class GeometryError(SepBNError, ValueError):
    pass


class DatasetLoadError(SepBNError, IOError):
    pass


class EmptyDatasetError(DatasetLoadError):
    pass


class ZeroNormalizerError(SepBNError, ZeroDivisionError):
    pass


class UndefinedRateError(SepBNError, ZeroDivisionError):
    pass


class TrainingDivergenceError(SepBNError, ArithmeticError):
    pass


class CheckpointError(SepBNError, IOError):
    pass


class LayerStateError(SepBNError, RuntimeError):
    pass


class GradientCheckError(SepBNError, AssertionError):
    def __init__(self, report):
        self.report = report
        worst = report.failures[0]
        super().__init__(
            f'{len(report.failures)} gradient elements exceed tolerance {report.tolerance:g}, '
            f'first: {worst.layer}[{worst.index}] rel err {worst.relative_error:.3e}'
        )
