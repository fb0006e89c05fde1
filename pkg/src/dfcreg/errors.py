"""Exception types raised across the pipeline."""


class DfcError(Exception):
    """Base class; ``stage`` is filled in by the pipeline when re-raising."""

    stage: str | None = None


class ZeroWeightSum(DfcError, ValueError):
    pass


class DegenerateGeometry(DfcError, ValueError):
    pass


class ParseError(DfcError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DimensionMismatch(DfcError, ValueError):
    pass


class MissingContext(DfcError, ValueError):
    pass


class EmptyCloud(DfcError, ValueError):
    pass


class TooFewCorrespondences(DfcError, ValueError):
    pass


class ShapeMismatch(DfcError, ValueError):
    pass


class StaleTrace(DfcError, RuntimeError):
    pass


class NonPositiveSigma(DfcError, ValueError):
    pass


class EmptyHypothesisSet(DfcError, ValueError):
    pass


class NoCorrespondencesInRange(DfcError, RuntimeError):
    pass


class AllSamplesDegenerate(DfcError, RuntimeError):
    pass


class LengthMismatch(DfcError, ValueError):
    pass


class DivergenceDetected(DfcError, RuntimeError):
    pass
