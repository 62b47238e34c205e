"""Exception hierarchy.

Every error carries a short machine-parsable class name, which the CLI prints
as ``error: <code>: <message>`` on a single line.
"""


class VidiffError(Exception):
    code = "error"


class DimensionTooLarge(VidiffError):
    code = "dimension-too-large"


class SupportTooLarge(VidiffError):
    code = "support-too-large"


class NonpositiveTime(VidiffError):
    code = "nonpositive-time"


class ParameterRange(VidiffError):
    code = "parameter-range"


class ShapeMismatch(VidiffError):
    code = "shape-mismatch"


class BoundaryArgument(VidiffError):
    code = "boundary-argument"


class ContractionViolation(VidiffError):
    code = "contraction-violation"


class NonConvergence(VidiffError):
    code = "non-convergence"


class GradientCheck(VidiffError):
    code = "gradient-check"


class NonFiniteScore(VidiffError):
    code = "non-finite-score"

    def __init__(self, message, chains=(), t=None, k=None):
        super().__init__(message)
        self.chains = tuple(chains)
        self.t = t
        self.k = k


class Divergence(VidiffError):
    code = "divergence"


class EmptySamples(VidiffError):
    code = "empty-samples"


class ConfigError(VidiffError):
    code = "config"
