"""Exception hierarchy shared across the package.

Each error carries an ``exit_code`` used by the CLI:

    2  input/parse problems (bad files, bad cut positions, bad bumps)
    3  resource budgets (grid size, enumeration size)
    4  isolation / hypothesis failures (the dynamics refused, not the code)
    5  internal numerical failures
"""


class SwfError(Exception):
    exit_code = 5


class ParseError(SwfError):
    exit_code = 2


class EigenvalueOnBoundary(ParseError):
    """A spectral cut was placed on an eigenvalue; nudge lambda or mu."""


class InvalidBump(ParseError):
    """Bump function does not integrate to 1 within 1e-9."""


class ManifestError(ParseError):
    """Run manifest failed validation."""


class BudgetError(SwfError):
    exit_code = 3


class GridTooLarge(BudgetError):
    """Requested grid exceeds the configured cube budget."""


class SearchSpaceTooLarge(BudgetError):
    """Lattice enumeration exceeds the configured budget."""


class DynamicsError(SwfError):
    exit_code = 4


class IsolationFailure(DynamicsError):
    """Candidate neighborhood is not isolating for its invariant set."""


class HypothesisViolation(DynamicsError):
    """Index-pair construction hypothesis (i) or (ii) failed."""

    def __init__(self, which, message=""):
        self.which = which
        super().__init__(f"hypothesis ({which}) violated" + (f": {message}" if message else ""))


class ConstructionFailure(DynamicsError):
    """No collar/neighborhood choice satisfied the separation constraints; refine h."""


class NotRegularLevel(DynamicsError):
    """A cube of the invariant set has function range containing the requested level."""


class NotGoodPerturbation(DynamicsError):
    """A near-critical cube has value range meeting the forbidden band (0, eps)."""


class StepUnderflow(SwfError):
    """Adaptive ODE step fell below the configured minimum."""


class AmbiguousMatching(SwfError):
    """Eigenvalue branch matching between consecutive spectra is not unique."""


class CrossingOnEndpoint(SwfError):
    """A sampled eigenvalue equals the counting level -epsilon."""


class ExtrapolationDiverged(SwfError):
    """Successive eta extrapolants disagree beyond tolerance."""


class NotNearLattice(SwfError):
    """Computed invariant is too far from the (1/8N)Z lattice."""
