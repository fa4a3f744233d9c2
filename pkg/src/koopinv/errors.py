"""Exception hierarchy shared by all koopinv modules."""


class KoopinvError(Exception):
    """Base class for every error raised by this package."""


class DomainError(KoopinvError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class DegenerateSystemError(KoopinvError):
    """No Markov parameter C A^(i-1) B is distinguishable from zero."""


class IllConditionedRealization(KoopinvError):
    """The transfer function could not be extracted reliably."""


class SpectralFailure(KoopinvError):
    """The eigenvalue solver did not converge."""


class NormalFormError(KoopinvError):
    """The normal-form transform could not be built or failed verification."""


class SimulationDiverged(KoopinvError):
    """A non-finite state was produced during integration."""


class IdentificationInconclusive(KoopinvError):
    """No derivative of the step response showed a discontinuity."""


class OperatorUnstable(KoopinvError):
    """The hidden-state operator needs a Hurwitz zero-dynamics matrix."""


class NoExponentialBound(KoopinvError):
    """A4 is not Hurwitz, so no decaying bound on exp(A4 t) exists."""


class SNRUndefined(KoopinvError):
    """Noise at a given SNR was requested for a zero-power signal."""


class NormalizationUndefined(KoopinvError):
    """The reference input is identically zero."""


class TrainingFailed(KoopinvError):
    """Network training produced a non-finite or divergent loss."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CompatibilityError(KoopinvError):
    """A saved model does not match the requested feature layout."""
