"""Package exceptions."""


class AfeboostError(Exception):
    """Base class for domain errors."""


class DcBusCollapse(AfeboostError):
    """DC-link voltage fell below the numerical floor; rollout aborted."""


class NonFinite(AfeboostError):
    """A computation produced NaN or infinity."""


class WindowTooShort(AfeboostError):
    """Spectrum window spans fewer than the minimum number of grid periods."""
