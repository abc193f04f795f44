"""Exception hierarchy shared across the engine."""


class SliceLensError(Exception):
    """Base class for all engine errors."""


class IngestError(SliceLensError):
    """Manifest is malformed or violates a dataset invariant."""


class ContractError(SliceLensError):
    """A caller violated an operation precondition."""


class ConfigError(SliceLensError):
    """Invalid or inconsistent configuration (e.g. encoder dimension mismatch)."""


class TransportError(SliceLensError):
    """A model endpoint could not be reached; safe to retry."""


class ReplayMiss(SliceLensError):
    """Replay tape has no recorded response for this request."""


class StateError(SliceLensError):
    """Operation requires pipeline artifacts that do not exist yet."""
