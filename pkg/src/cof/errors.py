"""Exception types shared across the package."""


class CofError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(CofError):
    """A configuration value is missing, malformed, or inconsistent."""


class DetectionAmbiguous(CofError):
    """A cell's dominant color sits within 8 intensity units of two palette entries."""


class EditInapplicable(CofError):
    """The edit targets a missing object or an impossible placement."""


class PlacementExhausted(CofError):
    """No collision-free placement exists for the requested objects."""


class ShapeIncompatible(CofError):
    """Array dimensions violate a codec divisibility rule."""


class PadUnsupported(CofError):
    """Chain padding is only defined for 3-frame chains."""


class ShapeMismatch(CofError):
    """Two tensors that must share a shape do not."""


class NonFiniteLoss(CofError):
    """Training hit a NaN/Inf loss; carries the offending step index."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class NothingToPlan(CofError):
    """A forward-semantic plan was requested but no constraint is violated."""


class TransitionImpossible(CofError):
    """A stage transition failed even after the regeneration fallback."""


class RemoteMalformed(CofError):
    """A remote agent response does not match the documented schema."""


class RemoteTimeout(CofError):
    """A remote agent call exceeded the configured timeout."""
