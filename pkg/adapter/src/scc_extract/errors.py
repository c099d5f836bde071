class AdapterError(Exception):
    pass


class ModelLoadFailure(AdapterError):
    """Backbone or matcher could not be instantiated."""


class ShapeMismatch(AdapterError):
    """Model output violates the dense-grid-plus-global-token contract."""


class MatcherFailure(AdapterError):
    """Dense matcher failed on the given image pair."""
