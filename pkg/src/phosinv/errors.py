"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: usage problems exit 2, data/format
problems exit 3, numeric divergence exits 4.
"""


class GeometryError(ValueError):
    """Invalid retinal geometry (non-positive pitch, zero field extent, ...)."""


class DimensionError(ValueError):
    """Array shape does not match the geometry it is evaluated against."""


class ParameterError(ValueError):
    """Invalid numeric parameter (inverted range, even kernel size, ...)."""


class DataFormatError(ValueError):
    """Malformed file content (CSV, container, manifest, image)."""


class ContractError(RuntimeError):
    """An object is used outside its declared protocol (e.g. an unfrozen
    classifier passed to recognition accuracy, or a surrogate evaluated
    with patient parameters it was not fitted for)."""


class DivergenceError(RuntimeError):
    """Training or optimization produced non-finite values."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
