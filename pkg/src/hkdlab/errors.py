class HkdError(Exception):
    """Base class for errors raised by hkdlab."""


class SpecError(HkdError, ValueError):
    """An input object violates its declared invariants."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class AlignmentError(HkdError, ValueError):
    """Source and target files of a parallel corpus do not line up."""

    def __init__(self, src_count: int, tgt_count: int, src_path=None, tgt_path=None):
        self.src_count = src_count
        self.tgt_count = tgt_count
        where = f" ({src_path} vs {tgt_path})" if src_path is not None else ""
        super().__init__(
            f"line-count mismatch: source has {src_count} lines, target has {tgt_count}{where}"
        )


class ConfigurationError(HkdError):
    """An experiment is wired inconsistently (missing teacher, tag, cluster...)."""


class DivergenceError(HkdError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""
