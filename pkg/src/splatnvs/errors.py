"""Exception hierarchy shared by every stage of the pipeline."""


class SplatNVSError(Exception):
    """Base class for all errors raised by splatnvs."""


class InvalidInputError(SplatNVSError, ValueError):
    pass


class ParseError(SplatNVSError):
    """Malformed reconstruction file.

    ``offset`` is the byte offset (binary files) or 1-based line number
    (text files) where decoding failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedModelError(ParseError):
    def __init__(self, model_id: int, model_name: str | None = None):
        label = f"{model_id}" if model_name is None else f"{model_id} ({model_name})"
        super().__init__(f"unsupported camera model id {label}; only PINHOLE/SIMPLE_PINHOLE accepted")
        self.model_id = model_id


class LoadError(SplatNVSError):
    pass


class UndefinedMetricError(SplatNVSError, ValueError):
    """Raised when every pixel (or every SSIM window) is masked out."""


class UndefinedLossError(UndefinedMetricError):
    pass


class NumericalFailureError(SplatNVSError, ArithmeticError):
    def __init__(self, message: str, primitive: int | None = None, iteration: int | None = None):
        parts = [message]
        if primitive is not None:
            parts.append(f"primitive {primitive}")
        if iteration is not None:
            parts.append(f"iteration {iteration}")
        super().__init__(", ".join(parts))
        self.primitive = primitive
        self.iteration = iteration


class EnhancementError(SplatNVSError):
    pass
