"""Exception types shared across the engine modules."""


class SpanError(Exception):
    """Base class for all errors raised by this package."""


class DuplicateCoordinate(SpanError):
    def __init__(self, coord):
        self.coord = tuple(int(c) for c in coord)
        super().__init__(f"duplicate coordinate {self.coord}")


class DimensionMismatch(SpanError):
    pass


class EmptyMap(SpanError):
    pass


class Misaligned(SpanError):
    pass


class BadMagic(SpanError):
    pass


class VersionUnsupported(SpanError):
    pass


class TruncatedStream(SpanError):
    pass


class RulebookMismatch(SpanError):
    pass


class RulebookMissing(SpanError):
    pass


class MissingContext(SpanError):
    pass


class DomainError(SpanError):
    pass


class DegenerateQuantiles(SpanError):
    pass


class EmptyTape(SpanError):
    pass


class NonPositiveOutputSize(SpanError):
    pass


class TooLarge(SpanError):
    pass


class ParseError(SpanError):
    pass


class ConfigError(SpanError):
    pass
