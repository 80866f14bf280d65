"""Exception hierarchy shared by every subsystem."""


class StateBusError(Exception):
    """Base class for all runtime errors raised by this package."""


class StateError(StateBusError):
    pass


class DuplicateLabel(StateError):
    pass


class ShapeInvalid(StateError):
    pass


class UnknownLabel(StateError, KeyError):
    def __init__(self, label):
        super().__init__(label)
        self.label = label

    def __str__(self):
        return f"unknown label {self.label!r}"


class LengthMismatch(StateError, ValueError):
    pass


class GatherOutOfBounds(StateError, IndexError):
    pass


class BackendDown(StateError):
    pass


class TornRead(StateError):
    """A shared-memory snapshot could not be taken within the retry budget."""


class GraphError(StateBusError):
    pass


class BlockPanic(GraphError):
    """A block raised while stepping; carries the block name and tick."""

    def __init__(self, block, tick, cause):
        super().__init__(f"block {block!r} failed at tick {tick}: {cause!r}")
        self.block = block
        self.tick = tick
        self.cause = cause
        self.report = None


class UndeclaredAccess(GraphError):
    pass


class RateInvalid(GraphError, ValueError):
    pass


class PlatformError(StateBusError):
    pass


class SpecInvalid(PlatformError, ValueError):
    pass


class NonFiniteInput(PlatformError, ValueError):
    pass


class JointMismatch(PlatformError):
    def __init__(self, missing, extra):
        self.missing = sorted(missing)
        self.extra = sorted(extra)
        super().__init__(f"joint sets differ: missing={self.missing} extra={self.extra}")


class ReplayError(StateBusError):
    pass


class IoFailure(ReplayError, OSError):
    pass


class SchemaMismatch(ReplayError):
    pass


class FileCorrupt(ReplayError):
    pass


class WindowTooLarge(ReplayError, ValueError):
    pass


class NoCommonLabels(ReplayError):
    pass


class BenchError(StateBusError):
    pass


class ProducerSilent(BenchError):
    pass


class TooFewSamples(BenchError, ValueError):
    pass


class OffsetUnavailable(BenchError):
    pass


class ParseError(StateBusError):
    def __init__(self, message, line=0, col=0):
        super().__init__(f"{line}:{col}: {message}")
        self.message = message
        self.line = line
        self.col = col
