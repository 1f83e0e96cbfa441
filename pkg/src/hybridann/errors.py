"""Exception hierarchy shared by every module."""


class HybridAnnError(Exception):
    """Base class for all errors raised by this package."""


class EmptyDataset(HybridAnnError):
    pass


class BadParam(HybridAnnError, ValueError):
    pass


class DimMismatch(HybridAnnError, ValueError):
    pass


class BadBlock(HybridAnnError, IndexError):
    pass


class AlreadyPruned(HybridAnnError):
    pass


class NegativePartial(HybridAnnError, ValueError):
    """A negative contribution reached a monotone accumulator (dot products must not)."""


class NoCandidates(HybridAnnError):
    pass


class MetricMismatch(HybridAnnError):
    pass


class UnknownNode(HybridAnnError, KeyError):
    pass


class BlockNotResident(HybridAnnError):
    """A chunk reached a node that does not hold the addressed (shard, block) cell."""


class Deadlock(HybridAnnError, RuntimeError):
    pass


class WidthMismatch(HybridAnnError, ValueError):
    pass


class MissingIndex(HybridAnnError, FileNotFoundError):
    pass


class FormatError(HybridAnnError, ValueError):
    """Malformed on-disk file or wire frame."""
