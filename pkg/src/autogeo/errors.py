"""Exception hierarchy for autogeo."""


class AutogeoError(Exception):
    """Base class for all errors raised by autogeo."""


# raster store
class StoreError(AutogeoError):
    pass


class MalformedHeader(StoreError, ValueError):
    pass


class NonFinitePixel(StoreError, ValueError):
    pass


class SnapshotExists(StoreError):
    pass


class UnknownLayer(StoreError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class UnknownSnapshot(StoreError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class WindowOutOfCoverage(StoreError):
    pass


class NoTemporalMatch(StoreError):
    pass


# query documents
class QueryError(AutogeoError, ValueError):
    pass


class QuerySyntaxError(QueryError):
    pass


class QueryTypeError(QueryError):
    pass


class UnknownArchitecture(QueryError):
    pass


class UnknownField(QueryError):
    pass


# assembly / quality / features
class AssemblyEmpty(AutogeoError):
    pass


class StatsUndefined(AutogeoError, ValueError):
    pass


class UnknownBandRole(AutogeoError, ValueError):
    pass


class GlcmUndefined(AutogeoError, ValueError):
    pass


# models
class ModelError(AutogeoError):
    pass


class ShapeMismatch(ModelError, ValueError):
    pass


class BlobFormatError(ModelError, ValueError):
    pass


# orchestration
class InsufficientClassSamples(AutogeoError):
    def __init__(self, label, available, required):
        self.label = label
        self.available = available
        self.required = required
        super().__init__(
            f"class {label!r} has {available} samples after filtering, "
            f"needs at least {required}"
        )


class UnknownModel(AutogeoError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ModelExists(AutogeoError):
    pass


class InvalidQuery(AutogeoError, ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


# synthetic worlds
class WorldSpecError(AutogeoError, ValueError):
    pass


class OverlappingRegions(WorldSpecError):
    pass


class RegionTooSmall(WorldSpecError):
    pass
