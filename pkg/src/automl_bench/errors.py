"""Exception hierarchy shared by every module of the package."""


class BenchError(Exception):
    """Base class for all package errors."""


# architecture graphs
class GraphError(BenchError):
    pass


class ShapeMismatch(GraphError):
    def __init__(self, message, node_id=None):
        super().__init__(message)
        self.node_id = node_id


class DanglingNode(GraphError):
    pass


class InvalidInput(GraphError):
    pass


class ArchParseError(GraphError):
    pass


# op counting
class UnsupportedLayer(BenchError):
    pass


# morphism / search
class InapplicableAction(BenchError):
    pass


class ShapeRepairFailure(BenchError):
    pass


class ExhaustedSearch(BenchError):
    pass


# harness
class ConfigError(BenchError):
    pass


class ExecutorFailure(BenchError):
    pass


class CommandFailed(ExecutorFailure):
    pass


class ParseError(ExecutorFailure):
    pass


# scoring
class MalformedLog(BenchError):
    pass


class DomainError(BenchError, ValueError):
    pass


# configuration files
class ConfigParseError(ConfigError):
    pass


class FixedFieldOverride(ConfigError):
    pass


class RangeError(ConfigError):
    pass
