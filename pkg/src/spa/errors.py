"""Exception hierarchy.

Every error carries the owning module and a short kind so the CLI can emit
``ERROR:<module>:<kind>: message`` lines.
"""


class SpaError(Exception):
    module = "spa"
    kind = "error"


class ShapeError(SpaError, ValueError):
    module = "autodiff"
    kind = "shape"


class ConfigurationError(SpaError, ValueError):
    module = "config"
    kind = "config"


class GatherIndexError(SpaError, IndexError):
    module = "autodiff"
    kind = "index"


class UsageError(SpaError, RuntimeError):
    module = "autodiff"
    kind = "usage"


class NumericalError(SpaError, ArithmeticError):
    module = "autodiff"
    kind = "numerical"


class ParseError(SpaError, ValueError):
    module = "data"
    kind = "parse"


class EmptyDatasetError(SpaError, ValueError):
    module = "data"
    kind = "empty"


class DegenerateQueryError(SpaError, ValueError):
    module = "data"
    kind = "degenerate"


class GenerationError(SpaError, ValueError):
    module = "data"
    kind = "generation"


class LoadError(SpaError, OSError):
    module = "supernet"
    kind = "load"


class ProtocolError(SpaError, ValueError):
    module = "objective"
    kind = "protocol"


class SizeError(SpaError, ValueError):
    module = "search"
    kind = "size"


class DivergenceError(NumericalError):
    module = "search"
    kind = "divergence"
