"""Exception hierarchy shared by all memplan modules."""


class MemplanError(Exception):
    """Base class for every error raised by memplan."""


class ParseError(MemplanError):
    """A document could not be decoded into a graph, plan or report."""


class ValidationError(MemplanError):
    """A decoded graph violates the graph invariants."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        lines = "; ".join(str(d) for d in self.diagnostics)
        super().__init__(f"invalid graph: {lines}")


class CyclicGraph(MemplanError):
    pass


class OrderMismatch(MemplanError):
    """An execution order is not a dependency-respecting permutation."""


class InvalidPlan(MemplanError):
    """A mirror plan breaks its invariants (negative count, mirrored Input...)."""


class GradientError(MemplanError):
    """The forward graph cannot be differentiated."""


class MultipleRoots(GradientError):
    pass


class DomainError(MemplanError):
    """Planner argument outside its domain."""


class NotAChain(DomainError):
    pass


class DegenerateGraph(DomainError):
    pass


class ShapeMismatch(MemplanError):
    def __init__(self, node, message):
        self.node = node
        super().__init__(f"node {node}: {message}")


class BadSegmentation(MemplanError):
    pass


class TagOverwriteFault(MemplanError):
    """A live value was clobbered by another node sharing its storage tag."""

    def __init__(self, reader, expected, found, tag):
        self.reader = reader
        self.expected = expected
        self.found = found
        self.tag = tag
        super().__init__(
            f"node {reader} reads value of node {expected} from tag {tag}, "
            f"but the tag holds node {found}"
        )
