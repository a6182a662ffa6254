"""Exception taxonomy shared across the package.

The CLI maps these onto its exit codes: ConfigError -> 2, PreconditionError
(and subclasses) -> 3, DivergenceError (and subclasses) -> 4.
"""


class CfdiagError(Exception):
    pass


class ConfigError(CfdiagError):
    pass


class PreconditionError(CfdiagError):
    pass


class ShapeError(PreconditionError):
    pass


class NonFiniteError(PreconditionError):
    pass


class UnknownAttributeError(PreconditionError):
    def __init__(self, name: str, known=()):
        self.name = name
        msg = f"unknown attribute or prompt: {name!r}"
        if known:
            msg += f" (known: {', '.join(sorted(known))})"
        super().__init__(msg)


class DuplicateAttributeError(PreconditionError):
    pass


class EmptyDirectionError(PreconditionError):
    """Raised when thresholding leaves no surviving style channel."""

    def __init__(self, attribute: str, lam: float, max_entry: float):
        self.attribute = attribute
        self.lam = lam
        self.max_entry = max_entry
        super().__init__(
            f"no channel survives threshold for {attribute!r}: "
            f"lambda={lam!r} exceeds the largest relevance entry {max_entry!r}; "
            f"lower lambda below that value"
        )


class GenerationBudgetError(PreconditionError):
    pass


class DivergenceError(CfdiagError):
    pass


class TrainingDivergedError(DivergenceError):
    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"training loss became non-finite at step {iteration}")


class SearchDivergedError(DivergenceError):
    def __init__(self, iteration: int, trace):
        self.iteration = iteration
        self.trace = trace
        super().__init__(f"search loss became non-finite at iteration {iteration}")


class ManifestMismatchError(PreconditionError):
    pass
