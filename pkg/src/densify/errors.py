"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A scalar hyperparameter is outside its valid range."""


class GraphError(RuntimeError):
    """The computation graph cannot answer the requested derivative."""


class DivergenceError(FloatingPointError):
    """A training loop produced a non-finite loss."""

    def __init__(self, loop, step, detail=""):
        self.loop = loop
        self.step = step
        msg = f"non-finite value in {loop} loop at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class SeriesDivergenceError(FloatingPointError):
    """Neumann partial sums blew up; the scale is too large for the Hessian."""


class HypergradientError(FloatingPointError):
    def __init__(self, term):
        self.term = term
        super().__init__(f"non-finite hypergradient term: {term}")


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class MissingLabelError(LookupError):
    pass


class DegenerateDataError(ValueError):
    pass


class ConfigError(ValueError):
    pass
