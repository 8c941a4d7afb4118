"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(ValueError):
    """A configuration value or hyperparameter is out of its legal range."""


class ContractError(RuntimeError):
    """An input violates an operation's contract (e.g. non-scalar loss)."""


class VocabularyError(ValueError):
    """A token is not part of the closed vocabulary."""


class CheckpointError(RuntimeError):
    """Checkpoint manifest and blob disagree, or do not match the model."""


class NumericsError(RuntimeError):
    """A non-finite value appeared where the training loop requires finiteness."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
