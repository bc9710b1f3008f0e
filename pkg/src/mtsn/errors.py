"""Exception types shared across the package."""


class MtsnError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(MtsnError):
    """Shapes of the operands do not line up."""


class DomainError(MtsnError):
    """Value outside an operation's mathematical domain (e.g. log of x <= 0)."""


class EmptySequenceError(MtsnError):
    """A sequence operation received zero time steps."""


class ContractError(MtsnError):
    """A precondition of an API call was violated."""


class LabelError(MtsnError):
    """Class label outside [0, K)."""


class NumericError(MtsnError):
    """Non-finite value detected in checked mode, or a non-finite loss."""


class CorpusSpecError(MtsnError):
    """Corpus specification is structurally impossible to generate."""


class ValidationError(MtsnError):
    """A dataset file violates its manifest or the record schema."""


class LanguageTagError(MtsnError):
    """Unknown language tag."""


class CheckpointParseError(MtsnError):
    """Checkpoint file is corrupt or truncated.

    Carries the byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class CheckpointVersionError(MtsnError):
    """Checkpoint format version is not supported."""


class TrainingError(MtsnError):
    """Training diverged. Carries the epoch/batch coordinates."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


class GridError(MtsnError):
    """An experiment grid cell failed. Carries the cell identifier."""

    def __init__(self, message: str, cell: str):
        super().__init__(f"{message} (cell {cell})")
        self.cell = cell
