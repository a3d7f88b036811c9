"""Exception taxonomy shared across the package.

Every failure mode the library reports deliberately gets its own class so
callers (and the CLI exit-code mapping) can react without string matching.
"""


class MsttsError(Exception):
    """Base class for all package errors."""


class InvalidShapeError(MsttsError):
    """Operand shapes violate an operation's contract."""


class EmptyInputError(MsttsError):
    """An operation received a zero-length sequence."""


class VocabularyError(MsttsError):
    """A token id falls outside the embedding table."""


class UnknownModuleError(MsttsError):
    """A parameter-name prefix matched nothing (guards silent freeze bugs)."""


class ContractError(MsttsError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class NumericsError(MsttsError):
    """A non-finite value appeared; the message names the producing op."""


class CorpusError(MsttsError):
    """A corpus file failed validation; the message names the record id."""


class CorpusVersionError(CorpusError):
    """The on-disk corpus was written by an incompatible version."""


class CheckpointError(MsttsError):
    """A checkpoint file is corrupt; the message names the parameter."""


class ProvenanceError(MsttsError):
    """A checkpoint's training-stage tag does not fit the requested use."""


class ContentMismatchError(MsttsError):
    """A local-scale reference's text does not match the input text."""


class ProbeUnfitError(MsttsError):
    """The emotion probe failed its own validation-accuracy floor."""
