"""Exception types shared across the toolkit."""


class SgqaError(Exception):
    """Base class for all data and usage errors raised by this package."""


class SceneDocumentError(SgqaError):
    """A scene document is malformed or violates a scene-graph invariant."""


class TaxonomyError(SgqaError):
    """A taxonomy document is malformed or a class cannot be normalized."""


class ProgramParseError(SgqaError):
    """Question-program text failed to parse.

    ``offset`` is the character offset of the offending token.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class ProgramTypeError(SgqaError):
    """A question program is not well typed."""


class FamilyError(SgqaError):
    """A question-family document is invalid or a binding is unusable."""


class SplitError(SgqaError):
    """A record's scene is missing from the train/test split map."""


class StatsError(SgqaError):
    """Statistics requested over inconsistent records/scenes."""
