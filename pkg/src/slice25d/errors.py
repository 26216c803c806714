"""Binary format errors shared by the volume (RVF) and checkpoint (SPM1) readers."""


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DimensionOverflowError(FormatError):
    pass


class UnsupportedDtypeError(FormatError):
    pass
