"""Exception hierarchy shared by every ramsleuth module."""


class RamSleuthError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class OutOfBounds(RamSleuthError):
    pass


class Prohibited(RamSleuthError):
    pass


class InvalidRange(RamSleuthError):
    pass


class InvalidRoot(RamSleuthError):
    pass


class MalformedTable(RamSleuthError):
    pass


class NotPresent(RamSleuthError):
    pass


class FormatError(RamSleuthError):
    pass


class AuthFailure(RamSleuthError):
    pass


class IoFailure(RamSleuthError):
    pass


class Unmapped(RamSleuthError):
    pass


class Underflow(RamSleuthError):
    pass


class TooFewInstances(RamSleuthError):
    pass


class UnequalWindows(RamSleuthError):
    pass


class EmptyKnownSet(RamSleuthError):
    pass


class EmptyList(RamSleuthError):
    pass


class CorruptList(RamSleuthError):
    pass


class SpecTooLarge(RamSleuthError):
    pass
