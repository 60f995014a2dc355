"""Signal-type registry mapping identifiers to flag bits."""
from __future__ import annotations

from dataclasses import dataclass


class SignalTypeError(ValueError):
    """Base class for registry lookup failures."""


class UnknownSignalError(SignalTypeError):
    pass


class UnknownFlagError(SignalTypeError):
    pass


class MultipleBitsError(SignalTypeError):
    pass


class InvalidMaskError(SignalTypeError):
    pass


@dataclass(frozen=True, order=True)
class SignalType:
    # order=True compares flag first, which is the on-wire ordering
    flag: int
    identifier: str
    aperiodic: bool = False

    def __str__(self) -> str:
        return self.identifier


_TABLE = (
    ("eeg", 0x00000001, False),
    ("emg", 0x00000002, False),
    ("eog", 0x00000004, False),
    ("ecg", 0x00000008, False),
    ("hr", 0x00000010, False),
    ("bp", 0x00000020, False),
    ("button", 0x00000040, True),
    ("joystick", 0x00000080, True),
    ("sensors", 0x00000100, False),
    ("nirs", 0x00000200, False),
    ("fmri", 0x00000400, False),
    ("mouse", 0x00000800, True),
    ("mouse-button", 0x00001000, True),
    ("user_1", 0x00010000, False),
    ("user_2", 0x00020000, False),
    ("user_3", 0x00040000, False),
    ("user_4", 0x00080000, False),
    ("undefined", 0x00100000, False),
    ("event", 0x00200000, False),
)

SIGNAL_TYPES: tuple[SignalType, ...] = tuple(
    SignalType(flag=flag, identifier=ident, aperiodic=aperiodic)
    for ident, flag, aperiodic in _TABLE
)

_BY_ID = {s.identifier: s for s in SIGNAL_TYPES}
_BY_FLAG = {s.flag: s for s in SIGNAL_TYPES}

#: Union of every defined flag; any other bit makes a mask invalid.
VALID_MASK = 0
for _s in SIGNAL_TYPES:
    VALID_MASK |= _s.flag
del _s

MAX_MASK = 0xFFFFFFFF


def signal_type(identifier: str) -> SignalType:
    """Look up a signal type by its case-sensitive identifier."""
    try:
        return _BY_ID[identifier]
    except (KeyError, TypeError):
        raise UnknownSignalError(f"unknown signal identifier {identifier!r}") from None


def flag_of(identifier: str) -> int:
    return signal_type(identifier).flag


def from_flag(flag: int) -> SignalType:
    if flag <= 0 or flag > MAX_MASK:
        raise UnknownFlagError(f"flag {flag:#x} is not a 32-bit single-bit value")
    if flag & (flag - 1):
        raise MultipleBitsError(f"flag {flag:#010x} has more than one bit set")
    try:
        return _BY_FLAG[flag]
    except KeyError:
        raise UnknownFlagError(f"flag {flag:#010x} is not a defined signal type") from None


def identifier_of(flag: int) -> str:
    return from_flag(flag).identifier


def is_valid_mask(mask: int) -> bool:
    return 0 <= mask <= MAX_MASK and not (mask & ~VALID_MASK)


def check_mask(mask: int) -> int:
    if not 0 <= mask <= MAX_MASK:
        raise InvalidMaskError(f"mask {mask!r} does not fit in 32 bits")
    undefined = mask & ~VALID_MASK
    if undefined:
        raise InvalidMaskError(
            f"mask {mask:#010x} sets undefined signal bits {undefined:#010x}"
        )
    return mask


def decompose(mask: int, *, lenient: bool = False) -> list[SignalType]:
    """Split a signal mask into its signal types, ascending by flag.

    With ``lenient=True`` undefined bits are ignored instead of raising.
    """
    if lenient:
        if not 0 <= mask <= MAX_MASK:
            raise InvalidMaskError(f"mask {mask!r} does not fit in 32 bits")
        mask &= VALID_MASK
    else:
        check_mask(mask)
    return [s for s in SIGNAL_TYPES if mask & s.flag]


def count_signals(mask: int) -> int:
    """Number of signals (NoS) encoded in a valid mask."""
    return bin(check_mask(mask)).count("1")


def mask_of(signals) -> int:
    mask = 0
    for s in signals:
        mask |= s.flag
    return mask
