"""Encoder/decoder for version-3 data packets.

Layout (all multi-byte values little endian)::

    offset  size  field
    0       1     version (3)
    1       4     packet size, whole packet in bytes
    5       4     signal type flags
    9       8     packet id
    17      8     connection packet number
    25      8     time stamp, microseconds since server start
    33      2*NoS number of channels per signal
    33+2NoS 2*NoS block size per signal
    33+4NoS ...   float32 samples, signals in ascending flag order

Within one signal the samples are channel-major: all ``block_size`` samples
of the first channel, then the second channel, and so on.
"""
from __future__ import annotations

import struct
import sys
from array import array
from dataclasses import dataclass, field

from . import signals
from .signals import InvalidMaskError, SignalType

VERSION = 3
#: First byte of a version-2 packet; never valid as a packet version.
RESERVED_VERSION = 10
FIXED_HEADER_SIZE = 33
DEFAULT_MAX_PACKET_SIZE = 16 * 1024 * 1024

_U16_MAX = 0xFFFF
_U32_MAX = 0xFFFFFFFF
_U64_MAX = 0xFFFFFFFFFFFFFFFF

_FIXED = struct.Struct("<BIIQQQ")
assert _FIXED.size == FIXED_HEADER_SIZE

_SWAP = sys.byteorder != "little"


class PacketError(ValueError):
    """Raised for any packet that cannot be encoded or decoded."""


class BadVersionError(PacketError):
    pass


class TruncatedPacketError(PacketError):
    pass


class SizeMismatchError(PacketError):
    pass


class PacketInvariantError(PacketError):
    pass


class PacketTooLargeError(PacketError):
    pass


class PacketMaskError(PacketError, InvalidMaskError):
    pass


def _float32_tuple(values) -> tuple[float, ...]:
    # round-trips through a float32 buffer so equality after decode is exact
    return tuple(array("f", values))


@dataclass(frozen=True)
class SignalBlock:
    signal: SignalType
    num_channels: int
    block_size: int
    samples: tuple[float, ...] = ()

    def __post_init__(self):
        if not 0 <= self.num_channels <= _U16_MAX:
            raise PacketInvariantError(f"num_channels {self.num_channels} out of 16-bit range")
        if not 0 <= self.block_size <= _U16_MAX:
            raise PacketInvariantError(f"block_size {self.block_size} out of 16-bit range")
        try:
            samples = _float32_tuple(self.samples)
        except (TypeError, OverflowError) as exc:
            raise PacketInvariantError(f"samples are not float32 values: {exc}") from None
        if len(samples) != self.num_channels * self.block_size:
            raise PacketInvariantError(
                f"{self.signal} block holds {len(samples)} samples, expected "
                f"{self.num_channels} x {self.block_size}"
            )
        object.__setattr__(self, "samples", samples)

    def channel(self, index: int) -> tuple[float, ...]:
        """Samples of one channel (0-based index)."""
        if not 0 <= index < self.num_channels:
            raise IndexError(index)
        start = index * self.block_size
        return self.samples[start:start + self.block_size]


@dataclass(frozen=True)
class FixedHeader:
    version: int
    packet_size: int
    flags: int
    packet_id: int
    connection_packet_number: int
    timestamp_micros: int

    @property
    def payload_size(self) -> int:
        """Bytes that follow the fixed header."""
        return self.packet_size - FIXED_HEADER_SIZE


@dataclass(frozen=True)
class DataPacket:
    packet_id: int = 0
    connection_packet_number: int = 0
    timestamp_micros: int = 0
    blocks: tuple[SignalBlock, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        for name in ("packet_id", "connection_packet_number", "timestamp_micros"):
            value = getattr(self, name)
            if not 0 <= value <= _U64_MAX:
                raise PacketInvariantError(f"{name} {value} out of 64-bit range")
        for prev, cur in zip(self.blocks, self.blocks[1:]):
            if prev.signal.flag >= cur.signal.flag:
                raise PacketInvariantError(
                    "blocks must be strictly ascending by signal flag, got "
                    f"{prev.signal} before {cur.signal}"
                )

    @property
    def flags(self) -> int:
        return signals.mask_of(b.signal for b in self.blocks)

    @property
    def packet_size(self) -> int:
        return packet_size_of([(b.num_channels, b.block_size) for b in self.blocks])

    @property
    def header(self) -> FixedHeader:
        return FixedHeader(
            VERSION,
            self.packet_size,
            self.flags,
            self.packet_id,
            self.connection_packet_number,
            self.timestamp_micros,
        )

    def block(self, signal: SignalType | str) -> SignalBlock | None:
        ident = signal if isinstance(signal, str) else signal.identifier
        for b in self.blocks:
            if b.signal.identifier == ident:
                return b
        return None


def packet_size_of(blocks) -> int:
    """Total packet size for ``[(num_channels, block_size), ...]``."""
    blocks = list(blocks)
    size = FIXED_HEADER_SIZE + 4 * len(blocks)
    size += 4 * sum(ch * bs for ch, bs in blocks)
    if size > _U32_MAX:
        raise PacketTooLargeError(f"packet size {size} overflows the 32-bit size field")
    return size


def encode(packet: DataPacket) -> bytes:
    size = packet.packet_size
    blocks = packet.blocks
    parts = [
        _FIXED.pack(
            VERSION,
            size,
            packet.flags,
            packet.packet_id,
            packet.connection_packet_number,
            packet.timestamp_micros,
        ),
        struct.pack(f"<{len(blocks)}H", *(b.num_channels for b in blocks)),
        struct.pack(f"<{len(blocks)}H", *(b.block_size for b in blocks)),
    ]
    for b in blocks:
        data = array("f", b.samples)
        if _SWAP:
            data.byteswap()
        parts.append(data.tobytes())
    out = b"".join(parts)
    assert len(out) == size
    return out


def _check_version(version: int) -> None:
    if version == VERSION:
        return
    if version == RESERVED_VERSION:
        raise BadVersionError(
            "packet version 10 is reserved: the first byte of a version-2 packet "
            "is 10, so no data packet can ever be version 10"
        )
    raise BadVersionError(f"unsupported data packet version {version}, expected {VERSION}")


def read_fixed_header(data: bytes, *, max_size: int = DEFAULT_MAX_PACKET_SIZE) -> FixedHeader:
    """Parse the 33-byte fixed header.

    A stream reader then needs ``header.payload_size`` more bytes.
    """
    if data:
        _check_version(data[0])
    if len(data) < FIXED_HEADER_SIZE:
        raise TruncatedPacketError(
            f"fixed header needs {FIXED_HEADER_SIZE} bytes, got {len(data)}"
        )
    if len(data) > FIXED_HEADER_SIZE:
        raise SizeMismatchError(
            f"fixed header is exactly {FIXED_HEADER_SIZE} bytes, got {len(data)}"
        )
    header = FixedHeader(*_FIXED.unpack(data))
    if header.packet_size < FIXED_HEADER_SIZE:
        raise SizeMismatchError(
            f"packet size {header.packet_size} is smaller than the fixed header"
        )
    if header.packet_size > max_size:
        raise PacketTooLargeError(
            f"packet size {header.packet_size} exceeds limit {max_size}"
        )
    return header


def decode(
    data: bytes,
    *,
    max_size: int = DEFAULT_MAX_PACKET_SIZE,
    lenient: bool = False,
) -> DataPacket:
    """Decode one complete packet.

    The buffer must hold exactly one packet. With ``lenient=True`` signal
    bits outside the defined table are tolerated: their blocks are skipped
    and the packet keeps only the known signals.
    """
    data = bytes(data)
    header = read_fixed_header(data[:FIXED_HEADER_SIZE], max_size=max_size)
    if header.packet_size != len(data):
        if header.packet_size > len(data):
            raise TruncatedPacketError(
                f"size field says {header.packet_size} bytes, buffer holds {len(data)}"
            )
        raise SizeMismatchError(
            f"size field says {header.packet_size} bytes, buffer holds {len(data)}"
        )

    flags = header.flags
    if lenient:
        nos = bin(flags).count("1")
        known = set(s.flag for s in signals.decompose(flags, lenient=True))
        slots = [1 << bit for bit in range(32) if flags >> bit & 1]
    else:
        try:
            types = signals.decompose(flags)
        except InvalidMaskError as exc:
            raise PacketMaskError(str(exc)) from exc
        nos = len(types)
        known = None
        slots = [s.flag for s in types]

    var_end = FIXED_HEADER_SIZE + 4 * nos
    if var_end > len(data):
        raise SizeMismatchError(
            f"{nos} signals need a {4 * nos}-byte variable header; packet has "
            f"{len(data) - FIXED_HEADER_SIZE} bytes after the fixed header"
        )
    counts = struct.unpack_from(f"<{nos}H", data, FIXED_HEADER_SIZE)
    sizes = struct.unpack_from(f"<{nos}H", data, FIXED_HEADER_SIZE + 2 * nos)
    expected = var_end + 4 * sum(c * s for c, s in zip(counts, sizes))
    if expected != len(data):
        raise SizeMismatchError(
            f"variable header describes {expected} bytes, packet size is {len(data)}"
        )

    blocks = []
    offset = var_end
    for flag, ch, bs in zip(slots, counts, sizes):
        n = ch * bs
        end = offset + 4 * n
        if known is None or flag in known:
            samples = array("f")
            samples.frombytes(data[offset:end])
            if _SWAP:
                samples.byteswap()
            blocks.append(SignalBlock(signals.from_flag(flag), ch, bs, tuple(samples)))
        offset = end

    return DataPacket(
        packet_id=header.packet_id,
        connection_packet_number=header.connection_packet_number,
        timestamp_micros=header.timestamp_micros,
        blocks=tuple(blocks),
    )
