"""Blocking TiA client plus gap accounting for connection packet numbers."""
from __future__ import annotations

import bisect
import enum
import socket
from dataclasses import dataclass

from . import control, datapacket
from .control import ControlMessage, Kind, TiaError
from .datapacket import FIXED_HEADER_SIZE, DataPacket
from .metainfo import MetaInfo, parse_metainfo

DEFAULT_TIMEOUT = 5.0
REORDER_WINDOW = 16
_U64_MAX = 0xFFFFFFFFFFFFFFFF


class ClientError(Exception):
    pass


class ServerError(ClientError):
    """The server answered with an Error reply."""

    def __init__(self, error: TiaError, command: Kind):
        self.error = error
        self.command = command
        desc = error.description or "no description"
        super().__init__(f"{command.token} failed: {desc}")

    @property
    def description(self) -> str | None:
        return self.error.description


class ProtocolViolation(ClientError):
    pass


class EndOfStream(ClientError, EOFError):
    pass


_EXPECTED = {
    Kind.CHECK_PROTOCOL_VERSION: Kind.OK,
    Kind.GET_METAINFO: Kind.METAINFO,
    Kind.GET_DATA_CONNECTION: Kind.DATA_CONNECTION_PORT,
    Kind.START_DATA_TRANSMISSION: Kind.OK,
    Kind.STOP_DATA_TRANSMISSION: Kind.OK,
    Kind.GET_SERVER_STATE_CONNECTION: Kind.SERVER_STATE_CONNECTION_PORT,
}


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise EndOfStream(f"data stream ended after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def read_packet(sock: socket.socket, *, max_size: int = datapacket.DEFAULT_MAX_PACKET_SIZE) -> DataPacket:
    """Read one packet from a TCP data stream, framed by its size field."""
    head = _recv_exact(sock, FIXED_HEADER_SIZE)
    header = datapacket.read_fixed_header(head, max_size=max_size)
    rest = _recv_exact(sock, header.payload_size)
    return datapacket.decode(head + rest, max_size=max_size)


class ClientConnection:
    """One control connection plus at most one data connection."""

    def __init__(self, host: str, port: int, *, timeout: float = DEFAULT_TIMEOUT):
        self.host = host
        self.port = port
        self.timeout = timeout
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self._rfile = self.sock.makefile("rb")
        self.data_transport: str | None = None
        self.data_port: int | None = None
        self.data_sock: socket.socket | None = None
        self.last_connection_packet_number: int | None = None

    # -- control ------------------------------------------------------------------

    def request(self, msg: ControlMessage) -> ControlMessage:
        """Send a command and return the matching reply; Error replies raise."""
        self.sock.sendall(control.serialize(msg))
        try:
            reply = control.parse(self._rfile)
        except socket.timeout:
            raise ClientError(f"no reply to {msg.kind.token} within {self.timeout} s") from None
        except control.ConnectionClosed:
            raise EndOfStream(f"server closed the control connection during {msg.kind.token}") from None
        if reply.kind is Kind.ERROR:
            try:
                err = control.error_of(reply)
            except control.ControlMessageError as exc:
                raise ProtocolViolation(f"unreadable error description: {exc}") from None
            raise ServerError(err, msg.kind)
        expected = _EXPECTED.get(msg.kind)
        if reply.kind is not expected:
            raise ProtocolViolation(f"{reply.kind.token} is not a valid reply to {msg.kind.token}")
        return reply

    def check_protocol_version(self) -> None:
        self.request(control.command(Kind.CHECK_PROTOCOL_VERSION))

    def get_metainfo(self) -> MetaInfo:
        reply = self.request(control.command(Kind.GET_METAINFO))
        return parse_metainfo(reply.content)

    def get_metainfo_xml(self) -> bytes:
        return self.request(control.command(Kind.GET_METAINFO)).content

    def get_data_connection(self, transport: str = "TCP", *, open: bool = True) -> int:
        """Ask for a data port; by default also connect to it."""
        transport = transport.upper()
        if self.data_transport is not None and self.data_transport != transport:
            raise ClientError(f"already holding a {self.data_transport} data connection")
        reply = self.request(control.get_data_connection(transport))
        self.data_transport = transport
        self.data_port = reply.port
        if open and self.data_sock is None:
            self.open_data_connection(transport, reply.port)
        return reply.port

    def open_data_connection(self, transport: str, port: int, *, host: str | None = None,
                             hello: bool = True) -> socket.socket:
        """Connect the data channel.

        For UDP the socket is bound to an ephemeral port and, with ``hello``,
        one empty datagram is sent so the server learns where to unicast.
        Pass ``hello=False`` with a bound port to receive broadcast packets.
        """
        if self.data_sock is not None:
            raise ClientError("data connection already open")
        host = host or self.host
        if transport.upper() == "TCP":
            sock = socket.create_connection((host, port), timeout=self.timeout)
        else:
            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            sock.settimeout(self.timeout)
            if hello:
                sock.bind(("", 0))
                sock.sendto(b"", (host, port))
            else:
                sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
                sock.bind(("", port))
        self.data_transport = transport.upper()
        self.data_sock = sock
        return sock

    def start(self) -> None:
        self.request(control.command(Kind.START_DATA_TRANSMISSION))

    def stop(self) -> None:
        self.request(control.command(Kind.STOP_DATA_TRANSMISSION))

    def get_state_connection(self) -> int:
        return self.request(control.command(Kind.GET_SERVER_STATE_CONNECTION)).port

    # -- data ---------------------------------------------------------------------

    def receive_packet(self, timeout: float | None = None) -> DataPacket:
        if self.data_sock is None:
            raise ClientError("no data connection")
        if timeout is not None:
            self.data_sock.settimeout(timeout)
        if self.data_transport == "TCP":
            packet = read_packet(self.data_sock)
        else:
            data = self.data_sock.recv(65535)
            packet = datapacket.decode(data)
        self.last_connection_packet_number = packet.connection_packet_number
        return packet

    def close(self) -> None:
        if self.data_sock is not None:
            self.data_sock.close()
            self.data_sock = None
        self._rfile.close()
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def connect(host: str, port: int, *, timeout: float = DEFAULT_TIMEOUT) -> ClientConnection:
    return ClientConnection(host, port, timeout=timeout)


# -- server state connection ----------------------------------------------------

class StateEvent(enum.Enum):
    RUNNING = "running"
    SHUTDOWN = "shutdown"


_STATE_EVENTS = {
    Kind.SERVER_STATE_RUNNING: StateEvent.RUNNING,
    Kind.SERVER_STATE_SHUTDOWN: StateEvent.SHUTDOWN,
}


def listen_state(host: str, port: int, *, timeout: float | None = None):
    """Yield state events until the server closes the connection.

    Nothing is ever written to the socket. A malformed message raises.
    """
    sock = socket.create_connection((host, port), timeout=timeout or DEFAULT_TIMEOUT)
    sock.settimeout(timeout)
    rfile = sock.makefile("rb")
    try:
        while True:
            try:
                msg = control.parse(rfile)
            except control.ConnectionClosed:
                return
            event = _STATE_EVENTS.get(msg.kind)
            if event is None:
                raise ProtocolViolation(f"{msg.kind.token} is not a state message")
            yield event
    finally:
        rfile.close()
        sock.close()


# -- gap accounting --------------------------------------------------------------

@dataclass(frozen=True)
class GapReport:
    expected_count: int
    received_count: int
    gaps: tuple[tuple[int, int], ...] = ()

    @property
    def missing_count(self) -> int:
        return sum(b - a + 1 for a, b in self.gaps)

    def __str__(self) -> str:
        spans = ", ".join(f"{a}" if a == b else f"{a}-{b}" for a, b in self.gaps)
        return (f"expected {self.expected_count}, received {self.received_count}, "
                f"{len(self.gaps)} gaps, {self.missing_count} missing"
                + (f" ({spans})" if spans else ""))


def _check_number(n: int) -> int:
    if not isinstance(n, int) or not 0 <= n <= _U64_MAX:
        raise ValueError(f"connection packet number {n!r} is not a 64-bit unsigned value")
    return n


def gap_report(observed, *, first: int | None = None, last: int | None = None) -> GapReport:
    """Gaps in a set of connection packet numbers.

    Input order does not matter and duplicates are ignored. The expected
    range runs from the smallest to the largest observed number, or from
    ``first`` to ``last`` when given (for loss at either end).
    """
    numbers = sorted({_check_number(n) for n in observed})
    if not numbers and (first is None or last is None):
        return GapReport(0, 0, ())
    lo = numbers[0] if first is None else first
    hi = numbers[-1] if last is None else last
    if numbers and (numbers[0] < lo or numbers[-1] > hi):
        raise ValueError(f"observed numbers fall outside the expected range {lo}..{hi}")
    if hi < lo:
        raise ValueError(f"empty expected range {lo}..{hi}")
    gaps = []
    prev = lo - 1
    for n in numbers + [hi + 1]:
        if n > prev + 1:
            gaps.append((prev + 1, n - 1))
        prev = n
    return GapReport(hi - lo + 1, len(numbers), tuple(gaps))


class GapTracker:
    """Streaming gap detection with a reorder window.

    A number is only declared lost once a number ``window`` or more above it
    has arrived; a late arrival before that fills its hole silently, and one
    after that is taken back out of the loss list.
    """

    def __init__(self, window: int = REORDER_WINDOW, first: int | None = None):
        if window < 1:
            raise ValueError("reorder window must be >= 1")
        self.window = window
        self.first = first
        self.received = 0
        self.duplicates = 0
        self.late = 0
        self._start = first
        self._floor = first  # everything below is final
        self._top: int | None = None
        self._pending: list[int] = []  # sorted, all >= _floor
        self._lost: list[tuple[int, int]] = []  # sorted inclusive ranges

    def add(self, n: int) -> list[tuple[int, int]]:
        """Record one number; returns ranges newly declared lost."""
        _check_number(n)
        if self._floor is None:
            self._start = self._floor = n
        if n < self._floor:
            if self.first is None and self._floor == self._start and not self._lost:
                # nothing finalised yet: reordering at the very start
                self._start = self._floor = n
            elif self._recover(n):
                self.received += 1
                self.late += 1
                return []
            else:
                if n < self._start:
                    self.late += 1
                else:
                    self.duplicates += 1
                return []
        i = bisect.bisect_left(self._pending, n)
        if i < len(self._pending) and self._pending[i] == n:
            self.duplicates += 1
            return []
        self._pending.insert(i, n)
        self.received += 1
        self._top = n if self._top is None else max(self._top, n)
        return self._finalize(self._top - self.window + 1)

    def _recover(self, n: int) -> bool:
        for i, (a, b) in enumerate(self._lost):
            if a <= n <= b:
                parts = [(a, n - 1)] if a < n else []
                if n < b:
                    parts.append((n + 1, b))
                self._lost[i:i + 1] = parts
                return True
        return False

    def _finalize(self, new_floor: int) -> list[tuple[int, int]]:
        declared = []
        while self._floor < new_floor:
            if self._pending and self._pending[0] == self._floor:
                self._pending.pop(0)
                self._floor += 1
                continue
            nxt = self._pending[0] if self._pending else new_floor
            end = min(nxt, new_floor) - 1
            declared.append((self._floor, end))
            self._floor = end + 1
        for rng in declared:
            if self._lost and self._lost[-1][1] == rng[0] - 1:
                self._lost[-1] = (self._lost[-1][0], rng[1])
            else:
                self._lost.append(rng)
        return declared

    @property
    def lost(self) -> tuple[tuple[int, int], ...]:
        return tuple(self._lost)

    def report(self, last: int | None = None) -> GapReport:
        """Report over ``start..max(top, last)``; open holes count as missing."""
        if self._start is None:
            if self.first is not None and last is not None:
                return GapReport(last - self.first + 1, 0, ((self.first, last),))
            return GapReport(0, 0, ())
        hi = self._top if self._top is not None else self._start - 1
        if last is not None:
            hi = max(hi, last)
        gaps = list(self._lost)
        floor = self._floor
        for n in self._pending + [hi + 1]:
            if n > floor:
                rng = (floor, n - 1)
                if gaps and gaps[-1][1] == rng[0] - 1:
                    gaps[-1] = (gaps[-1][0], rng[1])
                else:
                    gaps.append(rng)
            floor = n + 1
        return GapReport(hi - self._start + 1, self.received, tuple(gaps))
