"""Line-structured control and server-state messages.

A message is a version line, a command line, optional content description
lines, an empty line and then the declared number of content bytes::

    TiA 1.0\\n
    Error\\n
    Content-Length: 73\\n
    \\n
    <tiaError version="1.0" description="Human readable error description."/>

Serialization is canonical (no trailing blanks); parsing tolerates trailing
spaces or a CR before each LF.
"""
from __future__ import annotations

import enum
import io
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from xml.sax.saxutils import escape

PROTOCOL_VERSION = "1.0"
VERSION_LINE = "TiA " + PROTOCOL_VERSION
CONTENT_LENGTH = "Content-Length"
DEFAULT_MAX_CONTENT = 4 * 1024 * 1024
MAX_LINE = 4096
MAX_HEADER_LINES = 32


class ControlMessageError(ValueError):
    """A control message could not be parsed or serialized.

    ``recoverable`` is true when the whole message was consumed from the
    stream, so the next message can still be read.
    """

    recoverable = True


class UnsupportedVersionError(ControlMessageError):
    pass


class UnknownCommandError(ControlMessageError):
    pass


class MalformedMessageError(ControlMessageError):
    pass


class FramingError(ControlMessageError):
    """The stream cannot be resynchronised after this error."""

    recoverable = False


class ContentLengthError(FramingError):
    pass


class IncompleteMessageError(FramingError):
    pass


class ConnectionClosed(IncompleteMessageError):
    """The stream ended cleanly before the first byte of a message."""


class TiaErrorXMLError(ControlMessageError):
    pass


class Kind(enum.Enum):
    # client commands
    CHECK_PROTOCOL_VERSION = "CheckProtocolVersion"
    GET_METAINFO = "GetMetaInfo"
    GET_DATA_CONNECTION = "GetDataConnection"
    START_DATA_TRANSMISSION = "StartDataTransmission"
    STOP_DATA_TRANSMISSION = "StopDataTransmission"
    GET_SERVER_STATE_CONNECTION = "GetServerStateConnection"
    # replies
    OK = "OK"
    ERROR = "Error"
    METAINFO = "MetaInfo"
    DATA_CONNECTION_PORT = "DataConnectionPort"
    SERVER_STATE_CONNECTION_PORT = "ServerStateConnectionPort"
    # state messages
    SERVER_STATE_RUNNING = "ServerStateRunning"
    SERVER_STATE_SHUTDOWN = "ServerStateShutdown"

    @property
    def token(self) -> str:
        return self.value


COMMANDS = frozenset({
    Kind.CHECK_PROTOCOL_VERSION,
    Kind.GET_METAINFO,
    Kind.GET_DATA_CONNECTION,
    Kind.START_DATA_TRANSMISSION,
    Kind.STOP_DATA_TRANSMISSION,
    Kind.GET_SERVER_STATE_CONNECTION,
})
REPLIES = frozenset({
    Kind.OK,
    Kind.ERROR,
    Kind.METAINFO,
    Kind.DATA_CONNECTION_PORT,
    Kind.SERVER_STATE_CONNECTION_PORT,
})
STATE_MESSAGES = frozenset({Kind.SERVER_STATE_RUNNING, Kind.SERVER_STATE_SHUTDOWN})

TRANSPORTS = ("TCP", "UDP")

_TRANSPORT_KINDS = {Kind.GET_DATA_CONNECTION}
_PORT_KINDS = {Kind.DATA_CONNECTION_PORT, Kind.SERVER_STATE_CONNECTION_PORT}
_BY_TOKEN = {k.value: k for k in Kind}


@dataclass(frozen=True)
class ControlMessage:
    kind: Kind
    transport: str | None = None
    port: int | None = None
    content: bytes | None = None
    version: str = PROTOCOL_VERSION

    def __post_init__(self):
        kind = self.kind
        if kind in _TRANSPORT_KINDS:
            if self.transport not in TRANSPORTS:
                raise MalformedMessageError(
                    f"{kind.token} needs a transport in {TRANSPORTS}, got {self.transport!r}"
                )
        elif self.transport is not None:
            raise MalformedMessageError(f"{kind.token} takes no transport")
        if kind in _PORT_KINDS:
            if not isinstance(self.port, int) or not 1 <= self.port <= 65535:
                raise MalformedMessageError(f"{kind.token} needs a port in 1..65535, got {self.port!r}")
        elif self.port is not None:
            raise MalformedMessageError(f"{kind.token} takes no port")
        if kind is Kind.METAINFO:
            if self.content is None:
                raise MalformedMessageError("MetaInfo reply needs content")
        elif kind is not Kind.ERROR and self.content is not None:
            raise MalformedMessageError(f"{kind.token} carries no content")
        if self.content is not None and not isinstance(self.content, bytes):
            object.__setattr__(self, "content", bytes(self.content))

    @property
    def command_line(self) -> str:
        if self.transport is not None:
            return f"{self.kind.token}: {self.transport}"
        if self.port is not None:
            return f"{self.kind.token}: {self.port}"
        return self.kind.token

    @property
    def is_command(self) -> bool:
        return self.kind in COMMANDS


# constructors for the common messages

def command(kind: Kind) -> ControlMessage:
    return ControlMessage(kind)


def get_data_connection(transport: str) -> ControlMessage:
    return ControlMessage(Kind.GET_DATA_CONNECTION, transport=transport)


def ok() -> ControlMessage:
    return ControlMessage(Kind.OK)


def error(description: str | None = None) -> ControlMessage:
    if description is None:
        return ControlMessage(Kind.ERROR)
    return ControlMessage(Kind.ERROR, content=serialize_error_xml(TiaError(description)))


def metainfo_reply(xml: bytes) -> ControlMessage:
    return ControlMessage(Kind.METAINFO, content=xml)


def data_connection_port(port: int) -> ControlMessage:
    return ControlMessage(Kind.DATA_CONNECTION_PORT, port=port)


def state_connection_port(port: int) -> ControlMessage:
    return ControlMessage(Kind.SERVER_STATE_CONNECTION_PORT, port=port)


def serialize(msg: ControlMessage) -> bytes:
    if msg.version != PROTOCOL_VERSION:
        raise UnsupportedVersionError(f"cannot serialize TiA version {msg.version!r}")
    lines = [VERSION_LINE, msg.command_line]
    if msg.content is not None:
        lines.append(f"{CONTENT_LENGTH}: {len(msg.content)}")
    head = "".join(line + "\n" for line in lines) + "\n"
    return head.encode("utf-8") + (msg.content or b"")


# -- parsing -------------------------------------------------------------

def _clean_line(raw: bytes) -> str:
    if len(raw) > MAX_LINE:
        raise FramingError(f"line longer than {MAX_LINE} bytes")
    if not raw.endswith(b"\n"):
        raise IncompleteMessageError("stream ended inside a message line")
    try:
        return raw[:-1].rstrip(b" \r").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FramingError(f"message line is not UTF-8: {exc}") from None


def _content_length(headers: list[str], max_content: int) -> int | None:
    length = None
    for line in headers:
        name, sep, value = line.partition(":")
        if name != CONTENT_LENGTH or not sep:
            continue
        value = value.strip(" ")
        if not value.isdigit() or not value.isascii():
            raise ContentLengthError(f"malformed Content-Length {value!r}")
        n = int(value)
        if n > max_content:
            raise ContentLengthError(f"Content-Length {n} exceeds limit {max_content}")
        if length is not None and length != n:
            raise ContentLengthError("conflicting Content-Length lines")
        length = n
    return length


def _interpret(version_line: str, command_line: str, headers: list[str],
               content: bytes | None, lenient: bool) -> ControlMessage:
    if version_line != VERSION_LINE:
        raise UnsupportedVersionError(f"bad version line {version_line!r}")
    for line in headers:
        name, sep, _ = line.partition(":")
        if not (sep and name == CONTENT_LENGTH) and not lenient:
            raise MalformedMessageError(f"unknown content description line {line!r}")

    token, sep, arg = command_line.partition(":")
    kind = _BY_TOKEN.get(token)
    if kind is None:
        raise UnknownCommandError(f"unknown command {command_line!r}")
    arg = arg.strip(" ")
    if kind in _TRANSPORT_KINDS:
        if not sep:
            raise MalformedMessageError(f"{token} needs a transport")
        return ControlMessage(kind, transport=arg, content=content)
    if kind in _PORT_KINDS:
        if not sep or not arg.isdigit() or not arg.isascii():
            raise MalformedMessageError(f"{token} needs a numeric port, got {arg!r}")
        return ControlMessage(kind, port=int(arg), content=content)
    if sep:
        raise MalformedMessageError(f"{token} takes no argument")
    return ControlMessage(kind, content=content)


class _Head:
    """Accumulates the line section of a message."""

    def __init__(self):
        self.lines: list[str] = []

    def feed(self, raw: bytes, first: bool) -> bool:
        """Add one raw line; returns True when the empty line was seen."""
        if first and not raw:
            raise ConnectionClosed("connection closed")
        line = _clean_line(raw)
        if line == "":
            if len(self.lines) < 2:
                raise MalformedMessageError("message needs a version line and a command line")
            return True
        if len(self.lines) >= 2 + MAX_HEADER_LINES:
            raise FramingError("too many content description lines")
        self.lines.append(line)
        return False


def parse(reader, *, max_content: int = DEFAULT_MAX_CONTENT, lenient: bool = False) -> ControlMessage:
    """Read exactly one message from a binary stream.

    ``reader`` needs ``readline(limit)`` and ``read(n)``, like a file from
    ``socket.makefile("rb")`` or ``io.BytesIO``.
    """
    head = _Head()
    first = True
    while True:
        raw = reader.readline(MAX_LINE + 1)
        if head.feed(raw, first):
            break
        first = False
    length = _content_length(head.lines[2:], max_content)
    content = None
    if length is not None:
        content = _read_exact(reader, length)
    return _interpret(head.lines[0], head.lines[1], head.lines[2:], content, lenient)


def _read_exact(reader, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = reader.read(remaining)
        if not chunk:
            raise IncompleteMessageError(
                f"stream ended after {n - remaining} of {n} content bytes"
            )
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


async def parse_async(reader, *, max_content: int = DEFAULT_MAX_CONTENT,
                      lenient: bool = False) -> ControlMessage:
    """:func:`parse` for an :class:`asyncio.StreamReader`."""
    import asyncio

    head = _Head()
    first = True
    while True:
        try:
            raw = await reader.readuntil(b"\n")
        except asyncio.IncompleteReadError as exc:
            raw = exc.partial
        except asyncio.LimitOverrunError:
            raise FramingError("message line too long") from None
        if head.feed(raw, first):
            break
        first = False
    length = _content_length(head.lines[2:], max_content)
    content = None
    if length is not None:
        try:
            content = await reader.readexactly(length)
        except asyncio.IncompleteReadError as exc:
            raise IncompleteMessageError(
                f"stream ended after {len(exc.partial)} of {length} content bytes"
            ) from None
    return _interpret(head.lines[0], head.lines[1], head.lines[2:], content, lenient)


def parse_bytes(data: bytes, **kwargs) -> ControlMessage:
    """Parse a buffer that holds exactly one message."""
    stream = io.BytesIO(data)
    msg = parse(stream, **kwargs)
    rest = stream.read()
    if rest:
        raise MalformedMessageError(f"{len(rest)} trailing bytes after message")
    return msg


# -- error description ---------------------------------------------------

@dataclass(frozen=True)
class TiaError:
    description: str | None = None


def serialize_error_xml(err: TiaError) -> bytes:
    attrs = f'version="{PROTOCOL_VERSION}"'
    if err.description is not None:
        desc = escape(err.description, {'"': "&quot;", "\n": "&#10;", "\r": "&#13;", "\t": "&#9;"})
        attrs += f' description="{desc}"'
    return f"<tiaError {attrs}/>".encode("utf-8")


def parse_error_xml(data: bytes) -> TiaError:
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise TiaErrorXMLError(f"malformed tiaError XML: {exc}") from None
    if root.tag != "tiaError":
        raise TiaErrorXMLError(f"expected <tiaError>, got <{root.tag}>")
    version = root.get("version")
    if version != PROTOCOL_VERSION:
        raise TiaErrorXMLError(f"tiaError version must be {PROTOCOL_VERSION!r}, got {version!r}")
    return TiaError(root.get("description"))


def error_of(msg: ControlMessage) -> TiaError:
    """The error description carried by an Error reply."""
    if msg.kind is not Kind.ERROR:
        raise ValueError(f"{msg.kind.token} is not an Error reply")
    if not msg.content:
        return TiaError()
    return parse_error_xml(msg.content)
