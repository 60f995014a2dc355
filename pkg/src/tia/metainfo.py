"""The ``tiaMetaInfo`` XML document and its in-memory model."""
from __future__ import annotations

import datetime as dt
import math
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

from . import signals
from .signals import SignalType, UnknownSignalError

METAINFO_VERSION = "1.0"
XML_DECLARATION = b'<?xml version="1.0" encoding="UTF-8"?>'

# input-only aliases seen in circulating documents -> canonical attribute
_ATTR_ALIASES = {"sampleRate": "samplingRate", "lastName": "surname"}
# the schema's spelling of the button signal
_TYPE_ALIASES = {"buttons": "button"}

_SEX = ("m", "f")
_HANDEDNESS = ("l", "r")
_XSD_TRUE = ("true", "1")
_XSD_FALSE = ("false", "0")


class MetaInfoError(ValueError):
    pass


class MetaInfoAliasWarning(UserWarning):
    """A non-canonical attribute name or type spelling was accepted."""


@dataclass(frozen=True)
class Subject:
    id: str | None = None
    first_name: str | None = None
    surname: str | None = None
    sex: str | None = None
    birthday: dt.date | None = None
    handedness: str | None = None
    medication: bool | None = None
    glasses: bool | None = None
    smoker: bool | None = None

    def __post_init__(self):
        if self.sex is not None and self.sex not in _SEX:
            raise MetaInfoError(f"subject sex must be one of {_SEX}, got {self.sex!r}")
        if self.handedness is not None and self.handedness not in _HANDEDNESS:
            raise MetaInfoError(
                f"subject handedness must be one of {_HANDEDNESS}, got {self.handedness!r}"
            )


@dataclass(frozen=True)
class MasterSignal:
    sampling_rate: float
    block_size: int

    def __post_init__(self):
        if not (self.sampling_rate > 0 and math.isfinite(self.sampling_rate)):
            raise MetaInfoError(f"master sampling rate must be > 0, got {self.sampling_rate}")
        if self.block_size < 1:
            raise MetaInfoError(f"master block size must be >= 1, got {self.block_size}")

    @property
    def packet_interval(self) -> float:
        """Seconds covered by one packet."""
        return self.block_size / self.sampling_rate


@dataclass(frozen=True)
class Channel:
    nr: int
    label: str

    def __post_init__(self):
        if self.nr < 1:
            raise MetaInfoError(f"channel nr must be >= 1, got {self.nr}")
        if self.label is None:
            raise MetaInfoError("channel label is required")


@dataclass(frozen=True)
class SignalInfo:
    signal_type: SignalType
    sampling_rate: float
    block_size: int
    num_channels: int
    channels: tuple[Channel, ...] = ()

    def __post_init__(self):
        if isinstance(self.signal_type, str):
            object.__setattr__(self, "signal_type", signals.signal_type(self.signal_type))
        object.__setattr__(self, "channels", tuple(self.channels))
        if not math.isfinite(self.sampling_rate) or self.sampling_rate < 0:
            raise MetaInfoError(f"{self.signal_type} sampling rate must be >= 0")
        if self.block_size < 0:
            raise MetaInfoError(f"{self.signal_type} block size must be >= 0")
        if self.num_channels < 0:
            raise MetaInfoError(f"{self.signal_type} numChannels must be >= 0")
        if len(self.channels) > self.num_channels:
            raise MetaInfoError(
                f"{self.signal_type} lists {len(self.channels)} channels but numChannels "
                f"is {self.num_channels}"
            )
        seen = set()
        for ch in self.channels:
            if ch.nr > self.num_channels:
                raise MetaInfoError(
                    f"{self.signal_type} channel nr {ch.nr} exceeds numChannels {self.num_channels}"
                )
            if ch.nr in seen:
                raise MetaInfoError(f"{self.signal_type} has duplicate channel nr {ch.nr}")
            seen.add(ch.nr)

    def label_of(self, nr: int) -> str | None:
        for ch in self.channels:
            if ch.nr == nr:
                return ch.label
        return None


@dataclass(frozen=True)
class MetaInfo:
    subject: Subject | None = None
    master_signal: MasterSignal | None = None
    signals: tuple[SignalInfo, ...] = field(default=())
    version: str = METAINFO_VERSION

    def __post_init__(self):
        object.__setattr__(self, "signals", tuple(self.signals))
        if self.version != METAINFO_VERSION:
            raise MetaInfoError(f"tiaMetaInfo version must be {METAINFO_VERSION!r}, got {self.version!r}")
        seen = set()
        for s in self.signals:
            if s.signal_type in seen:
                raise MetaInfoError(f"signal type {s.signal_type} described twice")
            seen.add(s.signal_type)

    def signal(self, identifier: str) -> SignalInfo | None:
        for s in self.signals:
            if s.signal_type.identifier == identifier:
                return s
        return None


# -- parsing ---------------------------------------------------------------

def _attrs(elem: ET.Element) -> dict[str, str]:
    attrs = {}
    for name, value in elem.attrib.items():
        canonical = _ATTR_ALIASES.get(name)
        if canonical is not None:
            if canonical in elem.attrib:
                raise MetaInfoError(f"<{elem.tag}> has both {name!r} and {canonical!r}")
            warnings.warn(
                f"<{elem.tag}> attribute {name!r} read as {canonical!r}",
                MetaInfoAliasWarning,
                stacklevel=4,
            )
            name = canonical
        attrs[name] = value
    return attrs


def _required(attrs: dict, name: str, tag: str) -> str:
    try:
        return attrs[name]
    except KeyError:
        raise MetaInfoError(f"<{tag}> is missing required attribute {name!r}") from None


def _float(text: str, what: str) -> float:
    try:
        value = float(text.strip())
    except ValueError:
        raise MetaInfoError(f"{what} is not a number: {text!r}") from None
    return value


def _int(text: str, what: str) -> int:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        raise MetaInfoError(f"{what} is not an integer: {text!r}") from None


def _bool(text: str | None, what: str) -> bool | None:
    if text is None:
        return None
    text = text.strip()
    if text in _XSD_TRUE:
        return True
    if text in _XSD_FALSE:
        return False
    raise MetaInfoError(f"{what} is not an xsd:boolean: {text!r}")


def _date(text: str | None) -> dt.date | None:
    if text is None:
        return None
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise MetaInfoError(f"birthday is not an xsd:date: {text!r}") from None


def _signal_type(name: str) -> SignalType:
    if name in _TYPE_ALIASES:
        warnings.warn(
            f"signal type {name!r} read as {_TYPE_ALIASES[name]!r}",
            MetaInfoAliasWarning,
            stacklevel=4,
        )
        name = _TYPE_ALIASES[name]
    try:
        return signals.signal_type(name)
    except UnknownSignalError as exc:
        raise MetaInfoError(str(exc)) from None


def _parse_subject(elem: ET.Element) -> Subject:
    a = _attrs(elem)
    return Subject(
        id=a.get("id"),
        first_name=a.get("firstName"),
        surname=a.get("surname"),
        sex=a.get("sex"),
        birthday=_date(a.get("birthday")),
        handedness=a.get("handedness"),
        medication=_bool(a.get("medication"), "medication"),
        glasses=_bool(a.get("glasses"), "glasses"),
        smoker=_bool(a.get("smoker"), "smoker"),
    )


def _parse_master(elem: ET.Element) -> MasterSignal:
    a = _attrs(elem)
    return MasterSignal(
        sampling_rate=_float(_required(a, "samplingRate", elem.tag), "master samplingRate"),
        block_size=_int(_required(a, "blockSize", elem.tag), "master blockSize"),
    )


def _parse_signal(elem: ET.Element) -> SignalInfo:
    a = _attrs(elem)
    stype = _signal_type(_required(a, "type", elem.tag))
    channels = []
    for ch in elem.findall("channel"):
        ca = _attrs(ch)
        channels.append(Channel(
            nr=_int(_required(ca, "nr", "channel"), "channel nr"),
            label=_required(ca, "label", "channel"),
        ))
    return SignalInfo(
        signal_type=stype,
        sampling_rate=_float(_required(a, "samplingRate", elem.tag), f"{stype} samplingRate"),
        block_size=_int(_required(a, "blockSize", elem.tag), f"{stype} blockSize"),
        num_channels=_int(_required(a, "numChannels", elem.tag), f"{stype} numChannels"),
        channels=tuple(channels),
    )


def parse_metainfo(data: bytes | str) -> MetaInfo:
    """Parse a ``tiaMetaInfo`` document.

    The misspelled attributes ``sampleRate`` and ``lastName`` and the type
    ``buttons`` are accepted with a :class:`MetaInfoAliasWarning`.
    """
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise MetaInfoError(f"malformed metainfo XML: {exc}") from None
    if root.tag != "tiaMetaInfo":
        raise MetaInfoError(f"root element must be <tiaMetaInfo>, got <{root.tag}>")
    version = root.get("version")
    if version != METAINFO_VERSION:
        raise MetaInfoError(f"tiaMetaInfo version must be {METAINFO_VERSION!r}, got {version!r}")

    subjects = root.findall("subject")
    masters = root.findall("masterSignal")
    if len(subjects) > 1 or len(masters) > 1:
        raise MetaInfoError("at most one <subject> and one <masterSignal> allowed")
    try:
        return MetaInfo(
            subject=_parse_subject(subjects[0]) if subjects else None,
            master_signal=_parse_master(masters[0]) if masters else None,
            signals=tuple(_parse_signal(e) for e in root.findall("signal")),
        )
    except (TypeError, UnknownSignalError) as exc:
        raise MetaInfoError(str(exc)) from None


# -- serialization ---------------------------------------------------------

def _fmt_float(value: float) -> str:
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(float(value))


def _fmt_bool(value: bool) -> str:
    return "true" if value else "false"


def serialize_metainfo(info: MetaInfo) -> bytes:
    """UTF-8 document with an XML declaration and canonical attribute names."""
    if not isinstance(info, MetaInfo):
        raise MetaInfoError(f"expected MetaInfo, got {type(info).__name__}")
    root = ET.Element("tiaMetaInfo", version=info.version)

    if info.subject is not None:
        s = info.subject
        attrs = {}
        for name, value in (
            ("id", s.id),
            ("firstName", s.first_name),
            ("surname", s.surname),
            ("sex", s.sex),
            ("birthday", s.birthday.isoformat() if s.birthday else None),
            ("handedness", s.handedness),
        ):
            if value is not None:
                attrs[name] = value
        for name, value in (("medication", s.medication), ("glasses", s.glasses), ("smoker", s.smoker)):
            if value is not None:
                attrs[name] = _fmt_bool(value)
        ET.SubElement(root, "subject", attrs)

    if info.master_signal is not None:
        m = info.master_signal
        ET.SubElement(root, "masterSignal", {
            "samplingRate": _fmt_float(m.sampling_rate),
            "blockSize": str(m.block_size),
        })

    for sig in info.signals:
        elem = ET.SubElement(root, "signal", {
            "type": sig.signal_type.identifier,
            "samplingRate": _fmt_float(sig.sampling_rate),
            "blockSize": str(sig.block_size),
            "numChannels": str(sig.num_channels),
        })
        for ch in sig.channels:
            ET.SubElement(elem, "channel", {"nr": str(ch.nr), "label": ch.label})

    body = ET.tostring(root, encoding="unicode", short_empty_elements=False)
    return XML_DECLARATION + body.encode("utf-8")


# -- consistency with packet framing ----------------------------------------

def validate_stream_consistency(info: MetaInfo) -> list[str]:
    """Check that every periodic signal fills exactly one master block interval.

    Each packet covers one master block; a periodic signal therefore needs
    ``sampling_rate / block_size`` equal to the master's ratio. Aperiodic
    signals are exempt. Returns human-readable violations, empty if none.
    """
    problems = []
    periodic = [s for s in info.signals if not s.signal_type.aperiodic]
    master = info.master_signal
    if master is None:
        if periodic:
            problems.append("no masterSignal, cannot check periodic signal rates")
        return problems
    packets_per_second = master.sampling_rate / master.block_size
    for s in periodic:
        if s.block_size == 0:
            problems.append(f"{s.signal_type}: periodic signal with block size 0")
            continue
        rate = s.sampling_rate / s.block_size
        if not math.isclose(rate, packets_per_second, rel_tol=1e-9):
            problems.append(
                f"{s.signal_type}: {s.sampling_rate:g} Hz / block {s.block_size} gives "
                f"{rate:g} blocks/s, master gives {packets_per_second:g} packets/s"
            )
    return problems
