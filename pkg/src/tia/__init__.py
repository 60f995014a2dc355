"""TiA 1.0 signal transport for Python."""
from .control import ControlMessage, Kind, TiaError
from .datapacket import DataPacket, SignalBlock, decode, encode
from .metainfo import MetaInfo, parse_metainfo, serialize_metainfo
from .signals import SIGNAL_TYPES, SignalType

__version__ = "0.1.0"
