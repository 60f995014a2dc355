"""TiA server with one control session per client and a shared packet timeline.

:func:`handle_command` and :func:`tia.sources.generate_tick` hold the
protocol logic and need no network. :class:`TiaServer` wires them to asyncio
sockets; :func:`run` starts one on a background thread for synchronous
callers.
"""
from __future__ import annotations

import asyncio
import dataclasses
import json
import logging
import os
import socket
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import control, datapacket, metainfo as mi, sources as src
from .control import ControlMessage, Kind
from .metainfo import MetaInfo
from .sources import SourceSpec

log = logging.getLogger("tia.server")

DEFAULT_CONTROL_PORT = 9000
UDP_UNICAST = "unicast"
UDP_BROADCAST = "broadcast"
MAX_DATAGRAM = 65507


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ServerConfig:
    """Everything a server needs to run.

    ``clock`` picks the time stamp source: ``"tick"`` derives it from the tick
    index, ``"wall"`` from elapsed monotonic time. ``delivery`` decides what a
    full per-session queue does: ``"lockstep"`` pauses the timeline,
    ``"realtime"`` drops the packet for that session. ``speed`` scales the
    packet pacing; 0 generates as fast as the slowest consumer allows.
    """

    metainfo: MetaInfo
    sources: tuple[SourceSpec, ...]
    host: str = "127.0.0.1"
    control_port: int = DEFAULT_CONTROL_PORT
    udp_mode: str = UDP_UNICAST
    broadcast_address: str = "255.255.255.255"
    state_heartbeat_interval: float | None = None
    clock: str = "tick"
    delivery: str = "lockstep"
    speed: float = 1.0
    queue_size: int = 64
    shutdown_grace: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        if self.metainfo.master_signal is None:
            raise ConfigError("server metainfo needs a masterSignal")
        problems = mi.validate_stream_consistency(self.metainfo)
        if problems:
            raise ConfigError("metainfo is not streamable: " + "; ".join(problems))
        try:
            src.check_sources(self.sources, self.metainfo)
        except src.SourceError as exc:
            raise ConfigError(str(exc)) from None
        if self.udp_mode not in (UDP_UNICAST, UDP_BROADCAST):
            raise ConfigError(f"udp_mode must be {UDP_UNICAST!r} or {UDP_BROADCAST!r}")
        if self.clock not in ("tick", "wall"):
            raise ConfigError("clock must be 'tick' or 'wall'")
        if self.delivery not in ("lockstep", "realtime"):
            raise ConfigError("delivery must be 'lockstep' or 'realtime'")
        if not 0 <= self.control_port <= 65535:
            raise ConfigError(f"control_port {self.control_port} out of range")
        if self.speed < 0:
            raise ConfigError("speed must be >= 0")
        if self.queue_size < 1:
            raise ConfigError("queue_size must be >= 1")
        if self.state_heartbeat_interval is not None and self.state_heartbeat_interval <= 0:
            raise ConfigError("state_heartbeat_interval must be > 0")

    @property
    def packet_interval(self) -> float:
        return self.metainfo.master_signal.packet_interval


# -- JSON config -------------------------------------------------------------

def _source_from_dict(d: dict) -> SourceSpec:
    d = dict(d)
    signal = d.pop("signal")
    schedule = d.pop("change_schedule", ())
    kind = d.pop("generator", None)
    generator = None
    if kind is not None:
        try:
            generator = src.GENERATORS[kind](**d)
        except KeyError:
            raise ConfigError(f"unknown generator {kind!r}") from None
        except TypeError as exc:
            raise ConfigError(f"bad parameters for {kind} generator: {exc}") from None
    elif d:
        raise ConfigError(f"unexpected source keys {sorted(d)}")
    return SourceSpec(signal=signal, generator=generator, change_schedule=schedule)


def _metainfo_from_dict(d: dict) -> MetaInfo:
    subject = d.get("subject")
    if subject is not None:
        subject = dict(subject)
        if subject.get("birthday"):
            import datetime as dt

            subject["birthday"] = dt.date.fromisoformat(subject["birthday"])
        subject = mi.Subject(**subject)
    master = d.get("master_signal")
    if master is not None:
        master = mi.MasterSignal(**master)
    signals = []
    for s in d.get("signals", ()):
        s = dict(s)
        channels = tuple(mi.Channel(**c) for c in s.pop("channels", ()))
        signals.append(mi.SignalInfo(signal_type=s.pop("type"), channels=channels, **s))
    return MetaInfo(subject=subject, master_signal=master, signals=tuple(signals))


def config_from_dict(d: dict, base_dir: Path | None = None) -> ServerConfig:
    d = dict(d)
    try:
        if "metainfo_file" in d:
            path = Path(d.pop("metainfo_file"))
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            info = mi.parse_metainfo(path.read_bytes())
        else:
            info = _metainfo_from_dict(d.pop("metainfo"))
        sources = tuple(_source_from_dict(s) for s in d.pop("sources"))
        return ServerConfig(metainfo=info, sources=sources, **d)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise ConfigError(f"invalid server config: {exc!r}") from None


def load_config(path: str | os.PathLike) -> ServerConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(raw, base_dir=path.parent)


# -- per-session protocol state ----------------------------------------------

@dataclass(frozen=True)
class ClientSession:
    session_id: int
    data_transport: str | None = None
    data_port: int | None = None
    state_port: int | None = None
    transmitting: bool = False
    connection_packet_number: int = 0  # last number sent on the data connection


def handle_command(
    session: ClientSession,
    msg: ControlMessage,
    *,
    metainfo_xml: bytes,
    allocate_data_port: Callable[[str], int],
    allocate_state_port: Callable[[], int],
) -> tuple[ControlMessage, ClientSession]:
    """Answer one client command and return the updated session.

    Port allocation is delegated to the two callables so the transition
    itself can be exercised without sockets.
    """
    kind = msg.kind
    if kind is Kind.CHECK_PROTOCOL_VERSION:
        if msg.version != control.PROTOCOL_VERSION:
            return control.error(f"protocol version {msg.version} not supported"), session
        return control.ok(), session

    if kind is Kind.GET_METAINFO:
        return control.metainfo_reply(metainfo_xml), session

    if kind is Kind.GET_DATA_CONNECTION:
        if session.data_transport is not None:
            if session.data_transport != msg.transport:
                return control.error(
                    f"a {session.data_transport} data connection is already allocated "
                    f"on port {session.data_port}"
                ), session
            return control.data_connection_port(session.data_port), session
        try:
            port = allocate_data_port(msg.transport)
        except OSError as exc:
            return control.error(f"cannot open {msg.transport} data connection: {exc}"), session
        session = dataclasses.replace(session, data_transport=msg.transport, data_port=port)
        return control.data_connection_port(port), session

    if kind is Kind.START_DATA_TRANSMISSION:
        if session.data_transport is None:
            return control.error("no data connection; send GetDataConnection first"), session
        return control.ok(), dataclasses.replace(session, transmitting=True)

    if kind is Kind.STOP_DATA_TRANSMISSION:
        if not session.transmitting:
            return control.error("data transmission is not running"), session
        return control.ok(), dataclasses.replace(session, transmitting=False)

    if kind is Kind.GET_SERVER_STATE_CONNECTION:
        if session.state_port is None:
            try:
                port = allocate_state_port()
            except OSError as exc:
                return control.error(f"cannot open server state connection: {exc}"), session
            session = dataclasses.replace(session, state_port=port)
        return control.state_connection_port(session.state_port), session

    return control.error(f"{kind.token} is not a server command"), session


# -- data sinks ------------------------------------------------------------------

def _bound_socket(host: str, kind: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, kind)
    try:
        if kind == socket.SOCK_STREAM:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((host, 0))
        if kind == socket.SOCK_STREAM:
            sock.listen(1)
        sock.setblocking(False)
    except OSError:
        sock.close()
        raise
    return sock


class _TcpSink:
    """One listener that accepts exactly one data connection."""

    def __init__(self, host: str):
        self._sock = _bound_socket(host, socket.SOCK_STREAM)
        self.port = self._sock.getsockname()[1]
        self._server = None
        self._writer = None
        self._connected = asyncio.Event()
        self.closed = False

    async def start(self):
        self._server = await asyncio.start_server(self._accept, sock=self._sock)

    async def _accept(self, reader, writer):
        if self._writer is not None or self.closed:
            writer.close()
            return
        self._writer = writer
        self._connected.set()
        log.debug("tcp data connection from %s", writer.get_extra_info("peername"))

    async def send(self, data: bytes) -> bool:
        await self._connected.wait()
        if self.closed:
            return False
        try:
            self._writer.write(data)
            await self._writer.drain()
        except (ConnectionError, OSError):
            self.closed = True
            return False
        return True

    async def close(self):
        self.closed = True
        self._connected.set()
        if self._server is not None:
            self._server.close()
        else:
            self._sock.close()
        if self._writer is not None:
            self._writer.close()
            try:
                await self._writer.wait_closed()
            except (ConnectionError, OSError):
                pass


class _HelloProtocol(asyncio.DatagramProtocol):
    def __init__(self, sink):
        self.sink = sink

    def datagram_received(self, data, addr):
        if self.sink.peer is None:
            self.sink.peer = addr
            self.sink.ready.set()
            log.debug("udp hello from %s", addr)


class _UdpSink:
    """Unicast to the source of the first datagram, or broadcast."""

    def __init__(self, host: str, broadcast_address: str | None):
        self.broadcast = broadcast_address is not None
        self.peer = None
        self.ready = asyncio.Event()
        self.closed = False
        self._transport = None
        if self.broadcast:
            # reserve a free port number for the receivers, then release it
            probe = _bound_socket(host, socket.SOCK_DGRAM)
            self.port = probe.getsockname()[1]
            probe.close()
            self.peer = (broadcast_address, self.port)
            self.ready.set()
            self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_BROADCAST, 1)
            self._sock.setblocking(False)
        else:
            self._sock = _bound_socket(host, socket.SOCK_DGRAM)
            self.port = self._sock.getsockname()[1]

    async def start(self):
        loop = asyncio.get_running_loop()
        self._transport, _ = await loop.create_datagram_endpoint(
            lambda: _HelloProtocol(self), sock=self._sock
        )

    async def send(self, data: bytes) -> bool:
        await self.ready.wait()
        if self.closed:
            return False
        if len(data) > MAX_DATAGRAM:
            log.warning("packet of %d bytes does not fit a UDP datagram, dropped", len(data))
            return False
        self._transport.sendto(data, self.peer)
        return True

    async def close(self):
        self.closed = True
        self.ready.set()
        if self._transport is not None:
            self._transport.close()
        else:
            self._sock.close()


# -- runtime ---------------------------------------------------------------------

class _SessionRuntime:
    def __init__(self, server: "TiaServer", session_id: int, writer):
        self.server = server
        self.state = ClientSession(session_id)
        self.writer = writer
        self.sink = None
        self.state_listener = None
        self.state_writers: list = []
        self.queue: asyncio.Queue = asyncio.Queue(server.config.queue_size)
        self.sender = None
        self.dropped = 0
        self.sent = 0
        self._pending = []

    @property
    def transmitting(self) -> bool:
        return self.state.transmitting

    # allocators called synchronously from handle_command
    def allocate_data_port(self, transport: str) -> int:
        cfg = self.server.config
        if transport == "TCP":
            self.sink = _TcpSink(cfg.host)
        else:
            bcast = cfg.broadcast_address if cfg.udp_mode == UDP_BROADCAST else None
            self.sink = _UdpSink(cfg.host, bcast)
        self._pending.append(self.sink.start)
        return self.sink.port

    def allocate_state_port(self) -> int:
        sock = _bound_socket(self.server.config.host, socket.SOCK_STREAM)

        async def start():
            self.state_listener = await asyncio.start_server(self._accept_state, sock=sock)

        self._pending.append(start)
        return sock.getsockname()[1]

    async def activate(self):
        pending, self._pending = self._pending, []
        for start in pending:
            await start()

    async def _accept_state(self, reader, writer):
        srv = self.server
        if srv.stopping:
            writer.close()
            return
        writer.write(control.serialize(ControlMessage(Kind.SERVER_STATE_RUNNING)))
        self.state_writers.append(writer)
        srv.state_writers.add(writer)
        log.info("session %d: state connection from %s", self.state.session_id,
                 writer.get_extra_info("peername"))
        interval = srv.config.state_heartbeat_interval
        try:
            await writer.drain()
            while interval is not None and not srv.stopping:
                await asyncio.sleep(interval)
                if srv.stopping:
                    break
                writer.write(control.serialize(ControlMessage(Kind.SERVER_STATE_RUNNING)))
                await writer.drain()
        except (ConnectionError, OSError):
            srv.state_writers.discard(writer)

    def offer_nowait(self, packet) -> bool:
        try:
            self.queue.put_nowait(packet)
            return True
        except asyncio.QueueFull:
            self.dropped += 1
            return False

    def flush(self):
        while not self.queue.empty():
            self.queue.get_nowait()

    async def run_sender(self):
        while True:
            packet = await self.queue.get()
            if not self.state.transmitting or self.sink is None:
                continue
            number = self.state.connection_packet_number + 1
            data = datapacket.encode(dataclasses.replace(packet, connection_packet_number=number))
            if await self.sink.send(data):
                self.state = dataclasses.replace(self.state, connection_packet_number=number)
                self.sent += 1

    async def put(self, packet):
        """Lockstep enqueue: wait for room unless the session stops meanwhile."""
        while self.state.transmitting:
            try:
                await asyncio.wait_for(self.queue.put(packet), timeout=0.1)
                return
            except asyncio.TimeoutError:
                continue

    async def close(self):
        self.state = dataclasses.replace(self.state, transmitting=False)
        self.flush()
        if self.sender is not None:
            self.sender.cancel()
        if self.sink is not None:
            await self.sink.close()
        if self.state_listener is not None:
            self.state_listener.close()
        for w in self.state_writers:
            self.server.state_writers.discard(w)
            w.close()


class TiaServer:
    def __init__(self, config: ServerConfig):
        self.config = config
        self.metainfo_xml = mi.serialize_metainfo(config.metainfo)
        self.sessions: dict[int, _SessionRuntime] = {}
        self.state_writers: set = set()
        self.stopping = False
        self.stopped = False
        self.packets_generated = 0
        self._next_session = 1
        self._server = None
        self._timeline = None
        self._active = None
        self._handlers: set = set()
        self._t0 = None
        self._port = None

    @property
    def port(self) -> int:
        return self._port

    async def start(self):
        loop = asyncio.get_running_loop()
        self._t0 = loop.time()
        self._active = asyncio.Event()
        self._server = await asyncio.start_server(
            self._serve_control, self.config.host, self.config.control_port,
            reuse_address=True,
        )
        self._port = self._server.sockets[0].getsockname()[1]
        self._timeline = asyncio.create_task(self._run_timeline())
        log.info("listening on %s:%d", self.config.host, self.port)

    # -- control connection -------------------------------------------------

    async def _serve_control(self, reader, writer):
        if self.stopping:
            writer.close()
            return
        task = asyncio.current_task()
        self._handlers.add(task)
        sid = self._next_session
        self._next_session += 1
        sess = _SessionRuntime(self, sid, writer)
        sess.sender = asyncio.create_task(sess.run_sender())
        self.sessions[sid] = sess
        log.info("session %d: control connection from %s", sid, writer.get_extra_info("peername"))
        try:
            while not self.stopping:
                try:
                    msg = await control.parse_async(reader)
                except control.ConnectionClosed:
                    break
                except control.ControlMessageError as exc:
                    log.info("session %d: bad message: %s", sid, exc)
                    writer.write(control.serialize(control.error(str(exc))))
                    await writer.drain()
                    if not exc.recoverable:
                        break
                    continue
                reply = await self._dispatch(sess, msg)
                if self.stopping:
                    break
                writer.write(control.serialize(reply))
                await writer.drain()
        except (ConnectionError, OSError):
            pass
        except asyncio.CancelledError:
            pass
        finally:
            self.sessions.pop(sid, None)
            self._update_active()
            await sess.close()
            writer.close()
            self._handlers.discard(task)
            log.info("session %d: closed", sid)

    async def _dispatch(self, sess: _SessionRuntime, msg: ControlMessage) -> ControlMessage:
        sid = sess.state.session_id
        log.info("session %d: %s", sid, msg.command_line)
        reply, new_state = handle_command(
            sess.state,
            msg,
            metainfo_xml=self.metainfo_xml,
            allocate_data_port=sess.allocate_data_port,
            allocate_state_port=sess.allocate_state_port,
        )
        try:
            await sess.activate()
        except OSError as exc:
            return control.error(f"cannot start listener: {exc}")
        was = sess.state.transmitting
        # the sender may have advanced the packet counter meanwhile
        sess.state = dataclasses.replace(
            new_state, connection_packet_number=sess.state.connection_packet_number
        )
        if was and not sess.state.transmitting:
            sess.flush()
        self._update_active()
        log.info("session %d: -> %s", sid, reply.command_line)
        return reply

    def _update_active(self):
        if self._active is None:
            return
        if any(s.transmitting for s in self.sessions.values()):
            self._active.set()
        else:
            self._active.clear()

    # -- timeline -------------------------------------------------------------

    async def _run_timeline(self):
        cfg = self.config
        loop = asyncio.get_running_loop()
        interval = cfg.packet_interval
        tick = 0
        anchor = None
        while True:
            if not self._active.is_set():
                anchor = None
                await self._active.wait()
            if cfg.speed > 0:
                now = loop.time()
                if anchor is None:
                    anchor = (now, tick)
                deadline = anchor[0] + (tick - anchor[1]) * interval / cfg.speed
                if deadline > now:
                    await asyncio.sleep(deadline - now)
                elif now - deadline > 1.0:
                    anchor = (now, tick)  # fell behind, do not burst
            packet = src.generate_tick(cfg.sources, cfg.metainfo, tick,
                                       packet_id=self.packets_generated)
            if cfg.clock == "wall":
                packet = dataclasses.replace(
                    packet, timestamp_micros=round((loop.time() - self._t0) * 1e6)
                )
            self.packets_generated += 1
            tick += 1
            for sess in list(self.sessions.values()):
                if not sess.transmitting:
                    continue
                if cfg.delivery == "lockstep":
                    await sess.put(packet)
                else:
                    sess.offer_nowait(packet)
            if cfg.speed == 0:
                await asyncio.sleep(0)

    # -- shutdown ---------------------------------------------------------------

    async def stop(self):
        """Announce shutdown on state connections, then close everything."""
        if self.stopping:
            return
        self.stopping = True
        log.info("shutting down")
        msg = control.serialize(ControlMessage(Kind.SERVER_STATE_SHUTDOWN))
        for w in list(self.state_writers):
            try:
                w.write(msg)
                await asyncio.wait_for(w.drain(), timeout=1.0)
            except (ConnectionError, OSError, asyncio.TimeoutError):
                pass
        if self.state_writers and self.config.shutdown_grace:
            await asyncio.sleep(self.config.shutdown_grace)

        for sess in self.sessions.values():
            sess.state = dataclasses.replace(sess.state, transmitting=False)
        if self._timeline is not None:
            self._timeline.cancel()
        if self._server is not None:
            self._server.close()
        for sess in list(self.sessions.values()):
            if sess.sink is not None:
                await sess.sink.close()
        for sess in list(self.sessions.values()):
            sess.writer.close()
        for task in list(self._handlers):
            task.cancel()
        if self._handlers:
            await asyncio.gather(*self._handlers, return_exceptions=True)
        for w in list(self.state_writers):
            w.close()
        self.state_writers.clear()
        self.stopped = True
        log.info("stopped")


class ServerHandle:
    """A :class:`TiaServer` running on its own event-loop thread."""

    def __init__(self, config: ServerConfig):
        self.config = config
        self.server = TiaServer(config)
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._run, name="tia-server", daemon=True)
        self._started = threading.Event()
        self._error = None
        self._lock = threading.Lock()
        self._down = False

    def _run(self):
        asyncio.set_event_loop(self._loop)
        try:
            self._loop.run_until_complete(self.server.start())
        except BaseException as exc:  # surfaced to the starting thread
            self._error = exc
            self._started.set()
            return
        self._started.set()
        self._loop.run_forever()
        pending = asyncio.all_tasks(self._loop)
        for t in pending:
            t.cancel()
        self._loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
        self._loop.close()

    def start(self) -> "ServerHandle":
        self._thread.start()
        self._started.wait()
        if self._error is not None:
            self._thread.join()
            raise self._error
        return self

    @property
    def port(self) -> int:
        return self.server.port

    @property
    def address(self) -> tuple[str, int]:
        return (self.config.host, self.port)

    def call(self, fn, *args):
        """Run ``fn(*args)`` on the server loop and return its result."""
        async def wrapper():
            return fn(*args)
        return asyncio.run_coroutine_threadsafe(wrapper(), self._loop).result()

    def shutdown(self, timeout: float = 10.0):
        with self._lock:
            if self._down:
                return
            self._down = True
        fut = asyncio.run_coroutine_threadsafe(self.server.stop(), self._loop)
        try:
            fut.result(timeout)
        finally:
            self._loop.call_soon_threadsafe(self._loop.stop)
            self._thread.join(timeout)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def run(config: ServerConfig) -> ServerHandle:
    """Start a server in a background thread; raises ``OSError`` on bind failure."""
    return ServerHandle(config).start()


def shutdown(handle: ServerHandle) -> None:
    handle.shutdown()
