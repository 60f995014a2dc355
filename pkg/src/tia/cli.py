"""Console entry points wrapping the server, client and packet decoder."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import heapq
import logging
import os
import signal
import socket
import struct
import sys
import threading
from pathlib import Path

from . import client as tc, datapacket
from .datapacket import DataPacket
from .server import ConfigError, load_config, run

CSV_COLUMNS = (
    "packet_id",
    "connection_packet_number",
    "timestamp_micros",
    "signal",
    "channel",
    "sample_index",
    "value",
)


def _setup_logging(default: str = "WARNING") -> None:
    level = os.environ.get("TIA_LOG", default).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def format_float32(value: float) -> str:
    """Shortest decimal that reads back as the same float32."""
    if value != value or value in (float("inf"), float("-inf")):
        return repr(value)
    target = struct.pack("<f", value)
    for digits in range(1, 10):
        shortest = float(f"{value:.{digits}g}")
        try:
            if struct.pack("<f", shortest) == target:
                break
        except OverflowError:  # rounded past the float32 maximum
            continue
    # repr avoids the exponent form of "g" for ordinary magnitudes
    text = repr(shortest)
    return text[:-2] if text.endswith(".0") else text


def recording_rows(packet: DataPacket):
    """One row per sample, ordered by signal flag, channel, sample index."""
    for block in packet.blocks:
        for ch in range(block.num_channels):
            for k, value in enumerate(block.channel(ch)):
                yield (
                    packet.packet_id,
                    packet.connection_packet_number,
                    packet.timestamp_micros,
                    block.signal.identifier,
                    ch + 1,
                    k,
                    format_float32(value),
                )


# -- tia-server --------------------------------------------------------------------

def server_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="tia-server", description="Run a signal-simulating TiA server.")
    p.add_argument("--config", required=True, help="JSON server configuration")
    p.add_argument("--port", type=int, help="control port (overrides the config)")
    p.add_argument("--host", help="bind address (overrides the config)")
    args = p.parse_args(argv)
    _setup_logging("INFO")
    log = logging.getLogger("tia.cli")

    try:
        config = load_config(args.config)
        overrides = {}
        if args.port is not None:
            overrides["control_port"] = args.port
        if args.host is not None:
            overrides["host"] = args.host
        if overrides:
            config = dataclasses.replace(config, **overrides)
        handle = run(config)
    except (ConfigError, OSError) as exc:
        print(f"tia-server: {exc}", file=sys.stderr)
        return 1

    stop = threading.Event()

    def on_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, on_signal)
    signal.signal(signal.SIGTERM, on_signal)
    log.info("serving on %s:%d", config.host, handle.port)
    print(f"tia-server listening on {config.host}:{handle.port}", flush=True)
    while not stop.wait(0.2):
        pass
    handle.shutdown()
    return 0


# -- tia-client --------------------------------------------------------------------

class _Reorder:
    """Releases packets in connection-number order once the window has passed."""

    def __init__(self, window: int):
        self.window = window
        self.heap = []

    def push(self, packet):
        heapq.heappush(self.heap, (packet.connection_packet_number, id(packet), packet))
        top = max(n for n, _, _ in self.heap)
        while self.heap and self.heap[0][0] <= top - self.window:
            yield heapq.heappop(self.heap)[2]

    def drain(self):
        while self.heap:
            yield heapq.heappop(self.heap)[2]


def client_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="tia-client", description="Record data from a TiA server to CSV.")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=9000)
    p.add_argument("--transport", choices=("tcp", "udp"), default="tcp")
    p.add_argument("--packets", type=int, default=100, help="number of packets to record")
    p.add_argument("--out", default="-", help="CSV output path, '-' for stdout")
    p.add_argument("--print-metainfo", action="store_true", help="print the metainfo XML and exit")
    p.add_argument("--timeout", type=float, default=5.0, help="command and receive timeout in seconds")
    args = p.parse_args(argv)
    _setup_logging()

    try:
        conn = tc.connect(args.host, args.port, timeout=args.timeout)
    except OSError as exc:
        print(f"tia-client: cannot connect to {args.host}:{args.port}: {exc}", file=sys.stderr)
        return 1

    try:
        with conn:
            conn.check_protocol_version()
            if args.print_metainfo:
                sys.stdout.write(conn.get_metainfo_xml().decode("utf-8") + "\n")
                return 0
            conn.get_metainfo()
            conn.get_data_connection(args.transport.upper())
            return _record(conn, args)
    except tc.ServerError as exc:
        print(f"tia-client: server error: {exc.description or 'no description'}", file=sys.stderr)
        return 1
    except (tc.ClientError, OSError, ValueError) as exc:
        print(f"tia-client: {exc}", file=sys.stderr)
        return 1


def _record(conn: tc.ClientConnection, args) -> int:
    udp = args.transport == "udp"
    out = sys.stdout if args.out == "-" else open(args.out, "w", newline="", encoding="utf-8")
    tracker = tc.GapTracker()
    reorder = _Reorder(tc.REORDER_WINDOW if udp else 0)
    received = 0
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        conn.start()
        while received < args.packets:
            try:
                packet = conn.receive_packet(timeout=args.timeout)
            except socket.timeout:
                if udp:
                    break  # remaining datagrams were lost
                raise
            received += 1
            if udp:
                tracker.add(packet.connection_packet_number)
            for ready in reorder.push(packet):
                writer.writerows(recording_rows(ready))
        for ready in reorder.drain():
            writer.writerows(recording_rows(ready))
        conn.stop()
    finally:
        if out is not sys.stdout:
            out.close()
    if udp:
        print(f"gap report: {tracker.report()}", file=sys.stderr)
    return 0


# -- tia-inspect -------------------------------------------------------------------

def _read_input(source: str, force_hex: bool) -> bytes:
    if source == "-":
        raw = sys.stdin.buffer.read()
        if force_hex:
            return bytes.fromhex(raw.decode("ascii"))
        return raw
    path = Path(source)
    if not force_hex and path.is_file():
        return path.read_bytes()
    return bytes.fromhex("".join(source.split()))


def inspect_report(data: bytes) -> str:
    """Human-readable dump of one packet; raises on decode failure."""
    packet = datapacket.decode(data)
    header = packet.header
    nos = len(packet.blocks)
    lines = [
        f"version                  {header.version}",
        f"packet size              {header.packet_size}",
        f"signal type flags        0x{header.flags:08x}",
        f"packet id                {header.packet_id}",
        f"connection packet number {header.connection_packet_number}",
        f"time stamp (us)          {header.timestamp_micros}",
        f"number of signals        {nos}",
        f"data offset              {datapacket.FIXED_HEADER_SIZE + 4 * nos}",
    ]
    for block in packet.blocks:
        lines.append(
            f"signal {block.signal.identifier} (0x{block.signal.flag:08x}): "
            f"{block.num_channels} channels x {block.block_size} samples"
        )
        for ch in range(block.num_channels):
            values = " ".join(format_float32(v) for v in block.channel(ch))
            lines.append(f"  ch {ch + 1}: {values}")
    return "\n".join(lines) + "\n"


def inspect_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="tia-inspect", description="Decode and print one TiA data packet.")
    p.add_argument("source", help="packet file, hex string, or '-' for stdin")
    p.add_argument("--hex", action="store_true", help="treat the source as hex even if a file exists")
    args = p.parse_args(argv)
    try:
        data = _read_input(args.source, args.hex)
    except (OSError, ValueError) as exc:
        print(f"tia-inspect: cannot read input: {exc}", file=sys.stderr)
        return 2
    try:
        report = inspect_report(data)
    except datapacket.PacketError as exc:
        print(f"tia-inspect: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(report)
    return 0

