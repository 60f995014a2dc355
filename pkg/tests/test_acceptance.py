"""Acceptance criteria, one test each.

Every test prints a single ``AC<n> PASS|FAIL`` line with its runtime and
fails if the runtime bound is exceeded.
"""
import contextlib
import csv
import random
import socket
import struct
import time

import pytest
from hypothesis import given, settings

from netutil import LossyUdpShim, ShutdownObserver
from oracles import assemble
from test_metainfo import metainfos
from tia import cli, client, control, datapacket as dp, metainfo as mi, server, signals, sources
from tia.control import ControlMessage, Kind
from tia.datapacket import DataPacket, SignalBlock

ERROR_XML = b'<tiaError version="1.0" description="Human readable error description."/>'


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def run(number, title, limit):
        start = time.perf_counter()
        outcome = "FAIL"
        detail = ""
        try:
            yield
            elapsed = time.perf_counter() - start
            if elapsed >= limit:
                detail = f" (runtime bound {limit:g} s exceeded)"
                raise AssertionError(f"AC{number} took {elapsed:.2f} s, bound is {limit:g} s")
            outcome = "PASS"
        except BaseException as exc:
            if not detail:
                detail = f" ({type(exc).__name__}: {exc})".splitlines()[0]
            raise
        finally:
            elapsed = time.perf_counter() - start
            with capsys.disabled():
                print(f"\nAC{number} {outcome} {title} [{elapsed:.2f} s < {limit:g} s]{detail}")
    return run


def test_ac1_control_golden_bytes(criterion):
    with criterion(1, "control-plane golden bytes", 1.0):
        cases = [
            (ControlMessage(Kind.CHECK_PROTOCOL_VERSION), b"TiA 1.0\nCheckProtocolVersion\n\n"),
            (ControlMessage(Kind.OK), b"TiA 1.0\nOK\n\n"),
            (control.error("Human readable error description."),
             b"TiA 1.0\nError\nContent-Length: 73\n\n" + ERROR_XML),
            (ControlMessage(Kind.GET_METAINFO), b"TiA 1.0\nGetMetaInfo\n\n"),
            (control.get_data_connection("TCP"), b"TiA 1.0\nGetDataConnection: TCP\n\n"),
            (control.get_data_connection("UDP"), b"TiA 1.0\nGetDataConnection: UDP\n\n"),
            (ControlMessage(Kind.START_DATA_TRANSMISSION), b"TiA 1.0\nStartDataTransmission\n\n"),
            (ControlMessage(Kind.STOP_DATA_TRANSMISSION), b"TiA 1.0\nStopDataTransmission\n\n"),
            (ControlMessage(Kind.GET_SERVER_STATE_CONNECTION), b"TiA 1.0\nGetServerStateConnection\n\n"),
            (ControlMessage(Kind.SERVER_STATE_RUNNING), b"TiA 1.0\nServerStateRunning\n\n"),
            (ControlMessage(Kind.SERVER_STATE_SHUTDOWN), b"TiA 1.0\nServerStateShutdown\n\n"),
        ]
        assert len(ERROR_XML) == 73
        for msg, wire in cases:
            assert control.serialize(msg) == wire, msg.kind
            assert control.parse_bytes(wire) == msg


def test_ac2_data_golden_bytes(criterion):
    with criterion(2, "data-plane golden bytes", 1.0):
        empty = dp.encode(DataPacket())
        assert len(empty) == 33
        assert empty[0] == 0x03
        assert empty[1:5] == (33).to_bytes(4, "little")
        eeg = [float(i) for i in range(30)]
        bp = [float(-i) for i in range(25)]
        eeg_t, bp_t = signals.signal_type("eeg"), signals.signal_type("bp")
        data = dp.encode(DataPacket(blocks=(SignalBlock(eeg_t, 3, 10, eeg), SignalBlock(bp_t, 5, 5, bp))))
        assert len(data) == 261
        assert data == assemble([("eeg", 3, 10, eeg), ("bp", 5, 5, bp)])
        offset = 33 + 4 * 2
        assert offset == 41
        assert struct.unpack_from("<30f", data, offset) == tuple(eeg)
        assert struct.unpack_from("<25f", data, offset + 120) == tuple(bp)


def _random_packet(rng):
    types = sorted(rng.sample(signals.SIGNAL_TYPES, rng.randint(0, 6)))
    blocks = []
    for t in types:
        ch, bs = rng.randint(0, 16), rng.randint(0, 32)
        raw = [rng.getrandbits(32) for _ in range(ch * bs)]
        # any finite float32 bit pattern; NaNs would break equality, not the codec
        samples = [struct.unpack("<f", struct.pack("<I", r if (r >> 23) & 0xFF != 0xFF else r & ~(1 << 30)))[0]
                   for r in raw]
        blocks.append(SignalBlock(t, ch, bs, samples))
    u64 = lambda: rng.getrandbits(64)  # noqa: E731
    return DataPacket(u64(), u64(), u64(), tuple(blocks))


def _fuzz_buffer(rng, valid):
    kind = rng.random()
    if kind < 0.4:
        return rng.randbytes(rng.randint(0, 4096))
    data = bytearray(dp.encode(valid))[:4096]
    if kind < 0.7:
        for _ in range(rng.randint(1, 8)):
            data[rng.randrange(len(data))] = rng.getrandbits(8)
    elif kind < 0.85:
        data = data[:rng.randint(0, len(data))]
    else:
        data += rng.randbytes(rng.randint(1, 64))
    return bytes(data[:4096])


def test_ac3_codec_properties(criterion):
    with criterion(3, "codec round trip x1000, decode fuzz x10000", 30.0):
        rng = random.Random(20240601)
        round_trips = 0
        for _ in range(1000):
            packet = _random_packet(rng)
            data = dp.encode(packet)
            assert dp.decode(data) == packet
            assert dp.encode(dp.decode(data)) == data
            round_trips += 1
        fuzzed = rejected = 0
        valid = _random_packet(rng)
        for i in range(10000):
            if i % 100 == 0:
                valid = _random_packet(rng)
            buf = _fuzz_buffer(rng, valid)
            assert len(buf) <= 4096
            try:
                dp.decode(buf)
            except dp.PacketError:
                rejected += 1
            fuzzed += 1
        assert round_trips >= 1000
        assert fuzzed >= 10000
        assert 0 < rejected < fuzzed


def test_ac4_metainfo_conformance(criterion, reference_xml, reference_metainfo):
    with criterion(4, "reference metainfo parse and randomized round trip", 5.0):
        with pytest.warns(mi.MetaInfoAliasWarning):
            info = mi.parse_metainfo(reference_xml)
        assert info == reference_metainfo
        assert info.subject.id == "WE2"
        assert (info.master_signal.sampling_rate, info.master_signal.block_size) == (100, 10)
        eeg, bp = info.signals
        assert [c.label for c in eeg.channels] == ["Cz", "C1", "C2"]
        assert bp.num_channels == 5 and len(bp.channels) == 2

        count = 0

        @settings(max_examples=200, deadline=None, database=None)
        @given(metainfos())
        def round_trip(model):
            nonlocal count
            count += 1
            assert mi.parse_metainfo(mi.serialize_metainfo(model)) == model

        round_trip()
        assert count >= 100


def test_ac5_tcp_end_to_end(criterion, reference_config, tmp_path, monkeypatch):
    with criterion(5, "TCP end to end, 50 packets at 10 packets/s", 10.0):
        # deterministic tick clock at the configured real-time rate
        handle = server.run(server.ServerConfig(reference_config.metainfo, reference_config.sources,
                                                control_port=0, clock="tick", speed=1.0))
        seen = []
        original = client.ClientConnection.receive_packet

        def spy(self, timeout=None):
            packet = original(self, timeout)
            seen.append(packet)
            return packet

        monkeypatch.setattr(client.ClientConnection, "receive_packet", spy)
        out = tmp_path / "rec.csv"
        try:
            rc = cli.client_main(["--host", "127.0.0.1", "--port", str(handle.port), "--transport", "tcp",
                                  "--packets", "50", "--out", str(out)])
        finally:
            handle.shutdown()
        assert rc == 0
        assert [p.connection_packet_number for p in seen] == list(range(1, 51))
        assert all(p.flags == 0x21 for p in seen)
        for p in seen:
            eeg, bp = p.blocks
            assert len(eeg.samples) == 30 and len(bp.samples) == 25
        stamps = [p.timestamp_micros for p in seen]
        assert all(b - a == 100_000 for a, b in zip(stamps, stamps[1:]))
        with open(out, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == list(cli.CSV_COLUMNS)
        assert len(rows) - 1 == 2750


def test_ac6_udp_with_loss(criterion, reference_config):
    with criterion(6, "UDP end to end, every 5th datagram dropped", 10.0):
        handle = server.run(server.ServerConfig(reference_config.metainfo, reference_config.sources,
                                                control_port=0, speed=1.0))
        shim = None
        try:
            with client.connect(*handle.address) as c:
                port = c.get_data_connection("UDP", open=False)
                shim = LossyUdpShim((handle.config.host, port), drop_every=5)
                c.open_data_connection("UDP", shim.port, host="127.0.0.1")
                c.start()
                tracker = client.GapTracker(first=1)
                observed = []
                while True:
                    n = c.receive_packet(timeout=2.0).connection_packet_number
                    if n > 50:
                        break
                    observed.append(n)
                    tracker.add(n)
                c.stop()
        finally:
            handle.shutdown()
            if shim is not None:
                shim.close()
        report = client.gap_report(observed, first=1, last=50)
        assert report.missing_count == 10
        assert report.gaps == tuple((k, k) for k in range(5, 51, 5))
        assert tracker.report(last=50) == report


def test_ac7_aperiodic_button(criterion, reference_metainfo, reference_sources):
    with criterion(7, "button changes at ticks 3 and 9 give 2 of 20 packets", 5.0):
        info = mi.MetaInfo(master_signal=reference_metainfo.master_signal,
                           signals=reference_metainfo.signals + (mi.SignalInfo("button", 0.0, 1, 1),))
        srcs = reference_sources + (sources.SourceSpec("button", change_schedule=[(3, (1.0,)), (9, (0.0,))]),)
        button = signals.flag_of("button")
        packets = [sources.generate_tick(srcs, info, t) for t in range(20)]
        with_button = [i for i, p in enumerate(packets) if p.flags & button]
        assert with_button == [3, 9]
        # the same holds on the wire
        handle = server.run(server.ServerConfig(info, srcs, control_port=0, speed=0.0))
        try:
            with client.connect(*handle.address) as c:
                c.get_data_connection("TCP")
                c.start()
                wire = [c.receive_packet() for _ in range(20)]
        finally:
            handle.shutdown()
        assert sum(1 for p in wire if p.flags & button) == 2


def test_ac8_shutdown_ordering(criterion, reference_config):
    with criterion(8, "ServerStateShutdown precedes every socket close", 5.0):
        handle = server.run(reference_config)
        c = client.connect(*handle.address)
        c.get_data_connection("TCP")
        state_port = c.get_state_connection()
        c.start()
        c.receive_packet()
        state = socket.create_connection((handle.config.host, state_port), timeout=2.0)
        deadline = time.monotonic() + 2.0
        while not handle.server.state_writers and time.monotonic() < deadline:
            time.sleep(0.01)
        observer = ShutdownObserver(state, c.sock, c.data_sock).start()
        handle.shutdown()
        events = observer.join()
        state.close()
        c.close()
        assert "ServerStateShutdown" in events, events
        first_close = min(i for i, e in enumerate(events) if e.endswith("closed"))
        assert events.index("ServerStateShutdown") < first_close, events
        assert {e for e in events if e.endswith("closed")} == {"state closed", "control closed", "data closed"}


def test_ac9_version_guard(criterion):
    with criterion(9, "version byte 10 is rejected as reserved", 1.0):
        rng = random.Random(10)
        buffers = [b"\x0a", bytes([10]) + bytes(32),
                   bytes([10]) + dp.encode(DataPacket())[1:],
                   bytes([10]) + dp.encode(DataPacket(blocks=(SignalBlock(signals.signal_type("eeg"), 1, 1, [1.0]),)))[1:]]
        buffers += [bytes([10]) + rng.randbytes(rng.randint(0, 300)) for _ in range(100)]
        for buf in buffers:
            with pytest.raises(dp.BadVersionError, match="version 10 is reserved"):
                dp.decode(buf)
            with pytest.raises(dp.BadVersionError, match="version 10 is reserved"):
                dp.decode(buf, lenient=True)
