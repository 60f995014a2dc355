import random
import socket
import threading

import pytest
from hypothesis import given, settings, strategies as st

from oracles import missing_numbers
from tia import client, control, datapacket as dp
from tia.client import GapReport, GapTracker, gap_report
from tia.control import ControlMessage, Kind


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class OneShotServer:
    """Accept one TCP connection, optionally read, send canned bytes, close."""

    def __init__(self, payload=b"", read_first=False):
        self.sock = socket.socket()
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen(1)
        self.port = self.sock.getsockname()[1]
        self.received = b""
        self.payload = payload
        self.read_first = read_first
        self.thread = threading.Thread(target=self._run, daemon=True)
        self.thread.start()

    def _run(self):
        conn, _ = self.sock.accept()
        with conn:
            conn.settimeout(1.0)
            if self.read_first:
                while not self.received.endswith(b"\n\n"):
                    chunk = conn.recv(4096)
                    if not chunk:
                        break
                    self.received += chunk
            conn.sendall(self.payload)
            try:
                conn.shutdown(socket.SHUT_WR)
                self.received += conn.recv(4096)
            except OSError:
                pass
        self.sock.close()


# -- connect / commands -------------------------------------------------------------

def test_connect_closed_port():
    with pytest.raises(OSError):
        client.connect("127.0.0.1", free_port(), timeout=1.0)


def test_full_command_sequence(running_server, reference_metainfo):
    with client.connect(*running_server.address) as c:
        c.check_protocol_version()
        assert c.get_metainfo() == reference_metainfo
        port = c.get_data_connection("tcp")
        assert c.data_port == port and c.data_transport == "TCP"
        c.start()
        packets = [c.receive_packet(timeout=2.0) for _ in range(3)]
        c.stop()
    assert [p.connection_packet_number for p in packets] == [1, 2, 3]
    assert c.last_connection_packet_number == 3


def test_packets_match_metainfo_dimensions(running_server):
    with client.connect(*running_server.address) as c:
        info = c.get_metainfo()
        c.get_data_connection("TCP")
        c.start()
        packet = c.receive_packet()
    dims = {s.signal_type: (s.num_channels, s.block_size) for s in info.signals}
    assert {b.signal: (b.num_channels, b.block_size) for b in packet.blocks} == dims


def test_start_before_data_connection(running_server):
    with client.connect(*running_server.address) as c:
        with pytest.raises(client.ServerError) as info:
            c.start()
    assert info.value.command is Kind.START_DATA_TRANSMISSION
    assert info.value.description
    assert "GetDataConnection" in str(info.value)


def test_one_data_connection_per_client(running_server):
    with client.connect(*running_server.address) as c:
        c.get_data_connection("TCP")
        with pytest.raises(client.ClientError):
            c.get_data_connection("UDP")


def test_reply_of_wrong_kind_is_a_protocol_violation():
    srv = OneShotServer(control.serialize(control.data_connection_port(1234)), read_first=True)
    with client.connect("127.0.0.1", srv.port) as c:
        with pytest.raises(client.ProtocolViolation):
            c.check_protocol_version()
    srv.thread.join(2)
    assert srv.received == control.serialize(ControlMessage(Kind.CHECK_PROTOCOL_VERSION))


def test_error_reply_without_description():
    srv = OneShotServer(control.serialize(control.error()), read_first=True)
    with client.connect("127.0.0.1", srv.port) as c:
        with pytest.raises(client.ServerError) as info:
            c.check_protocol_version()
    assert info.value.description is None


def test_server_hangs_up():
    srv = OneShotServer(b"", read_first=True)
    with client.connect("127.0.0.1", srv.port) as c:
        with pytest.raises(client.EndOfStream):
            c.get_metainfo()


# -- receive --------------------------------------------------------------------------

def test_receive_truncated_tcp_stream():
    data = dp.encode(dp.DataPacket(connection_packet_number=1))
    srv = OneShotServer(data + data[:20])
    with client.connect("127.0.0.1", srv.port) as c:
        c.data_sock, c.data_transport = c.sock, "TCP"
        assert c.receive_packet().connection_packet_number == 1
        with pytest.raises(client.EndOfStream):
            c.receive_packet()
        with pytest.raises(EOFError):
            c.receive_packet()


def test_receive_bad_packet_propagates_decode_error():
    srv = OneShotServer(bytes([10]) + bytes(40))
    with client.connect("127.0.0.1", srv.port) as c:
        c.data_sock, c.data_transport = c.sock, "TCP"
        with pytest.raises(dp.BadVersionError):
            c.receive_packet()


def test_receive_udp_empty_packet():
    hello = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    hello.bind(("127.0.0.1", 0))
    srv = OneShotServer()
    with client.connect("127.0.0.1", srv.port) as c:
        c.open_data_connection("UDP", hello.getsockname()[1], host="127.0.0.1")
        data, addr = hello.recvfrom(100)
        assert data == b""
        hello.sendto(dp.encode(dp.DataPacket()), addr)
        assert c.receive_packet(timeout=2.0) == dp.DataPacket()
    hello.close()


def test_receive_without_data_connection():
    srv = OneShotServer()
    with client.connect("127.0.0.1", srv.port) as c:
        with pytest.raises(client.ClientError):
            c.receive_packet()


# -- state connection -------------------------------------------------------------------

def test_listen_state_stream():
    wire = (control.serialize(ControlMessage(Kind.SERVER_STATE_RUNNING))
            + control.serialize(ControlMessage(Kind.SERVER_STATE_SHUTDOWN)))
    srv = OneShotServer(wire)
    events = list(client.listen_state("127.0.0.1", srv.port, timeout=2.0))
    srv.thread.join(2)
    assert events == [client.StateEvent.RUNNING, client.StateEvent.SHUTDOWN]
    assert srv.received == b""  # the client never writes


def test_listen_state_malformed():
    srv = OneShotServer(control.serialize(ControlMessage(Kind.SERVER_STATE_RUNNING)) + b"TiA 1.0\nGarbage\n\n")
    events = client.listen_state("127.0.0.1", srv.port, timeout=2.0)
    assert next(events) is client.StateEvent.RUNNING
    with pytest.raises(control.UnknownCommandError):
        next(events)
    with pytest.raises(StopIteration):
        next(events)


def test_listen_state_rejects_non_state_message():
    srv = OneShotServer(control.serialize(control.ok()))
    with pytest.raises(client.ProtocolViolation):
        list(client.listen_state("127.0.0.1", srv.port, timeout=2.0))


def test_listen_state_against_server_shutdown(reference_config):
    from tia import server
    handle = server.run(reference_config)
    c = client.connect(*handle.address)
    events = client.listen_state(handle.config.host, c.get_state_connection(), timeout=5.0)
    assert next(events) is client.StateEvent.RUNNING
    handle.shutdown()
    assert list(events) == [client.StateEvent.SHUTDOWN]
    c.close()


# -- gap_report -----------------------------------------------------------------------------

@pytest.mark.parametrize("observed, expected", [
    ([1, 2, 3, 4, 5], GapReport(5, 5, ())),
    ([1, 2, 5, 6], GapReport(6, 4, ((3, 4),))),
    ([2, 1, 3], GapReport(3, 3, ())),
    ([1, 1, 2, 2, 4], GapReport(4, 3, ((3, 3),))),
    ([], GapReport(0, 0, ())),
    ([7], GapReport(1, 1, ())),
])
def test_gap_report_examples(observed, expected):
    assert gap_report(observed) == expected


def test_gap_report_bounds():
    assert gap_report([2, 3], first=1, last=5) == GapReport(5, 2, ((1, 1), (4, 5)))
    assert gap_report([], first=1, last=3).missing_count == 3
    with pytest.raises(ValueError):
        gap_report([0, 1], first=1)
    with pytest.raises(ValueError):
        gap_report([-1])
    with pytest.raises(ValueError):
        gap_report([2**64])


def test_gap_report_text():
    assert str(gap_report([1, 2, 5, 6, 8])) == "expected 8, received 5, 2 gaps, 3 missing (3-4, 7)"
    assert str(gap_report([1, 2])) == "expected 2, received 2, 0 gaps, 0 missing"


@given(st.lists(st.integers(0, 300), min_size=1))
def test_gap_report_matches_oracle(observed):
    r = gap_report(observed)
    lo, hi = min(observed), max(observed)
    missing = [n for a, b in r.gaps for n in range(a, b + 1)]
    assert missing == missing_numbers(observed, lo, hi)
    assert r.missing_count == r.expected_count - r.received_count


# -- GapTracker ----------------------------------------------------------------------------

def test_tracker_in_order_with_loss():
    t = GapTracker(window=4)
    lost = []
    for n in [1, 2, 3, 6, 7, 8, 9, 10]:
        lost += t.add(n)
    # holes are declared as the window slides past them, then merged
    assert lost == [(4, 4), (5, 5)]
    assert t.lost == ((4, 5),)
    assert t.report() == GapReport(10, 8, ((4, 5),))


def test_tracker_reorder_within_window_is_not_loss():
    t = GapTracker(window=16)
    for n in [1, 3, 2, 5, 4, 6]:
        assert t.add(n) == []
    assert t.report() == GapReport(6, 6, ())


def test_tracker_late_arrival_recovers():
    t = GapTracker(window=2)
    for n in [1, 2, 4, 5, 6]:
        t.add(n)
    assert t.lost == ((3, 3),)
    t.add(3)
    assert t.lost == ()
    assert t.late == 1
    assert t.report() == GapReport(6, 6, ())


def test_tracker_duplicates():
    t = GapTracker()
    for n in [1, 2, 2, 3, 1]:
        t.add(n)
    assert t.duplicates == 2
    assert t.report().received_count == 3


def test_tracker_first_and_last_bounds():
    t = GapTracker(first=1)
    for n in [3, 4]:
        t.add(n)
    assert t.report(last=6) == GapReport(6, 2, ((1, 2), (5, 6)))
    assert GapTracker(first=1).report(last=3) == GapReport(3, 0, ((1, 3),))


def test_tracker_rejects_bad_window():
    with pytest.raises(ValueError):
        GapTracker(window=0)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 200), st.floats(0, 0.5), st.integers(0, 6), st.integers(0, 2**32))
def test_tracker_matches_oracle(n, loss, jitter, seed):
    rng = random.Random(seed)
    kept = [k for k in range(1, n + 1) if rng.random() >= loss or k in (1, n)]
    # bounded reordering: each number moves at most ``jitter`` places, well inside the window
    order = sorted(kept, key=lambda k: k + rng.uniform(0, jitter))
    t = GapTracker(window=16)
    declared = []
    for k in order:
        declared += t.add(k)
    report = t.report()
    assert report == gap_report(kept)
    missing = [m for a, b in report.gaps for m in range(a, b + 1)]
    assert missing == missing_numbers(kept, 1, n)
    # nothing is declared lost that later arrived
    assert not any(a <= k <= b for a, b in declared for k in kept)
