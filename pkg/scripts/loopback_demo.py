"""Start a server from a JSON config, record packets with the client library, summarize.

    python3 scripts/loopback_demo.py --config configs/example.json --packets 30 --speed 5
"""
import argparse
import dataclasses
import statistics
import time

from tia import client, server


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default="configs/example.json")
    p.add_argument("--packets", type=int, default=30)
    p.add_argument("--transport", choices=("TCP", "UDP"), default="TCP")
    p.add_argument("--speed", type=float, default=1.0, help="pacing factor, 0 for unpaced")
    args = p.parse_args()

    config = dataclasses.replace(server.load_config(args.config), control_port=0, speed=args.speed)
    with server.run(config) as handle, client.connect(*handle.address) as conn:
        conn.check_protocol_version()
        info = conn.get_metainfo()
        print(f"server on port {handle.port}; signals: "
              + ", ".join(f"{s.signal_type.identifier} {s.num_channels}x{s.block_size}" for s in info.signals))
        conn.get_data_connection(args.transport)
        conn.start()
        t0 = time.perf_counter()
        arrivals, packets = [], []
        for _ in range(args.packets):
            packets.append(conn.receive_packet())
            arrivals.append(time.perf_counter() - t0)
        conn.stop()

    numbers = [p.connection_packet_number for p in packets]
    gaps = [b - a for a, b in zip(arrivals, arrivals[1:])]
    print(f"received {len(packets)} packets, connection numbers {numbers[0]}..{numbers[-1]}")
    print(f"gap report: {client.gap_report(numbers)}")
    print(f"packet size {packets[0].packet_size} bytes, flags 0x{packets[0].flags:08x}")
    print(f"timestamps {packets[0].timestamp_micros}..{packets[-1].timestamp_micros} us")
    if gaps:
        print(f"inter-arrival mean {statistics.mean(gaps) * 1e3:.1f} ms "
              f"(nominal {config.packet_interval / args.speed * 1e3 if args.speed else 0:.1f} ms)")


if __name__ == "__main__":
    main()
