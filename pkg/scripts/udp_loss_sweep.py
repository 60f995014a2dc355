"""Measure UDP gap accounting under random datagram loss.

A relay between server and client drops each datagram with a given
probability; the client's gap report is compared with what the relay
actually dropped.

    python3 scripts/udp_loss_sweep.py --packets 200 --loss 0 0.05 0.2 0.5
"""
import argparse
import dataclasses
import random
import socket
import threading

from tia import client, server


class RandomLossRelay:
    def __init__(self, server_addr, loss, seed):
        self.server_addr = server_addr
        self.loss = loss
        self.rng = random.Random(seed)
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(("127.0.0.1", 0))
        self.sock.settimeout(0.1)
        self.port = self.sock.getsockname()[1]
        self.peer = None
        self.dropped = set()
        self.running = True
        self.thread = threading.Thread(target=self.run, daemon=True)
        self.thread.start()

    def run(self):
        while self.running:
            try:
                data, addr = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            if addr != self.server_addr:
                self.peer = addr
                self.sock.sendto(data, self.server_addr)
            elif self.rng.random() < self.loss:
                # connection packet number lives at bytes 17..24
                self.dropped.add(int.from_bytes(data[17:25], "little"))
            elif self.peer is not None:
                self.sock.sendto(data, self.peer)

    def close(self):
        self.running = False
        self.thread.join()
        self.sock.close()


def trial(config, packets, loss, seed):
    with server.run(config) as handle, client.connect(*handle.address) as conn:
        port = conn.get_data_connection("UDP", open=False)
        relay = RandomLossRelay((config.host, port), loss, seed)
        try:
            conn.open_data_connection("UDP", relay.port, host="127.0.0.1")
            conn.start()
            tracker = client.GapTracker(first=1)
            while True:
                try:
                    n = conn.receive_packet(timeout=1.0).connection_packet_number
                except socket.timeout:
                    break
                if n > packets:
                    break
                tracker.add(n)
            conn.stop()
        finally:
            relay.close()
    report = tracker.report(last=packets)
    truth = {n for n in relay.dropped if n <= packets}
    return report, len(truth)


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default="configs/example.json")
    p.add_argument("--packets", type=int, default=200)
    p.add_argument("--loss", type=float, nargs="+", default=[0.0, 0.05, 0.2, 0.5])
    p.add_argument("--speed", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=1)
    args = p.parse_args()

    config = dataclasses.replace(server.load_config(args.config), control_port=0, speed=args.speed)
    print(f"{'loss':>6} {'dropped':>8} {'reported':>9} {'gaps':>5}  match")
    for loss in args.loss:
        report, dropped = trial(config, args.packets, loss, args.seed)
        print(f"{loss:>6.2f} {dropped:>8} {report.missing_count:>9} {len(report.gaps):>5}  "
              f"{'yes' if dropped == report.missing_count else 'NO'}")


if __name__ == "__main__":
    main()
