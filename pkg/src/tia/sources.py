"""Synthetic signal sources and per-tick packet generation.

One tick is one master block interval and produces one packet. Periodic
signals contribute a full block every tick; aperiodic signals contribute a
single-sample block only on ticks where their value changes.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from . import signals
from .datapacket import DataPacket, SignalBlock
from .metainfo import MetaInfo, MetaInfoError
from .signals import SignalType


class SourceError(ValueError):
    pass


@dataclass(frozen=True)
class Sine:
    frequency_hz: float = 1.0
    amplitude: float = 1.0

    def sample(self, channel: int, n: int, sampling_rate: float) -> float:
        return self.amplitude * math.sin(2.0 * math.pi * self.frequency_hz * n / sampling_rate)


@dataclass(frozen=True)
class Constant:
    value: float = 0.0

    def sample(self, channel: int, n: int, sampling_rate: float) -> float:
        return self.value


@dataclass(frozen=True)
class Ramp:
    step: float = 1.0

    def sample(self, channel: int, n: int, sampling_rate: float) -> float:
        return self.step * n


@dataclass(frozen=True)
class Random:
    seed: int = 0

    def block(self, signal: SignalType, tick: int, count: int) -> list[float]:
        # string seeds hash deterministically across processes
        rng = random.Random(f"{self.seed}:{signal.flag}:{tick}")
        return [rng.uniform(-1.0, 1.0) for _ in range(count)]


GENERATORS = {"sine": Sine, "constant": Constant, "ramp": Ramp, "random": Random}


@dataclass(frozen=True)
class SourceSpec:
    """Where the samples of one signal come from.

    Periodic signals take a ``generator``; aperiodic ones take a
    ``change_schedule`` of ``(tick_index, values)`` with one value per channel.
    """

    signal: SignalType
    generator: Sine | Constant | Ramp | Random | None = None
    change_schedule: tuple[tuple[int, tuple[float, ...]], ...] = field(default=())

    def __post_init__(self):
        if isinstance(self.signal, str):
            object.__setattr__(self, "signal", signals.signal_type(self.signal))
        schedule = tuple(
            (int(tick), tuple(float(v) for v in values))
            for tick, values in self.change_schedule
        )
        object.__setattr__(self, "change_schedule", schedule)
        if self.signal.aperiodic:
            if self.generator is not None:
                raise SourceError(f"aperiodic signal {self.signal} takes a change_schedule, not a generator")
            ticks = [t for t, _ in schedule]
            if any(t < 0 for t in ticks) or len(set(ticks)) != len(ticks):
                raise SourceError(f"{self.signal} change_schedule ticks must be unique and >= 0")
        else:
            if schedule:
                raise SourceError(f"periodic signal {self.signal} cannot have a change_schedule")
            if self.generator is None:
                raise SourceError(f"periodic signal {self.signal} needs a generator")

    def change_at(self, tick: int) -> tuple[float, ...] | None:
        for t, values in self.change_schedule:
            if t == tick:
                return values
        return None


def check_sources(sources, metainfo: MetaInfo) -> None:
    """Sources must match the metainfo signals one to one."""
    if metainfo.master_signal is None:
        raise SourceError("metainfo needs a masterSignal to generate packets")
    by_type = {}
    for src in sources:
        if src.signal in by_type:
            raise SourceError(f"two sources for {src.signal}")
        by_type[src.signal] = src
    described = {s.signal_type for s in metainfo.signals}
    if set(by_type) != described:
        missing = sorted(s.identifier for s in described - set(by_type))
        extra = sorted(s.identifier for s in set(by_type) - described)
        raise SourceError(f"sources do not match metainfo signals (missing {missing}, extra {extra})")
    for info in metainfo.signals:
        src = by_type[info.signal_type]
        for tick, values in src.change_schedule:
            if len(values) != info.num_channels:
                raise SourceError(
                    f"{info.signal_type} change at tick {tick} has {len(values)} values for "
                    f"{info.num_channels} channels"
                )


def tick_timestamp(tick_index: int, metainfo: MetaInfo) -> int:
    """Microseconds since server start at the beginning of a tick."""
    master = metainfo.master_signal
    if master is None:
        raise MetaInfoError("metainfo has no masterSignal")
    return round(tick_index * master.block_size * 1_000_000 / master.sampling_rate)


def generate_tick(
    sources,
    metainfo: MetaInfo,
    tick_index: int,
    *,
    packet_id: int = 0,
    connection_packet_number: int = 0,
) -> DataPacket:
    if tick_index < 0:
        raise SourceError(f"tick index must be >= 0, got {tick_index}")
    by_type = {src.signal: src for src in sources}
    blocks = []
    for info in sorted(metainfo.signals, key=lambda s: s.signal_type.flag):
        src = by_type.get(info.signal_type)
        if src is None:
            raise SourceError(f"no source for {info.signal_type}")
        if info.signal_type.aperiodic:
            values = src.change_at(tick_index)
            if values is not None:
                blocks.append(SignalBlock(info.signal_type, info.num_channels, 1, values))
            continue
        ch, bs = info.num_channels, info.block_size
        gen = src.generator
        if isinstance(gen, Random):
            samples = gen.block(info.signal_type, tick_index, ch * bs)
        else:
            first = tick_index * bs
            samples = [
                gen.sample(c, first + k, info.sampling_rate)
                for c in range(ch)
                for k in range(bs)
            ]
        blocks.append(SignalBlock(info.signal_type, ch, bs, samples))
    return DataPacket(
        packet_id=packet_id,
        connection_packet_number=connection_packet_number,
        timestamp_micros=tick_timestamp(tick_index, metainfo),
        blocks=tuple(blocks),
    )
