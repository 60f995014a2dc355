import dataclasses
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tia import metainfo as mi, server  # noqa: E402
from tia.sources import Sine, SourceSpec  # noqa: E402

DATA = Path(__file__).parent / "data"
CONFIGS = Path(__file__).parent.parent / "configs"


@pytest.fixture(scope="session")
def reference_xml() -> bytes:
    return (DATA / "reference_metainfo.xml").read_bytes()


@pytest.fixture(scope="session")
def reference_metainfo() -> mi.MetaInfo:
    return mi.MetaInfo(
        subject=mi.Subject(id="WE2", first_name="Max", surname="Mustermann", handedness="r"),
        master_signal=mi.MasterSignal(100.0, 10),
        signals=(
            mi.SignalInfo("eeg", 100.0, 10, 3, (
                mi.Channel(1, "Cz"), mi.Channel(2, "C1"), mi.Channel(3, "C2"),
            )),
            mi.SignalInfo("bp", 50.0, 5, 5, (
                mi.Channel(3, "Channel 3 with Label"), mi.Channel(2, "Channel 2 with Label"),
            )),
        ),
    )


@pytest.fixture(scope="session")
def reference_sources():
    return (
        SourceSpec("eeg", Sine(frequency_hz=10.0, amplitude=50.0)),
        SourceSpec("bp", Sine(frequency_hz=1.0, amplitude=120.0)),
    )


@pytest.fixture
def reference_config(reference_metainfo, reference_sources) -> server.ServerConfig:
    # ephemeral port, paced 20x faster than real time
    return server.ServerConfig(
        metainfo=reference_metainfo,
        sources=reference_sources,
        control_port=0,
        speed=20.0,
    )


@pytest.fixture
def running_server(reference_config):
    handle = server.run(reference_config)
    yield handle
    handle.shutdown()


@pytest.fixture
def make_server():
    handles = []

    def make(config, **changes):
        if changes:
            config = dataclasses.replace(config, **changes)
        h = server.run(config)
        handles.append(h)
        return h

    yield make
    for h in handles:
        h.shutdown()
