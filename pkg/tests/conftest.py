import threading
from dataclasses import replace

import pytest

from src.backend.config import ArrayConfig, DetectorConfig, load_preset
from src.backend.link_model import OperatingPoint
from src.backend.units import RngSpec


def single_pixel(**overrides) -> ArrayConfig:
    """One noiseless pixel; keyword overrides go to its DetectorConfig."""
    params = dict(spde=1.0, dcr_hz=0.0, afterpulse_total=0.0, deadtime_ns=0.0)
    params.update(overrides)
    return ArrayConfig(pixel_configs=(DetectorConfig(**params),), crosstalk_intrinsic=((0.0,),))


def pixel_pair(crosstalk: float = 0.0, **overrides) -> ArrayConfig:
    params = dict(spde=0.15, dcr_hz=0.0, afterpulse_total=0.0, deadtime_ns=0.0)
    params.update(overrides)
    det = DetectorConfig(**params)
    return ArrayConfig(
        pixel_configs=(det, det),
        crosstalk_intrinsic=((0.0, crosstalk), (crosstalk, 0.0)),
    )


@pytest.fixture
def cold():
    return load_preset("cold")


@pytest.fixture
def room():
    return load_preset("room")


@pytest.fixture
def cold_op(cold):
    return OperatingPoint.from_config(cold)


@pytest.fixture
def room_op(room):
    return OperatingPoint.from_config(room)


@pytest.fixture
def noiseless_op(cold_op):
    """Ideal link: perfect visibility, every photon in the gated bin, no detector noise."""
    return replace(
        cold_op,
        receiver=replace(cold_op.receiver, visibility=1.0, central_bin_fraction=1.0),
        detectors=pixel_pair(spde=0.15),
    )


@pytest.fixture
def rng():
    return RngSpec(seed=12345)


@pytest.fixture
def cancel_event():
    return threading.Event()
