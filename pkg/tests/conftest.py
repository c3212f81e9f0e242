import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qdcascade import DetectionChain, EmitterModel, PulseTrain, TagStream

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# measured device: lifetimes, fidelity, polarization and blinking dwell times
PAPER_EMITTER = dict(t1_x=1210.0, t1_xx=340.0, prep_fidelity=0.81, dop=0.33,
                     tau_on=20_300.0, tau_off=100_700.0)


@pytest.fixture
def paper_emitter():
    return EmitterModel(**PAPER_EMITTER)


@pytest.fixture
def ideal_detection():
    return DetectionChain(efficiency=1.0, jitter_fwhm=0.0, dead_time=0.0)


@pytest.fixture
def pulses():
    return PulseTrain(12_500, 20_000)


def random_stream(rng, n, span, channels=2):
    t = np.sort(rng.integers(0, span, size=n))
    ch = rng.integers(0, channels, size=n).astype(np.uint16)
    order = np.lexsort((ch, t))
    return TagStream(t[order], ch[order], span, channels)
