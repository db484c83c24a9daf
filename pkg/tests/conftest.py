import numpy as np
import pytest

from hsps.dispersion import SellmeierModel
from hsps.pairsim import ChannelModel, SourceModel
from hsps.qpm import FUNDAMENTAL, QpmProcess


@pytest.fixture(scope="session")
def lithium_niobate():
    return SellmeierModel.from_file()


@pytest.fixture
def process():
    return QpmProcess(pump_wavelength=0.532, poling_period=7.05, crystal_length=15.0, temperature=80.0)


@pytest.fixture
def two_mode_process():
    offsets = {FUNDAMENTAL: (0.0, 0.0, 0.0), ("00", "00", "10"): (0.0, 0.0, -0.001)}
    return QpmProcess(0.532, 7.05, 15.0, 80.0, offsets)


@pytest.fixture
def bright_channel():
    """Efficient, noiseless paths so that joint click probabilities are not tiny."""
    return ChannelModel(signal_transmission=0.5, idler_transmission=0.6, detector_efficiencies=(1.0, 1.0, 1.0))


@pytest.fixture
def thermal_source():
    return SourceModel(0.1)


def sigma(p: float, n: int) -> float:
    return float(np.sqrt(p * (1 - p) / n))


@pytest.fixture
def efficient_channel():
    return ChannelModel(0.95, 0.95, detector_efficiencies=(0.9, 0.9, 0.9))
