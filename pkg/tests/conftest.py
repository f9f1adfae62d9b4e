import os
import sys
import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, ROOT)
sys.path.insert(0, os.path.join(ROOT, 'utility_scripts'))

from efpn_model import EfpnConfig  # noqa: E402
from data_io import ClassPalette, PaletteEntry  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tinyConfig():
    '''Two stages of 8 and 16 channels, 8x8 inputs, 3 classes.'''
    return EfpnConfig.simple(numStages=2, baseChannels=8, numClasses=3, inputSize=8, lateralChannels=8)


@pytest.fixture
def toyPalette():
    return ClassPalette([PaletteEntry(0, 'Background', (0, 0, 0), 0.0),
                         PaletteEntry(1, 'Crack', (255, 0, 0), 1.0),
                         PaletteEntry(2, 'Hole', (0, 255, 0), 1.0),
                         PaletteEntry(3, 'Root', (0, 0, 255), 1.0)])
