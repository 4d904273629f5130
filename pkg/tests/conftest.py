"""Fixtures compartilhadas: geradores com semente, modelos pequenos e datasets mínimos."""
import os

os.environ.setdefault('MAOD_PROGRESS', 'False')

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from maod.backbone import BackboneConfig, BlockSpec  # noqa: E402
from maod.geometry import Calibration  # noqa: E402
from maod.heads import GridSpec, HeadConfig  # noqa: E402
from maod.pipeline import build_models  # noqa: E402
from maod.scenegen import SceneConfig, gen_dataset  # noqa: E402
from maod.tensor_core import make_rng  # noqa: E402


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(scope='session')
def tiny_backbone():
    """3×16×16 → 8×4×4 (dois blocos com stride 2)."""
    return BackboneConfig((3, 16, 16), (BlockSpec(8, 3, 2), BlockSpec(8, 3, 2)))


@pytest.fixture(scope='session')
def tiny_heads():
    return HeadConfig(GridSpec(4, 4), meta_channels=6, rough_channels=6, fine_channels=6, dropout=0.2)


@pytest.fixture
def tiny_models(tiny_backbone, tiny_heads):
    return build_models(tiny_backbone, tiny_heads, make_rng(7))


@pytest.fixture(scope='session')
def tiny_scene():
    return SceneConfig(image_size=16, proxy_samples=16)


@pytest.fixture(scope='session')
def tiny_dataset(tiny_scene):
    return gen_dataset((10, 10, 10), 1, tiny_scene)


@pytest.fixture
def calib():
    return Calibration(height=0.30, tilt=np.radians(45.0), hfov=np.radians(90.0), vfov=np.radians(90.0),
                       width=64, image_height=64, offset_x=-0.22, offset_y=0.0)
