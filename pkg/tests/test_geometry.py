"""Testes da conversão pixel ↔ chão."""
import math

import numpy as np
import pytest

from maod.config import DEFAULTS
from maod.exceptions import ConfigError, GeometryError
from maod.geometry import Calibration, in_view, normalized_to_robot, pixel_to_robot, robot_to_pixel


def test_center_pixel_hits_ground_at_height_over_tan_tilt():
    calib = Calibration(height=1.0, tilt=math.radians(45.0), hfov=math.radians(60.0), vfov=math.radians(60.0))
    x, y = pixel_to_robot(32, 32, calib)
    assert x == pytest.approx(1.0)
    assert y == pytest.approx(0.0, abs=1e-12)


def test_offset_shifts_ground_point(calib):
    x, y = pixel_to_robot(32, 32, calib)
    assert x == pytest.approx(0.30 - 0.22)
    assert y == pytest.approx(0.0, abs=1e-12)


def test_image_right_is_robot_right(calib):
    _, y_right = pixel_to_robot(60, 40, calib)
    _, y_left = pixel_to_robot(4, 40, calib)
    assert y_right < 0 < y_left


def test_round_trip_pixel_ground_pixel(calib, rng):
    for _ in range(1000):
        u = rng.uniform(0, 64)
        v = rng.uniform(8, 64)
        x, y = pixel_to_robot(u, v, calib)
        back = robot_to_pixel(x, y, calib)
        assert abs(back[0] - u) <= 1e-6 and abs(back[1] - v) <= 1e-6


def test_round_trip_ground_pixel_ground(calib, rng):
    for _ in range(200):
        x, y = rng.uniform(0.2, 2.0), rng.uniform(-0.3, 0.3)
        u, v = robot_to_pixel(x, y, calib)
        back = pixel_to_robot(u, v, calib)
        np.testing.assert_allclose(back, (x, y), atol=1e-9)


def test_pixel_above_horizon_has_no_ground(calib):
    with pytest.raises(GeometryError) as info:
        pixel_to_robot(32, -10, calib)
    assert info.value.code == 'NO_GROUND'


def test_point_behind_camera(calib):
    with pytest.raises(GeometryError) as info:
        robot_to_pixel(-1.0, 0.0, calib, z=0.30)
    assert info.value.code == 'BEHIND'


def test_normalized_and_in_view(calib):
    assert normalized_to_robot((0.5, 0.5), calib) == pytest.approx(pixel_to_robot(32, 32, calib))
    assert in_view(0, 64, calib)
    assert not in_view(-0.1, 10, calib)


def test_calibration_validation_and_from_dict():
    with pytest.raises(ConfigError):
        Calibration(height=0.0, tilt=0.5, hfov=1.0, vfov=1.0)
    with pytest.raises(ConfigError):
        Calibration(height=0.3, tilt=math.pi / 2, hfov=1.0, vfov=1.0)
    calib = Calibration.from_dict(DEFAULTS['calibration'], 64)
    assert calib.height == 0.30
    assert calib.tilt == pytest.approx(math.pi / 4)
    assert calib.fx == pytest.approx(32.0)


def test_lateral_symmetry(calib):
    for v in (20, 40, 60):
        x_left, y_left = pixel_to_robot(10, v, calib)
        x_right, y_right = pixel_to_robot(54, v, calib)
        assert x_left == pytest.approx(x_right)
        assert y_left == pytest.approx(-y_right)


def test_horizontal_camera_is_rejected():
    with pytest.raises(ConfigError):
        Calibration(height=0.3, tilt=0.0, hfov=1.0, vfov=1.0)
