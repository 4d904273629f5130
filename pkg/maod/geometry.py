"""
Conversão pixel ↔ chão para a câmera montada no robô.

Referencial do robô: x para frente, y para a esquerda, z para cima, origem
no centro do robô ao nível do chão. A câmera fica em (offset_x, offset_y,
altura), inclinada `tilt` abaixo da horizontal, com ponto principal no
centro da imagem.
"""
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Tuple

import numpy as np

from maod.exceptions import ConfigError, GeometryError

logger = logging.getLogger(__name__)

_HORIZON_EPS = 1e-9


@dataclass(frozen=True)
class Calibration:
    height: float
    tilt: float
    hfov: float
    vfov: float
    width: int = 64
    image_height: int = 64
    offset_x: float = 0.0
    offset_y: float = 0.0

    def __post_init__(self):
        if self.height <= 0:
            raise ConfigError(f"Altura da câmera deve ser > 0, recebido {self.height}")
        if not 0.0 < self.tilt < math.pi / 2:
            raise ConfigError(f"Inclinação deve estar em (0, π/2), recebido {self.tilt}")
        if not (0.0 < self.hfov < math.pi and 0.0 < self.vfov < math.pi):
            raise ConfigError("Campos de visão devem estar em (0, π)")
        if self.width < 1 or self.image_height < 1:
            raise ConfigError("Dimensões da imagem devem ser ≥ 1")

    @classmethod
    def from_dict(cls, section: Dict[str, Any], image_size: int) -> 'Calibration':
        return cls(height=float(section['height_m']), tilt=math.radians(section['tilt_deg']),
                   hfov=math.radians(section['hfov_deg']), vfov=math.radians(section['vfov_deg']),
                   width=image_size, image_height=image_size,
                   offset_x=float(section['offset_x_m']), offset_y=float(section['offset_y_m']))

    @property
    def fx(self) -> float:
        return (self.width / 2) / math.tan(self.hfov / 2)

    @property
    def fy(self) -> float:
        return (self.image_height / 2) / math.tan(self.vfov / 2)

    @property
    def principal_point(self) -> Tuple[float, float]:
        return self.width / 2, self.image_height / 2

    @property
    def position(self) -> np.ndarray:
        return np.array([self.offset_x, self.offset_y, self.height])

    def axes(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(frente, direita da imagem, baixo da imagem) no referencial do robô."""
        c, s = math.cos(self.tilt), math.sin(self.tilt)
        return np.array([c, 0.0, -s]), np.array([0.0, -1.0, 0.0]), np.array([-s, 0.0, -c])


def pixel_ray(u: float, v: float, calib: Calibration) -> np.ndarray:
    forward, right, down = calib.axes()
    cx, cy = calib.principal_point
    return forward + ((u - cx) / calib.fx) * right + ((v - cy) / calib.fy) * down


def pixel_to_robot(u: float, v: float, calib: Calibration) -> Tuple[float, float]:
    """
    Interseção do raio do pixel (u, v) com o plano z = 0.

    Raises:
        GeometryError: raio acima do horizonte ou paralelo ao chão
    """
    ray = pixel_ray(u, v, calib)
    if ray[2] >= -_HORIZON_EPS:
        raise GeometryError(f"Pixel ({u:.2f}, {v:.2f}) não intercepta o chão", code='NO_GROUND')
    scale = -calib.height / ray[2]
    point = calib.position + scale * ray
    return float(point[0]), float(point[1])


def robot_to_pixel(x: float, y: float, calib: Calibration, z: float = 0.0) -> Tuple[float, float]:
    """Projeção pinhole de um ponto do referencial do robô."""
    forward, right, down = calib.axes()
    rel = np.array([x, y, z]) - calib.position
    depth = float(rel @ forward)
    if depth <= _HORIZON_EPS:
        raise GeometryError(f"Ponto ({x:.3f}, {y:.3f}, {z:.3f}) atrás da câmera", code='BEHIND')
    cx, cy = calib.principal_point
    return cx + calib.fx * float(rel @ right) / depth, cy + calib.fy * float(rel @ down) / depth


def normalized_to_robot(point: Tuple[float, float], calib: Calibration) -> Tuple[float, float]:
    """Ponto normalizado da imagem ([0, 1]²) para o chão."""
    return pixel_to_robot(point[0] * calib.width, point[1] * calib.image_height, calib)


def in_view(u: float, v: float, calib: Calibration) -> bool:
    return 0.0 <= u <= calib.width and 0.0 <= v <= calib.image_height
