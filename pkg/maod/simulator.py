"""
Simulação em malha fechada: o robô procura, aproxima e agarra um cubo.

A cada passo a câmera simulada renderiza a vista atual (via scenegen), o
robô envia um pedido de posição pelo respondedor de aquisição e a política
age conforme a fase:

    Searching   → gira até ver objetos
    Approaching → anda em direção à posição resolvida no chão
    Refining    → servo visual com a caixa fina até a condição de agarre
    Grasped     → fim
"""
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from maod.acquisition import POSITION_RESPONSE, AcqFrame, AcquisitionResponder, CallableCameraSource
from maod.config import DEFAULTS, SHOW_PROGRESS
from maod.exceptions import ConfigError, GeometryError
from maod.geometry import Calibration, robot_to_pixel
from maod.heads import BoxTarget, GridSpec, Situation
from maod.pipeline import FineBox, Nothing, RoughCell, TimingReport, verdict_of
from maod.scenegen import COLORS, BACKGROUND_KINDS, ObjectSpec, SceneSpec, render

logger = logging.getLogger(__name__)

_MAX_SIDE = 1.0 - 1e-9
BACKGROUND_TONE = 0.45


class Phase(IntEnum):
    SEARCHING = 0
    APPROACHING = 1
    REFINING = 2
    GRASPED = 3

    @property
    def label(self) -> str:
        return self.name.capitalize()


@dataclass
class RobotPose:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0

    def to_robot_frame(self, wx: float, wy: float) -> Tuple[float, float]:
        dx, dy = wx - self.x, wy - self.y
        c, s = math.cos(self.heading), math.sin(self.heading)
        return c * dx + s * dy, -s * dx + c * dy

    def move(self, forward: float, left: float, turn: float):
        """Translada no referencial do robô e depois gira."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        self.x += c * forward - s * left
        self.y += s * forward + c * left
        self.heading = math.atan2(math.sin(self.heading + turn), math.cos(self.heading + turn))


@dataclass(frozen=True)
class WorldObject:
    x: float
    y: float
    radius: float = 0.10
    color: str = 'red'

    def corners(self) -> List[Tuple[float, float, float]]:
        r = self.radius
        return [(self.x + sx * r, self.y + sy * r, z)
                for sx in (-1, 1) for sy in (-1, 1) for z in (0.0, 2 * r)]


@dataclass
class WorldState:
    robot: RobotPose = field(default_factory=RobotPose)
    obj: Optional[WorldObject] = None
    phase: Phase = Phase.SEARCHING

    def distance(self) -> Optional[float]:
        if self.obj is None:
            return None
        return math.hypot(self.obj.x - self.robot.x, self.obj.y - self.robot.y)

    def advance(self, phase: Phase):
        if phase < self.phase:
            raise ConfigError(f"Transição de fase para trás: {self.phase.label} → {phase.label}")
        self.phase = phase


@dataclass(frozen=True)
class SimConfig:
    step_m: float = 0.05
    turn_rad: float = 0.2
    refine_step_m: float = 0.01
    grasp_center: float = 0.1
    grasp_area: float = 0.28
    oracle_close_area: float = 0.12
    max_steps: int = 200
    noise_sigma: float = 0.0
    background: str = 'plain'
    object_x: float = 2.0
    object_y: float = 1.0
    object_radius: float = 0.10
    object_color: str = 'red'

    def __post_init__(self):
        if self.step_m <= 0 or self.turn_rad <= 0 or self.refine_step_m <= 0:
            raise ConfigError("Passos de movimento e giro devem ser > 0")
        if self.max_steps < 1:
            raise ConfigError(f"max_steps deve ser ≥ 1, recebido {self.max_steps}")
        if self.background not in BACKGROUND_KINDS or self.object_color not in COLORS:
            raise ConfigError(f"Fundo ou cor inválidos: {self.background!r}, {self.object_color!r}")

    @classmethod
    def from_dict(cls, section: Dict[str, Any]) -> 'SimConfig':
        try:
            return cls(**section)
        except TypeError as e:
            raise ConfigError(f"Seção 'sim' inválida: {e}") from e

    def default_world(self, with_object: bool = True) -> WorldState:
        obj = WorldObject(self.object_x, self.object_y, self.object_radius, self.object_color)
        return WorldState(RobotPose(), obj if with_object else None)


def default_sim_config() -> SimConfig:
    return SimConfig.from_dict(DEFAULTS['sim'])


# ===========================
# CÂMERA SIMULADA
# ===========================
def _clipped_box(us: List[float], vs: List[float], calib: Calibration) -> Optional[BoxTarget]:
    x0 = min(max(min(us) / calib.width, 0.0), 1.0)
    x1 = min(max(max(us) / calib.width, 0.0), 1.0)
    y0 = min(max(min(vs) / calib.image_height, 0.0), 1.0)
    y1 = min(max(max(vs) / calib.image_height, 0.0), 1.0)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None
    return BoxTarget((x0 + x1) / 2, (y0 + y1) / 2, min(x1 - x0, _MAX_SIDE), min(y1 - y0, _MAX_SIDE))


class SimCamera:
    """Câmera do robô: projeta o cubo (caixa envolvente) e renderiza a vista."""

    def __init__(self, calib: Calibration, config: SimConfig, seed: int = 0):
        self.calib = calib
        self.config = config
        self.seed = seed

    def project(self, world: WorldState) -> Optional[BoxTarget]:
        """Caixa normalizada do cubo na imagem, ou None se fora de vista."""
        if world.obj is None:
            return None
        us, vs = [], []
        for wx, wy, z in world.obj.corners():
            rx, ry = world.robot.to_robot_frame(wx, wy)
            try:
                u, v = robot_to_pixel(rx, ry, self.calib, z)
            except GeometryError:
                return None
            us.append(u)
            vs.append(v)
        return _clipped_box(us, vs, self.calib)

    def ground_anchor(self, world: WorldState) -> Optional[Tuple[float, float]]:
        """Projeção normalizada do centro do objeto no chão, se dentro da imagem."""
        if world.obj is None:
            return None
        rx, ry = world.robot.to_robot_frame(world.obj.x, world.obj.y)
        try:
            u, v = robot_to_pixel(rx, ry, self.calib)
        except GeometryError:
            return None
        x, y = u / self.calib.width, v / self.calib.image_height
        return (x, y) if 0.0 <= x <= 1.0 and 0.0 <= y <= 1.0 else None

    def render(self, world: WorldState, step: int) -> np.ndarray:
        box = self.project(world)
        objects = ()
        if box is not None:
            objects = (ObjectSpec(box.x, box.y, box.w, box.h, world.obj.color),)
        rng = np.random.default_rng(np.random.SeedSequence(int(self.seed), spawn_key=(4, step)))
        spec = SceneSpec(self.config.background, objects, tone=BACKGROUND_TONE)
        return render(spec, rng, self.calib.width, self.config.noise_sigma)


class OracleDetector:
    """
    Detector de verdade: mesma interface do pipeline, resultados a partir da
    geometria do mundo. A âncora grossa é a projeção exata do centro no chão.
    """

    def __init__(self, camera: SimCamera, close_area: float = 0.12, grid: GridSpec = GridSpec()):
        self.camera = camera
        self.close_area = close_area
        self.grid = grid
        self.world: Optional[WorldState] = None

    def bind(self, world: WorldState):
        self.world = world

    def process_frame(self, image: np.ndarray):
        box = self.camera.project(self.world) if self.world is not None else None
        timing = TimingReport(0.0, 0.0, 0.0, 0.0)
        if box is None:
            return Nothing(), timing
        if box.area >= self.close_area:
            return FineBox(box), timing
        anchor = self.camera.ground_anchor(self.world) or (box.x, min(1.0, box.y + box.h / 2))
        return RoughCell(self.grid.cell_index(box.x, box.y), anchor), timing


# ===========================
# POLÍTICA
# ===========================
@dataclass
class SimResult:
    trajectory: List[Dict[str, Any]]
    final_phase: Phase
    steps: int
    final_distance: Optional[float]

    @property
    def grasped(self) -> bool:
        return self.final_phase == Phase.GRASPED

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.trajectory, columns=TRAJECTORY_COLUMNS)

    def summary(self) -> Dict[str, Any]:
        return {'steps': self.steps, 'final_phase': self.final_phase.label,
                'final_distance': self.final_distance}


TRAJECTORY_COLUMNS = ['step', 'phase', 'robot_x', 'robot_y', 'heading', 'verdict', 'result', 'cell',
                      'box_x', 'box_y', 'box_w', 'box_h', 'response', 'target_x', 'target_y', 'distance']


def _clip(value: float, limit: float) -> float:
    return max(-limit, min(limit, value))


def grasp_ready(box: BoxTarget, config: SimConfig) -> bool:
    return math.hypot(box.x - 0.5, box.y - 0.5) <= config.grasp_center and box.area >= config.grasp_area


def _approach(world: WorldState, target: Tuple[float, float], step: float, config: SimConfig):
    tx, ty = target
    d = math.hypot(tx, ty)
    if d <= 0:
        return
    s = min(step, d)
    world.robot.move(s * tx / d, s * ty / d, _clip(math.atan2(ty, tx), config.turn_rad))


def _refine(world: WorldState, box: BoxTarget, calib: Calibration, config: SimConfig):
    bearing = -math.atan(2.0 * (box.x - 0.5) * math.tan(calib.hfov / 2))
    world.robot.move(config.refine_step_m, 0.0, _clip(bearing, config.turn_rad))


def _record(step: int, world: WorldState, result, response: AcqFrame,
            target: Optional[Tuple[float, float]]) -> Dict[str, Any]:
    row = {'step': step, 'phase': world.phase.label, 'robot_x': world.robot.x, 'robot_y': world.robot.y,
           'heading': world.robot.heading,
           'verdict': verdict_of(result).label if result is not None else '',
           'result': type(result).__name__ if result is not None else '', 'cell': None,
           'box_x': None, 'box_y': None, 'box_w': None, 'box_h': None,
           'response': f"0x{response.type:02X}",
           'target_x': target[0] if target else None, 'target_y': target[1] if target else None,
           'distance': world.distance()}
    if isinstance(result, RoughCell):
        row['cell'] = result.index
    elif isinstance(result, FineBox):
        row.update(box_x=result.box.x, box_y=result.box.y, box_w=result.box.w, box_h=result.box.h)
    return row


def simulate_approach(world: WorldState, detector, calib: Calibration, max_steps: int,
                      config: Optional[SimConfig] = None, seed: int = 0) -> SimResult:
    """
    Executa a política até agarrar ou esgotar `max_steps`.

    Args:
        world: Estado inicial (modificado no lugar)
        detector: MAODPipeline ou OracleDetector (qualquer objeto com process_frame)
        calib: Calibração da câmera do robô
        max_steps: Limite de passos; ao esgotar, a fase final é devolvida como está

    Returns:
        SimResult com a trajetória completa
    """
    config = config or default_sim_config()
    camera = SimCamera(calib, config, seed)
    if hasattr(detector, 'bind'):
        detector.bind(world)
    responder = AcquisitionResponder(detector, calib)
    trajectory = []
    steps = 0

    for step in range(max_steps):
        if world.phase == Phase.GRASPED:
            break
        steps = step + 1
        source = CallableCameraSource(lambda: camera.render(world, step))
        response = responder.handle_request(AcqFrame.request(), source)
        result = responder.last_result
        verdict = verdict_of(result) if result is not None else Situation.NO_OBJECT
        target = response.meters if response.type == POSITION_RESPONSE else None

        if world.phase == Phase.SEARCHING:
            if verdict != Situation.NO_OBJECT:
                world.advance(Phase.APPROACHING)
            else:
                world.robot.move(0.0, 0.0, config.turn_rad)
        elif world.phase == Phase.APPROACHING:
            if verdict == Situation.CLOSE_OBJECT:
                world.advance(Phase.REFINING)
            elif target is not None:
                _approach(world, target, config.step_m, config)
            else:
                world.robot.move(0.0, 0.0, config.turn_rad)
        elif world.phase == Phase.REFINING:
            if isinstance(result, FineBox):
                if grasp_ready(result.box, config):
                    world.advance(Phase.GRASPED)
                else:
                    _refine(world, result.box, calib, config)
            elif target is not None:
                _approach(world, target, config.refine_step_m, config)
            else:
                world.robot.move(0.0, 0.0, config.turn_rad)

        trajectory.append(_record(step, world, result, response, target))
        logger.debug(f"Passo {step}: {world.phase.label}, veredito {verdict.label}, "
                     f"pose ({world.robot.x:.3f}, {world.robot.y:.3f}, {world.robot.heading:.3f})")

    final = SimResult(trajectory, world.phase, steps, world.distance())
    distance = f"{final.final_distance:.4f} m" if final.final_distance is not None else '-'
    logger.info(f"🤖 Simulação: {final.final_phase.label} em {steps} passos, distância final {distance}")
    return final


def random_world(rng: np.random.Generator, config: SimConfig) -> WorldState:
    """Objeto sorteado à frente do robô, dentro do campo de visão inicial."""
    distance = rng.uniform(1.0, 2.5)
    bearing = rng.uniform(-0.6, 0.6)
    obj = WorldObject(distance * math.cos(bearing), distance * math.sin(bearing),
                      config.object_radius, config.object_color)
    return WorldState(RobotPose(), obj)


def run_worlds(n: int, seed: int, calib: Calibration, config: SimConfig,
               detector_factory: Callable[[SimCamera], Any], max_steps: int) -> List[Dict[str, Any]]:
    """Roda `n` mundos sorteados e devolve o resumo de cada um."""
    summaries = []
    for i in tqdm(range(n), desc='mundos', disable=not SHOW_PROGRESS):
        rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(3, i)))
        world = random_world(rng, config)
        detector = detector_factory(SimCamera(calib, config, seed))
        result = simulate_approach(world, detector, calib, max_steps, config, seed)
        summaries.append({'world': i, 'seed': seed, 'object_x': world.obj.x, 'object_y': world.obj.y,
                          **result.summary()})
    grasped = sum(1 for s in summaries if s['final_phase'] == Phase.GRASPED.label)
    logger.info(f"✅ {grasped}/{n} mundos terminaram em Grasped")
    return summaries
