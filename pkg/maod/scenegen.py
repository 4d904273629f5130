"""
Gerador determinístico de cenas sintéticas para o robô.

Três situações: nenhum objeto (metade com fundo borrado, as imagens "vagas"
do robô em movimento), objetos distantes (1 a 4 pequenos) e um objeto
próximo (grande). Objetos são retângulos brancos, vermelhos ou azuis sobre
um de quatro fundos texturizados; ruído gaussiano σ = 0.02 por pixel.

Arquivos: imagens PPM (P6, maxval 255) e um manifesto JSON por linha.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from PIL import Image
from tqdm import tqdm

from maod.config import DEFAULTS, SHOW_PROGRESS, config_hash
from maod.exceptions import ConfigError, DataError
from maod.heads import BoxTarget, GridSpec, Situation, rough_targets
from maod.tensor_core import make_rng

logger = logging.getLogger(__name__)

BACKGROUND_KINDS = ('plain', 'stripes', 'checker', 'gradient')

COLORS: Dict[str, Tuple[float, float, float]] = {
    'white': (1.0, 1.0, 1.0),
    'red': (0.85, 0.10, 0.10),
    'blue': (0.10, 0.20, 0.85),
}

MANIFEST_FILE = 'labels.jsonl'
SUMMARY_FILE = 'dataset.json'
IMAGES_DIR = 'images'

_EDGE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 64
    far_area_max: float = 0.06
    close_area_min: float = 0.20
    overlap_fraction: float = 0.0
    noise_sigma: float = 0.02
    blur_radius: int = 2
    margin: float = 0.02
    far_side_min: float = 0.04
    far_side_max: float = 0.22
    close_side_min: float = 0.45
    close_side_max: float = 0.80
    test_fraction: float = 0.2
    proxy_samples: int = 400

    def __post_init__(self):
        if self.close_area_min <= self.far_area_max:
            raise ConfigError(f"close_area_min ({self.close_area_min}) deve ser maior que far_area_max "
                              f"({self.far_area_max}): as situações precisam ser separáveis")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ConfigError(f"overlap_fraction deve estar em [0, 1], recebido {self.overlap_fraction}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction deve estar em (0, 1), recebido {self.test_fraction}")
        if self.image_size < 4 or self.blur_radius < 0 or self.noise_sigma < 0:
            raise ConfigError("image_size ≥ 4, blur_radius ≥ 0 e noise_sigma ≥ 0 são obrigatórios")
        if not (0 < self.far_side_min <= self.far_side_max < 1 and 0 < self.close_side_min <= self.close_side_max < 1):
            raise ConfigError("Faixas de lado dos objetos devem estar em (0, 1) e ordenadas")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SceneConfig':
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"Seção 'scene' inválida: {e}") from e

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


@dataclass(frozen=True)
class ObjectSpec:
    x: float
    y: float
    w: float
    h: float
    color: str = 'white'

    def __post_init__(self):
        if self.color not in COLORS:
            raise DataError(f"Cor desconhecida {self.color!r} (opções: {sorted(COLORS)})")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise DataError(f"Tamanho do objeto fora de (0, 1]: {self.w}×{self.h}")
        if (self.x - self.w / 2 < -_EDGE_TOLERANCE or self.x + self.w / 2 > 1 + _EDGE_TOLERANCE
                or self.y - self.h / 2 < -_EDGE_TOLERANCE or self.y + self.h / 2 > 1 + _EDGE_TOLERANCE):
            raise DataError(f"Objeto em ({self.x:.3f}, {self.y:.3f}) tamanho {self.w:.3f}×{self.h:.3f} "
                            f"sai da imagem unitária")

    @property
    def area(self) -> float:
        return self.w * self.h

    def box(self) -> BoxTarget:
        return BoxTarget(self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class SceneSpec:
    background: str
    objects: Tuple[ObjectSpec, ...] = ()
    blur: int = 0
    tone: Optional[float] = None

    def __post_init__(self):
        if self.background not in BACKGROUND_KINDS:
            raise DataError(f"Fundo desconhecido {self.background!r} (opções: {BACKGROUND_KINDS})")
        if self.blur < 0:
            raise DataError(f"blur deve ser ≥ 0, recebido {self.blur}")
        if self.tone is not None and not 0.0 <= self.tone <= 1.0:
            raise DataError(f"tone deve estar em [0, 1], recebido {self.tone}")


@dataclass
class SceneSample:
    image: np.ndarray
    situation: Situation
    boxes: Tuple[BoxTarget, ...]
    spec: Optional[SceneSpec] = None
    seed: Optional[int] = None

    @property
    def centers(self) -> List[Tuple[float, float]]:
        return [(b.x, b.y) for b in self.boxes]

    def grid_targets(self, grid: GridSpec) -> Optional[np.ndarray]:
        return rough_targets(self.centers, grid) if self.boxes else None


# ===========================
# RENDERIZAÇÃO
# ===========================
def _background(kind: str, rng: np.random.Generator, size: int, tone: Optional[float]) -> np.ndarray:
    base = rng.uniform(0.25, 0.65) if tone is None else tone
    tint = rng.uniform(-0.05, 0.05, size=3) if tone is None else np.zeros(3)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == 'plain':
        field_ = np.zeros((size, size))
    elif kind == 'stripes':
        period = rng.uniform(6.0, 16.0)
        phase = rng.uniform(0.0, 2 * math.pi)
        coord = xx if rng.random() < 0.5 else yy
        field_ = rng.uniform(0.10, 0.20) * np.sin(2 * math.pi * coord / period + phase)
    elif kind == 'checker':
        cell = int(rng.integers(4, 13))
        amplitude = rng.uniform(0.10, 0.20)
        field_ = np.where(((xx // cell) + (yy // cell)) % 2 == 0, amplitude, -amplitude)
    else:
        angle = rng.uniform(0.0, 2 * math.pi)
        proj = (xx * math.cos(angle) + yy * math.sin(angle)) / size
        proj = proj - proj.mean()
        field_ = rng.uniform(0.30, 0.50) * proj
    img = base + field_[:, :, None] + tint[None, None, :]
    return np.clip(img, 0.0, 1.0)


def _pixel(value: float, size: int) -> int:
    return int(math.floor(value * size + 0.5))


def render(spec: SceneSpec, rng: np.random.Generator, image_size: int = 64,
           noise_sigma: float = 0.02) -> np.ndarray:
    """
    Renderiza a cena em 3×S×S com valores em [0, 1].

    Retângulos são compostos na ordem da lista; o borrão (filtro caixa de
    raio `spec.blur`) é aplicado depois da composição e antes do ruído.
    """
    img = _background(spec.background, rng, image_size, spec.tone)
    for obj in spec.objects:
        x0 = _pixel(obj.x - obj.w / 2, image_size)
        x1 = max(x0 + 1, _pixel(obj.x + obj.w / 2, image_size))
        y0 = _pixel(obj.y - obj.h / 2, image_size)
        y1 = max(y0 + 1, _pixel(obj.y + obj.h / 2, image_size))
        img[max(0, y0):min(image_size, y1), max(0, x0):min(image_size, x1)] = COLORS[obj.color]
    if spec.blur > 0:
        k = 2 * spec.blur + 1
        img = cv2.blur(img, (k, k), borderType=cv2.BORDER_REFLECT)
    if noise_sigma > 0:
        img = np.clip(img + rng.normal(0.0, noise_sigma, size=img.shape), 0.0, 1.0)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


# ===========================
# AMOSTRAS
# ===========================
def _sample_size(rng: np.random.Generator, side_min: float, side_max: float,
                 area_min: float, area_max: float) -> Tuple[float, float]:
    for _ in range(1000):
        w = rng.uniform(side_min, side_max)
        h = rng.uniform(side_min, side_max)
        if area_min <= w * h <= area_max:
            return w, h
    raise ConfigError(f"Impossível sortear objeto com lados em [{side_min}, {side_max}] "
                      f"e área em [{area_min}, {area_max}]")


def _place(rng: np.random.Generator, w: float, h: float, margin: float, color: str) -> ObjectSpec:
    def _coord(size):
        lo, hi = size / 2 + margin, 1 - size / 2 - margin
        if lo >= hi:
            return 0.5
        return rng.uniform(lo, hi)

    return ObjectSpec(_coord(w), _coord(h), w, h, color)


def _random_color(rng: np.random.Generator) -> str:
    names = sorted(COLORS)
    return names[int(rng.integers(len(names)))]


def _object_for(situation: Situation, rng: np.random.Generator, config: SceneConfig) -> ObjectSpec:
    if rng.random() < config.overlap_fraction:
        w, h = _sample_size(rng, config.far_side_min, config.close_side_max,
                            config.far_area_max, config.close_area_min)
    elif situation == Situation.FAR_OBJECTS:
        w, h = _sample_size(rng, config.far_side_min, config.far_side_max, 0.0, config.far_area_max)
    else:
        w, h = _sample_size(rng, config.close_side_min, config.close_side_max, config.close_area_min, 1.0)
    return _place(rng, w, h, config.margin, _random_color(rng))


def gen_sample(situation: Union[Situation, int], rng: np.random.Generator, config: SceneConfig) -> SceneSample:
    """Gera uma amostra da situação pedida."""
    try:
        situation = Situation(situation)
    except ValueError:
        raise DataError(f"Situação inválida: {situation!r}") from None

    background = BACKGROUND_KINDS[int(rng.integers(len(BACKGROUND_KINDS)))]
    blur = 0
    if situation == Situation.NO_OBJECT:
        objects: Tuple[ObjectSpec, ...] = ()
        if rng.random() < 0.5:
            blur = config.blur_radius
    elif situation == Situation.FAR_OBJECTS:
        count = int(rng.integers(1, 5))
        objects = tuple(_object_for(situation, rng, config) for _ in range(count))
    else:
        objects = (_object_for(situation, rng, config),)

    spec = SceneSpec(background, objects, blur)
    image = render(spec, rng, config.image_size, config.noise_sigma)
    return SceneSample(image, situation, tuple(o.box() for o in objects), spec)


def derive_seed(dataset_seed: int, index: int) -> int:
    """Semente por amostra: função pura de (semente do dataset, índice)."""
    sequence = np.random.SeedSequence(int(dataset_seed), spawn_key=(0, int(index)))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def _split_rng(dataset_seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(dataset_seed), spawn_key=(1,)))


# ===========================
# DATASET
# ===========================
@dataclass
class Dataset:
    samples: List[SceneSample]
    train_indices: List[int]
    test_indices: List[int]
    seed: int
    config: SceneConfig
    counts: Tuple[int, int, int]

    @property
    def train(self) -> List[SceneSample]:
        return [self.samples[i] for i in self.train_indices]

    @property
    def test(self) -> List[SceneSample]:
        return [self.samples[i] for i in self.test_indices]

    def split_of(self, index: int) -> str:
        return 'test' if index in set(self.test_indices) else 'train'

    def class_counts(self, split: str = 'train') -> List[int]:
        samples = self.train if split == 'train' else self.test
        return [sum(1 for s in samples if s.situation == sit) for sit in Situation]

    def manifest(self) -> Dict[str, Any]:
        return {
            'seed': self.seed,
            'config': self.config.to_dict(),
            'config_hash': self.config.hash(),
            'counts': {sit.label: n for sit, n in zip(Situation, self.counts)},
            'train': len(self.train_indices),
            'test': len(self.test_indices),
            'train_counts': {sit.label: n for sit, n in zip(Situation, self.class_counts('train'))},
            'test_counts': {sit.label: n for sit, n in zip(Situation, self.class_counts('test'))},
        }


def _validate_counts(counts: Sequence[int]) -> Tuple[int, int, int]:
    if len(counts) != len(Situation):
        raise DataError(f"Esperadas {len(Situation)} contagens (NoObject, FarObjects, CloseObject), "
                        f"recebido {list(counts)}")
    counts = tuple(int(c) for c in counts)
    if any(c < 0 for c in counts):
        raise DataError(f"Contagens devem ser ≥ 0: {counts}")
    if sum(counts) == 0:
        raise DataError("Todas as contagens são zero: nada a gerar")
    return counts


def stratified_split(situations: Sequence[Situation], test_fraction: float,
                     rng: np.random.Generator) -> Tuple[List[int], List[int]]:
    """Divisão treino/teste estratificada por classe (teste = round(n · fração))."""
    train, test = [], []
    labels = np.asarray([int(s) for s in situations])
    for sit in Situation:
        idx = np.flatnonzero(labels == int(sit))
        if idx.size == 0:
            continue
        perm = rng.permutation(idx)
        n_test = int(math.floor(idx.size * test_fraction + 0.5))
        test.extend(int(i) for i in perm[:n_test])
        train.extend(int(i) for i in perm[n_test:])
    return sorted(train), sorted(test)


def gen_dataset(counts: Sequence[int], seed: int, config: SceneConfig) -> Dataset:
    """
    Gera o dataset completo.

    Args:
        counts: Amostras por situação (NoObject, FarObjects, CloseObject)
        seed: Semente do dataset (sementes por amostra são derivadas dela)
        config: Configuração das cenas
    """
    counts = _validate_counts(counts)
    jobs = [sit for sit, n in zip(Situation, counts) for _ in range(n)]
    samples = []
    for index, situation in enumerate(tqdm(jobs, desc='gerando cenas', disable=not SHOW_PROGRESS)):
        sample_seed = derive_seed(seed, index)
        sample = gen_sample(situation, make_rng(sample_seed), config)
        sample.seed = sample_seed
        samples.append(sample)
    train, test = stratified_split([s.situation for s in samples], config.test_fraction, _split_rng(seed))
    logger.info(f"✅ Dataset gerado: {len(samples)} amostras ({len(train)} treino / {len(test)} teste), "
                f"semente {seed}")
    return Dataset(samples, train, test, seed, config, counts)


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.floor(image.transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)


def write_dataset(dataset: Dataset, out_dir: Union[str, Path]) -> Path:
    """Escreve imagens PPM, o manifesto por linha e o resumo do dataset."""
    out_dir = Path(out_dir)
    (out_dir / IMAGES_DIR).mkdir(parents=True, exist_ok=True)
    test_set = set(dataset.test_indices)
    digest = dataset.config.hash()
    lines = []
    for index, sample in enumerate(dataset.samples):
        rel = f"{IMAGES_DIR}/{index:05d}.ppm"
        Image.fromarray(_to_uint8(sample.image)).save(out_dir / rel, format='PPM')
        record = {
            'file': rel,
            'split': 'test' if index in test_set else 'train',
            'situation': int(sample.situation),
            'boxes': [[b.x, b.y, b.w, b.h] for b in sample.boxes],
            'seed': sample.seed,
            'config_hash': digest,
        }
        lines.append(json.dumps(record, sort_keys=True))
    (out_dir / MANIFEST_FILE).write_text('\n'.join(lines) + '\n', encoding='utf-8')
    (out_dir / SUMMARY_FILE).write_text(json.dumps(dataset.manifest(), indent=2, sort_keys=True) + '\n',
                                        encoding='utf-8')
    logger.info(f"💾 Dataset salvo em {out_dir}")
    return out_dir


def read_dataset(data_dir: Union[str, Path]) -> Dataset:
    """Lê um dataset escrito por `write_dataset`."""
    data_dir = Path(data_dir)
    summary_path, manifest_path = data_dir / SUMMARY_FILE, data_dir / MANIFEST_FILE
    if not summary_path.exists() or not manifest_path.exists():
        raise DataError(f"Dataset não encontrado em {data_dir} (faltam {SUMMARY_FILE}/{MANIFEST_FILE})")
    summary = json.loads(summary_path.read_text(encoding='utf-8'))
    config = SceneConfig.from_dict(summary['config'])
    samples, train, test = [], [], []
    for index, line in enumerate(manifest_path.read_text(encoding='utf-8').splitlines()):
        if not line.strip():
            continue
        record = json.loads(line)
        image_path = data_dir / record['file']
        if not image_path.exists():
            raise DataError(f"Imagem ausente: {image_path}")
        with Image.open(image_path) as img:
            pixels = np.asarray(img.convert('RGB'), dtype=np.float64) / 255.0
        boxes = tuple(BoxTarget.from_array(b) for b in record['boxes'])
        samples.append(SceneSample(np.ascontiguousarray(pixels.transpose(2, 0, 1)),
                                   Situation(record['situation']), boxes, None, record.get('seed')))
        (test if record['split'] == 'test' else train).append(index)
    counts = tuple(summary['counts'][sit.label] for sit in Situation)
    logger.info(f"📂 Dataset lido de {data_dir}: {len(samples)} amostras")
    return Dataset(samples, train, test, int(summary['seed']), config, counts)


# ===========================
# TAREFA SUBSTITUTA (TEXTURAS)
# ===========================
@dataclass
class ProxyDataset:
    images: np.ndarray
    labels: np.ndarray
    class_names: Tuple[str, ...] = field(default=BACKGROUND_KINDS)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def gen_proxy_dataset(n: int, seed: int, config: SceneConfig) -> ProxyDataset:
    """Classificação de textura de fundo em 4 classes, balanceada."""
    if n < 1:
        raise DataError(f"O dataset substituto precisa de ao menos 1 amostra, recebido {n}")
    images = np.empty((n, 3, config.image_size, config.image_size))
    labels = np.empty(n, dtype=np.int64)
    for index in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(2, index)))
        label = index % len(BACKGROUND_KINDS)
        images[index] = render(SceneSpec(BACKGROUND_KINDS[label]), rng, config.image_size, config.noise_sigma)
        labels[index] = label
    return ProxyDataset(images, labels)


def default_scene_config() -> SceneConfig:
    return SceneConfig.from_dict(DEFAULTS['scene'])
