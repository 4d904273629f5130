"""
As três redes de tarefa sobre o mapa de características compartilhado:

    - MetaHead: classifica a situação do frame (nada / objetos distantes / objeto próximo)
    - RoughHead: indica a célula da grade que contém o centro de cada objeto
    - FineHead: regride a caixa (x, y, w, h) do objeto próximo

Cada cabeça tem seus próprios blocos treináveis (nada compartilhado além do
extrator congelado).
"""
import logging
import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from maod.bundle import ModelBundle
from maod.exceptions import DataError, ShapeError
from maod.layers import Dense, Projection, SeparableBlock
from maod.tensor_core import (Tensor, add, as_tensor, dropout, global_avg_pool, no_grad,
                              reshape, sigmoid, softmax, squared_error, weighted_cross_entropy)

logger = logging.getLogger(__name__)


class Situation(IntEnum):
    NO_OBJECT = 0
    FAR_OBJECTS = 1
    CLOSE_OBJECT = 2

    @property
    def label(self) -> str:
        return SITUATION_LABELS[self]


SITUATION_LABELS = {
    Situation.NO_OBJECT: 'NoObject',
    Situation.FAR_OBJECTS: 'FarObjects',
    Situation.CLOSE_OBJECT: 'CloseObject',
}


@dataclass(frozen=True)
class ClassWeights:
    alpha: Tuple[float, ...]

    def __post_init__(self):
        if len(self.alpha) == 0 or any(not (a > 0) or not math.isfinite(a) for a in self.alpha):
            raise DataError(f"Todos os pesos de classe devem ser finitos e > 0: {self.alpha}")

    @classmethod
    def uniform(cls, k: int) -> 'ClassWeights':
        return cls(tuple([1.0] * k))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.alpha, dtype=np.float64)

    def __len__(self):
        return len(self.alpha)


@dataclass(frozen=True)
class GridSpec:
    rows: int = 4
    cols: int = 4

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise DataError(f"Grade inválida {self.rows}×{self.cols}")

    @property
    def n(self) -> int:
        return self.rows * self.cols

    def cell_index(self, x: float, y: float) -> int:
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise DataError(f"Centro ({x}, {y}) fora de [0, 1]")
        row = min(int(math.floor(y * self.rows)), self.rows - 1)
        col = min(int(math.floor(x * self.cols)), self.cols - 1)
        return row * self.cols + col

    def cell_bounds(self, index: int) -> Tuple[float, float, float, float]:
        """(x0, y0, x1, y1) normalizados da célula."""
        if not 0 <= index < self.n:
            raise DataError(f"Índice de célula {index} fora de [0, {self.n})")
        row, col = divmod(index, self.cols)
        return col / self.cols, row / self.rows, (col + 1) / self.cols, (row + 1) / self.rows

    def cell_center(self, index: int) -> Tuple[float, float]:
        x0, y0, x1, y1 = self.cell_bounds(index)
        return (x0 + x1) / 2.0, (y0 + y1) / 2.0


@dataclass(frozen=True)
class BoxTarget:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ('x', 'y', 'w', 'h'):
            value = getattr(self, name)
            if not (0.0 < value < 1.0):
                raise DataError(f"BoxTarget.{name} = {value} fora de (0, 1)")

    @classmethod
    def from_array(cls, values: Sequence[float]) -> 'BoxTarget':
        x, y, w, h = (float(v) for v in values)
        return cls(x, y, w, h)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def corners(self) -> Tuple[float, float, float, float]:
        """(x0, y0, x1, y1) recortados à imagem unitária."""
        return (max(0.0, self.x - self.w / 2), max(0.0, self.y - self.h / 2),
                min(1.0, self.x + self.w / 2), min(1.0, self.y + self.h / 2))

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.corners()
        return max(0.0, x1 - x0) * max(0.0, y1 - y0)

    def iou(self, other: 'BoxTarget') -> float:
        ax0, ay0, ax1, ay1 = self.corners()
        bx0, by0, bx1, by1 = other.corners()
        inter = max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))
        union = self.area + other.area - inter
        return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class MetaOutput:
    logits: np.ndarray
    probabilities: np.ndarray

    @property
    def situation(self) -> Situation:
        # np.argmax devolve o menor índice em caso de empate
        return Situation(int(np.argmax(self.logits)))


# ===========================
# ALVOS E PESOS
# ===========================
def cell_index(center: Tuple[float, float], grid: GridSpec) -> int:
    return grid.cell_index(center[0], center[1])


def rough_targets(object_centers: Iterable[Tuple[float, float]], grid: GridSpec) -> np.ndarray:
    """Distribuição sobre as células: massa 1/k em cada célula ocupada."""
    cells = sorted({cell_index(c, grid) for c in object_centers})
    if not cells:
        raise DataError("rough_targets exige ao menos um objeto (frames sem objeto não chegam aqui)")
    t = np.zeros(grid.n)
    t[cells] = 1.0 / len(cells)
    return t


def class_weights_from_counts(counts: Sequence[int]) -> ClassWeights:
    """α_i = Σ counts / (k · counts_i)."""
    counts = [int(c) for c in counts]
    if not counts:
        raise DataError("Lista de contagens vazia")
    if any(c < 1 for c in counts):
        raise DataError(f"Contagem zero em {counts}: junte classes vazias ou informe α manualmente "
                        f"(alpha explícito na seção train)")
    total = float(sum(counts))
    k = len(counts)
    return ClassWeights(tuple(total / (k * c) for c in counts))


def _alpha_array(alpha: Union[ClassWeights, Sequence[float]], k: int) -> np.ndarray:
    values = alpha.as_array() if isinstance(alpha, ClassWeights) else np.asarray(alpha, dtype=np.float64)
    if values.shape != (k,):
        raise ShapeError(f"α com {values.shape} não confere com {k} saídas")
    return values


# ===========================
# PERDAS
# ===========================
def weighted_ce_loss(logits: Tensor, target: Union[int, Sequence[int], np.ndarray],
                     alpha: Union[ClassWeights, Sequence[float]]) -> Tensor:
    """−α_t · log softmax(o)_t (média no lote quando `target` é um vetor de classes)."""
    logits = as_tensor(logits)
    k = logits.shape[-1]
    classes = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if np.any(classes < 0) or np.any(classes >= k):
        raise DataError(f"Classe alvo {target} fora de [0, {k})")
    onehot = np.eye(k)[classes]
    if logits.ndim == 1:
        if classes.size != 1:
            raise ShapeError(f"Um vetor de logits exige um único alvo, recebido {classes.size}")
        onehot = onehot[0]
    return weighted_cross_entropy(logits, onehot, _alpha_array(alpha, k))


def rough_loss(scores: Tensor, t: np.ndarray, alpha: Union[ClassWeights, Sequence[float]]) -> Tensor:
    """Entropia cruzada ponderada com alvos suaves sobre as n células."""
    scores = as_tensor(scores)
    t = np.asarray(t, dtype=np.float64)
    if t.shape != scores.shape:
        raise ShapeError(f"Alvos {t.shape} não conferem com os scores {scores.shape}")
    if np.any(np.abs(t.sum(axis=-1) - 1.0) > 1e-9):
        raise DataError(f"Alvos da grade devem somar 1 ± 1e-9 (soma {t.sum(axis=-1)})")
    return weighted_cross_entropy(scores, t, _alpha_array(alpha, scores.shape[-1]))


def fine_loss(pred: Union[Tensor, BoxTarget], target: Union[BoxTarget, np.ndarray]) -> Tensor:
    """(x − x′)² + (y − y′)² + (w − w′)² + (h − h′)²."""
    if isinstance(pred, BoxTarget):
        pred = Tensor(pred.as_array())
    target = target.as_array() if isinstance(target, BoxTarget) else np.asarray(target, dtype=np.float64)
    return squared_error(pred, target)


# ===========================
# CABEÇAS
# ===========================
@dataclass(frozen=True)
class HeadConfig:
    grid: GridSpec = GridSpec()
    meta_channels: int = 24
    rough_channels: int = 24
    fine_channels: int = 24
    dropout: float = 0.2


class _Head:
    """Base: guarda o bundle e valida o formato das características."""

    prefix = ''

    def __init__(self, bundle: ModelBundle, feature_shape: Tuple[int, int, int]):
        self.bundle = bundle
        self.feature_shape = tuple(feature_shape)
        self.calls = 0

    @property
    def fingerprint(self) -> str:
        return self.bundle.fingerprint

    def parameters(self) -> List[Tensor]:
        return self.bundle.parameters(self.prefix, trainable_only=True)

    def param_count(self) -> int:
        return self.bundle.count(self.prefix)

    def _check(self, features: Tensor) -> Tensor:
        features = as_tensor(features)
        shape = features.shape
        if shape != self.feature_shape and not (len(shape) == 4 and shape[1:] == self.feature_shape):
            raise ShapeError(f"{type(self).__name__}: características {shape} não conferem com "
                             f"o tronco configurado {self.feature_shape}")
        return features


class MetaHead(_Head):
    """Dois blocos separáveis → média global → linear(3)."""

    prefix = 'meta.'

    def __init__(self, bundle: ModelBundle, feature_shape: Tuple[int, int, int], config: HeadConfig,
                 rng: np.random.Generator):
        super().__init__(bundle, feature_shape)
        c = config.meta_channels
        self.blocks = [
            SeparableBlock(bundle, 'meta.block0', feature_shape[0], c, rng, stride=2),
            SeparableBlock(bundle, 'meta.block1', c, c, rng, stride=1),
        ]
        self.linear = Dense(bundle, 'meta.linear', c, len(Situation), rng)

    def forward(self, features: Tensor) -> Tensor:
        x = self._check(features)
        for block in self.blocks:
            x = block(x)
        return self.linear(global_avg_pool(x))

    def meta_forward(self, features: Tensor) -> MetaOutput:
        self.calls += 1
        with no_grad():
            logits = self.forward(features)
            probs = softmax(logits)
        return MetaOutput(logits.data, probs.data)


class RoughHead(_Head):
    """
    dropout → bloco compartilhado → dois ramos somados → linear(n).

    Ramo A: média global + linear (informação global).
    Ramo B: blocos que reduzem o mapa a R×Cc, projeção 1×1 para um canal e
    achatamento (informação espacial).
    """

    prefix = 'rough.'

    def __init__(self, bundle: ModelBundle, feature_shape: Tuple[int, int, int], config: HeadConfig,
                 rng: np.random.Generator):
        super().__init__(bundle, feature_shape)
        self.grid = config.grid
        self.p = config.dropout
        channels, h, w = feature_shape
        steps = _reduction_steps(h, w, self.grid)
        c = config.rough_channels
        n = self.grid.n
        self.shared = SeparableBlock(bundle, 'rough.shared', channels, c, rng)
        self.dense_a = Dense(bundle, 'rough.branch_a', c, n, rng)
        if steps == 0:
            self.blocks_b = [SeparableBlock(bundle, 'rough.branch_b.block0', c, c, rng, stride=1)]
        else:
            self.blocks_b = [SeparableBlock(bundle, f"rough.branch_b.block{i}", c, c, rng, stride=2)
                             for i in range(steps)]
        self.proj_b = Projection(bundle, 'rough.branch_b.proj', c, 1, rng)
        self.final = Dense(bundle, 'rough.final', n, n, rng)

    def trunk(self, features: Tensor, mode: str = 'eval', rng: Optional[np.random.Generator] = None) -> Tensor:
        x = self._check(features)
        return self.shared(dropout(x, self.p, mode, rng))

    def branch_a(self, x: Tensor) -> Tensor:
        return self.dense_a(global_avg_pool(x))

    def branch_b(self, x: Tensor) -> Tensor:
        for block in self.blocks_b:
            x = block(x)
        y = self.proj_b(x)
        n = self.grid.n
        return reshape(y, (y.shape[0], n) if y.ndim == 4 else (n,))

    def forward(self, features: Tensor, mode: str = 'eval', rng: Optional[np.random.Generator] = None) -> Tensor:
        x = self.trunk(features, mode, rng)
        return self.final(add(self.branch_a(x), self.branch_b(x)))

    def rough_forward(self, features: Tensor) -> np.ndarray:
        self.calls += 1
        with no_grad():
            return self.forward(features).data

    def predict_probabilities(self, features: Tensor) -> np.ndarray:
        with no_grad():
            return softmax(self.forward(features)).data


class FineHead(_Head):
    """Blocos com stride 2 até 1×1 → média global → linear(4) → sigmoide."""

    prefix = 'fine.'

    def __init__(self, bundle: ModelBundle, feature_shape: Tuple[int, int, int], config: HeadConfig,
                 rng: np.random.Generator):
        super().__init__(bundle, feature_shape)
        channels, h, w = feature_shape
        c = config.fine_channels
        n_blocks = max(1, math.ceil(math.log2(max(h, w)))) if max(h, w) > 1 else 1
        self.blocks = []
        in_c = channels
        for i in range(n_blocks):
            self.blocks.append(SeparableBlock(bundle, f"fine.block{i}", in_c, c, rng,
                                              stride=2 if max(h, w) > 1 else 1))
            in_c = c
        self.linear = Dense(bundle, 'fine.linear', c, 4, rng)

    def forward(self, features: Tensor) -> Tensor:
        x = self._check(features)
        for block in self.blocks:
            x = block(x)
        return sigmoid(self.linear(global_avg_pool(x)))

    def fine_forward(self, features: Tensor) -> BoxTarget:
        self.calls += 1
        with no_grad():
            values = self.forward(features).data
        return BoxTarget.from_array(values)


def _reduction_steps(h: int, w: int, grid: GridSpec) -> int:
    """Número de reduções por 2 que levam h×w a R×Cc."""
    if h % grid.rows or w % grid.cols or h // grid.rows != w // grid.cols:
        raise ShapeError(f"Mapa {h}×{w} não é redutível à grade {grid.rows}×{grid.cols}")
    factor = h // grid.rows
    steps = int(round(math.log2(factor)))
    if 2 ** steps != factor:
        raise ShapeError(f"Mapa {h}×{w} não é redutível à grade {grid.rows}×{grid.cols} "
                         f"com strides 2 (fator {factor})")
    return steps


@dataclass
class Heads:
    meta: MetaHead
    rough: RoughHead
    fine: FineHead

    @property
    def grid(self) -> GridSpec:
        return self.rough.grid


def build_heads(bundle: ModelBundle, feature_shape: Tuple[int, int, int], config: HeadConfig,
                rng: np.random.Generator) -> Heads:
    """Registra as três cabeças no bundle (prefixos meta., rough., fine.)."""
    heads = Heads(MetaHead(bundle, feature_shape, config, rng),
                  RoughHead(bundle, feature_shape, config, rng),
                  FineHead(bundle, feature_shape, config, rng))
    logger.info(f"Cabeças construídas: meta {heads.meta.param_count()}, rough {heads.rough.param_count()}, "
                f"fine {heads.fine.param_count()} parâmetros")
    return heads


def meta_forward(head: MetaHead, features: Tensor) -> MetaOutput:
    return head.meta_forward(features)


def rough_forward(head: RoughHead, features: Tensor) -> np.ndarray:
    return head.rough_forward(features)


def fine_forward(head: FineHead, features: Tensor) -> BoxTarget:
    return head.fine_forward(features)


# ===========================
# PREDIÇÃO (AVALIAÇÃO)
# ===========================
ROUGH_SCORE_MODES = ('absolute', 'relative')


def predict_situation(head: MetaHead, features: Tensor) -> Tuple[Situation, float]:
    """Situação prevista e a probabilidade atribuída a ela."""
    out = head.meta_forward(features)
    situation = out.situation
    return situation, float(out.probabilities[int(situation)])


def select_cells(probabilities: np.ndarray, threshold: float, score: str = 'relative') -> List[int]:
    """
    Células cujo score passa o limiar.

    `absolute` compara a probabilidade softmax; `relative` divide pela maior
    probabilidade (a célula de topo sempre passa).
    """
    if not 0.0 < threshold < 1.0:
        raise DataError(f"Limiar da grade deve estar em (0, 1), recebido {threshold}")
    if score not in ROUGH_SCORE_MODES:
        raise DataError(f"Normalização de score desconhecida: {score!r} (opções: {ROUGH_SCORE_MODES})")
    p = np.asarray(probabilities, dtype=np.float64)
    if score == 'relative':
        p = p / p.max()
    return [int(i) for i in np.flatnonzero(p >= threshold)]


def predict_cells(head: RoughHead, features: Tensor, threshold: float = 0.5,
                  score: str = 'relative') -> List[int]:
    return select_cells(head.predict_probabilities(features), threshold, score)


def predict_box(head: FineHead, features: Tensor) -> BoxTarget:
    return head.fine_forward(features)
