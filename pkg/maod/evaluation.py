"""
Métricas de avaliação do MAOD.

    precision = T / NP      recall = T / NT      F1 = 2·P·R / (P + R)
    cpu_time  = TT / NF

T é o tamanho do emparelhamento máximo entre predições e alvos (cada alvo
conta no máximo uma vez). Casos degenerados (NP = 0, NT = 0 ou P + R = 0)
têm F1 = 0 e são sinalizados no relatório.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from maod.exceptions import DataError
from maod.heads import (ROUGH_SCORE_MODES, BoxTarget, GridSpec, Situation,
                        predict_box, predict_cells, predict_situation)
from maod.scenegen import SceneSample

logger = logging.getLogger(__name__)


def f1(T: int, NP: int, NT: int) -> float:
    """F1 a partir das contagens; 0 quando indefinido."""
    if min(T, NP, NT) < 0:
        raise DataError(f"Contagens negativas: T={T}, NP={NP}, NT={NT}")
    if T > NP or T > NT:
        raise DataError(f"Contagens inconsistentes: T={T} > min(NP={NP}, NT={NT})")
    if NP == 0 or NT == 0:
        return 0.0
    precision, recall = T / NP, T / NT
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class Metrics:
    T: int = 0
    NP: int = 0
    NT: int = 0
    TT: Optional[float] = None
    NF: Optional[int] = None

    def __post_init__(self):
        f1(self.T, self.NP, self.NT)

    @property
    def precision(self) -> float:
        return self.T / self.NP if self.NP > 0 else 0.0

    @property
    def recall(self) -> float:
        return self.T / self.NT if self.NT > 0 else 0.0

    @property
    def f1(self) -> float:
        return f1(self.T, self.NP, self.NT)

    @property
    def degenerate(self) -> bool:
        return self.NP == 0 or self.NT == 0 or self.precision + self.recall == 0

    @property
    def cpu_time(self) -> Optional[float]:
        if self.TT is None or not self.NF:
            return None
        return self.TT / self.NF

    def update(self, matched: int, predictions: int, targets: int):
        self.T += matched
        self.NP += predictions
        self.NT += targets

    def to_dict(self) -> Dict[str, Any]:
        return {'T': self.T, 'NP': self.NP, 'NT': self.NT, 'precision': self.precision,
                'recall': self.recall, 'f1': self.f1, 'degenerate': self.degenerate,
                'cpu_time': self.cpu_time}


@dataclass
class ConfusionMatrix:
    """Linhas = situação real, colunas = situação prevista."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((len(Situation), len(Situation)), dtype=np.int64))

    def add(self, actual: Situation, predicted: Situation):
        self.counts[int(actual), int(predicted)] += 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else 0.0

    def row_sums(self) -> List[int]:
        return [int(v) for v in self.counts.sum(axis=1)]

    def to_frame(self) -> pd.DataFrame:
        labels = [s.label for s in Situation]
        return pd.DataFrame(self.counts, index=pd.Index(labels, name='actual'), columns=labels)


# ===========================
# EMPARELHAMENTO
# ===========================
def max_matching(adjacency: Sequence[Sequence[int]], n_targets: int) -> int:
    """
    Emparelhamento bipartido máximo (caminhos aumentantes).

    Args:
        adjacency: Para cada predição, os índices dos alvos compatíveis
        n_targets: Número de alvos
    """
    owner = [-1] * n_targets

    def _augment(p: int, seen: List[bool]) -> bool:
        for t in adjacency[p]:
            if seen[t]:
                continue
            seen[t] = True
            if owner[t] == -1 or _augment(owner[t], seen):
                owner[t] = p
                return True
        return False

    return sum(1 for p in range(len(adjacency)) if _augment(p, [False] * n_targets))


def match_count(predictions: Sequence[Any], targets: Sequence[Any],
                is_match: Callable[[Any, Any], bool]) -> int:
    adjacency = [[j for j, t in enumerate(targets) if is_match(p, t)] for p in predictions]
    return max_matching(adjacency, len(targets))


def cell_rule(grid: GridSpec) -> Callable[[int, Tuple[float, float]], bool]:
    """Predição de célula acerta se a célula contém o centro do alvo."""
    return lambda cell, center: grid.cell_index(center[0], center[1]) == cell


def iou_rule(threshold: float) -> Callable[[BoxTarget, BoxTarget], bool]:
    return lambda pred, target: pred.iou(target) >= threshold


# ===========================
# PREDITORES
# ===========================
class ModelPredictor:
    """Predições dos modelos treinados (extração por amostra)."""

    def __init__(self, models):
        self.models = models

    def features(self, sample: SceneSample):
        return self.models.extractor.extract_features(sample.image)

    def predict_situation(self, sample: SceneSample) -> Tuple[Situation, float]:
        return predict_situation(self.models.meta, self.features(sample))

    def predict_cells(self, sample: SceneSample, threshold: float, score: str) -> List[int]:
        return predict_cells(self.models.rough, self.features(sample), threshold, score)

    def predict_box(self, sample: SceneSample) -> BoxTarget:
        return predict_box(self.models.fine, self.features(sample))


class OraclePredictor:
    """Predições perfeitas a partir dos rótulos (validação do protocolo de avaliação)."""

    def __init__(self, grid: GridSpec):
        self.grid = grid

    def predict_situation(self, sample: SceneSample) -> Tuple[Situation, float]:
        return sample.situation, 1.0

    def predict_cells(self, sample: SceneSample, threshold: float, score: str) -> List[int]:
        return sorted({self.grid.cell_index(x, y) for x, y in sample.centers})

    def predict_box(self, sample: SceneSample) -> BoxTarget:
        return sample.boxes[0]


# ===========================
# AVALIAÇÃO POR CABEÇA
# ===========================
@dataclass
class MetaReport:
    accuracy: float
    confusion: ConfusionMatrix
    per_class: Dict[str, Dict[str, Any]]
    errors: List[Dict[str, Any]]
    samples: int


@dataclass
class FineReport:
    metrics: Metrics
    mean_iou: float
    ious: List[float]


def _require(samples: Sequence[SceneSample], what: str):
    if len(samples) == 0:
        raise DataError(f"Conjunto de teste vazio para {what}")


def evaluate_meta(predictor, samples: Sequence[SceneSample]) -> MetaReport:
    """Acurácia, matriz de confusão e P/R/F1 por situação."""
    _require(samples, 'o meta classificador')
    confusion = ConfusionMatrix()
    errors = []
    for index, sample in enumerate(samples):
        predicted, confidence = predictor.predict_situation(sample)
        confusion.add(sample.situation, predicted)
        if predicted != sample.situation:
            errors.append({'index': index, 'actual': sample.situation.label,
                           'predicted': Situation(predicted).label, 'confidence': confidence})

    per_class = {}
    for sit in Situation:
        i = int(sit)
        tp = int(confusion.counts[i, i])
        metrics = Metrics(tp, int(confusion.counts[:, i].sum()), int(confusion.counts[i].sum()))
        per_class[sit.label] = {**metrics.to_dict(), 'support': metrics.NT}
    errors.sort(key=lambda e: e['confidence'])

    report = MetaReport(confusion.accuracy, confusion, per_class, errors, len(samples))
    logger.info(f"📈 Meta: acurácia {report.accuracy:.3f} em {len(samples)} amostras, {len(errors)} erros")
    return report


def evaluate_rough(predictor, samples: Sequence[SceneSample], grid: GridSpec,
                   score_threshold: float = 0.5, score: str = 'relative') -> Metrics:
    """T, NP e NT sobre as amostras FarObjects (regra de contenção de célula)."""
    if not 0.0 < score_threshold < 1.0:
        raise DataError(f"score_threshold deve estar em (0, 1), recebido {score_threshold}")
    if score not in ROUGH_SCORE_MODES:
        raise DataError(f"Normalização de score desconhecida: {score!r}")
    far = [s for s in samples if s.situation == Situation.FAR_OBJECTS]
    _require(far, 'a cabeça grossa')
    rule = cell_rule(grid)
    metrics = Metrics()
    for sample in far:
        cells = predictor.predict_cells(sample, score_threshold, score)
        centers = sample.centers
        metrics.update(match_count(cells, centers, rule), len(cells), len(centers))
    logger.info(f"📈 Rough: T={metrics.T}, NP={metrics.NP}, NT={metrics.NT}, F1 {metrics.f1:.3f} "
                f"(limiar {score_threshold}, score {score})")
    return metrics


def evaluate_fine(predictor, samples: Sequence[SceneSample], iou_threshold: float = 0.5) -> FineReport:
    """Uma predição por amostra CloseObject; acerto quando IoU ≥ limiar."""
    close = [s for s in samples if s.situation == Situation.CLOSE_OBJECT]
    _require(close, 'a cabeça fina')
    rule = iou_rule(iou_threshold)
    metrics = Metrics()
    ious = []
    for sample in close:
        box = predictor.predict_box(sample)
        ious.append(box.iou(sample.boxes[0]))
        metrics.update(match_count([box], sample.boxes[:1], rule), 1, 1)
    report = FineReport(metrics, float(np.mean(ious)), ious)
    logger.info(f"📈 Fine: IoU médio {report.mean_iou:.3f}, F1 {metrics.f1:.3f} (IoU ≥ {iou_threshold})")
    return report


def metrics_frame(rows: Dict[str, Metrics]) -> pd.DataFrame:
    """Tabela T, NP, NT, precision, recall, F1, cpu_time por estágio."""
    records = [{'stage': stage, **m.to_dict()} for stage, m in rows.items()]
    return pd.DataFrame(records, columns=['stage', 'T', 'NP', 'NT', 'precision', 'recall', 'f1',
                                          'degenerate', 'cpu_time'])
