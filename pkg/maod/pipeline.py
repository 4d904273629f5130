"""
Laço de despacho do MAOD: uma extração compartilhada por frame, um veredito
do meta classificador e no máximo uma cabeça de detecção.

    NoObject    → Nothing (volta para a aquisição)
    FarObjects  → RoughCell (célula de maior score + centro geométrico)
    CloseObject → FineBox (caixa regredida)
"""
import logging
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from maod.backbone import BackboneConfig, FeatureExtractor, build_extractor
from maod.bundle import ModelBundle
from maod.checkpoint import load_checkpoint
from maod.exceptions import CheckpointError, DataError
from maod.heads import (BoxTarget, FineHead, GridSpec, HeadConfig, MetaHead, RoughHead,
                        Situation, build_heads)
from maod.tensor_core import make_rng

logger = logging.getLogger(__name__)

CHECKPOINT_NAMES = {
    'extractor': 'extractor.ckpt',
    'meta': 'meta.ckpt',
    'rough': 'rough.ckpt',
    'fine': 'fine.ckpt',
}

MIN_PROBE_TRIALS = 30


@dataclass(frozen=True)
class Nothing:
    pass


@dataclass(frozen=True)
class RoughCell:
    index: int
    center: Tuple[float, float]


@dataclass(frozen=True)
class FineBox:
    box: BoxTarget


DetectionResult = Union[Nothing, RoughCell, FineBox]

_VERDICT_OF = {Nothing: Situation.NO_OBJECT, RoughCell: Situation.FAR_OBJECTS, FineBox: Situation.CLOSE_OBJECT}


def verdict_of(result: DetectionResult) -> Situation:
    return _VERDICT_OF[type(result)]


def anchor_point(result: DetectionResult) -> Optional[Tuple[float, float]]:
    """
    Ponto da imagem (normalizado) que toca o chão: centro da célula ou
    base da caixa. None para Nothing.
    """
    if isinstance(result, RoughCell):
        return result.center
    if isinstance(result, FineBox):
        box = result.box
        return box.x, min(1.0, box.y + box.h / 2)
    return None


@dataclass
class TimingReport:
    extract: float
    meta: float
    head: float
    total: float
    frames: int = 1
    total_time: Optional[float] = None

    def __post_init__(self):
        if self.frames < 1:
            raise DataError(f"TimingReport exige NF ≥ 1, recebido {self.frames}")
        if self.total_time is None:
            self.total_time = self.total * self.frames

    @property
    def cpu_time(self) -> float:
        """TT / NF."""
        return self.total_time / self.frames


@dataclass
class MAODModels:
    extractor: FeatureExtractor
    meta: MetaHead
    rough: RoughHead
    fine: FineHead

    def __post_init__(self):
        """As cabeças precisam viver no mesmo bundle do extrator que as alimenta."""
        expected = self.extractor.fingerprint
        for name in ('meta', 'rough', 'fine'):
            head = getattr(self, name)
            if head.fingerprint != expected:
                raise CheckpointError(f"Cabeça '{name}' construída para outra arquitetura de extrator "
                                      f"({head.fingerprint[:12]}… vs {expected[:12]}…)",
                                      code=CheckpointError.FINGERPRINT_MISMATCH)
            if head.bundle is not self.extractor.bundle:
                raise CheckpointError(f"Cabeça '{name}' pertence a outro bundle: seus pesos não foram "
                                      f"treinados sobre este extrator",
                                      code=CheckpointError.FINGERPRINT_MISMATCH)

    @property
    def grid(self) -> GridSpec:
        return self.rough.grid


def build_models(backbone: BackboneConfig, heads: HeadConfig,
                 rng: np.random.Generator) -> Tuple[MAODModels, ModelBundle]:
    """Extrator + três cabeças num único bundle."""
    extractor, bundle = build_extractor(backbone, rng)
    built = build_heads(bundle, backbone.output_shape(), heads, rng)
    return MAODModels(extractor, built.meta, built.rough, built.fine), bundle


def load_models(checkpoint_dir: Union[str, Path], backbone: BackboneConfig,
                heads: HeadConfig) -> Tuple[MAODModels, ModelBundle]:
    """Constrói a arquitetura e carrega os quatro checkpoints por cima."""
    checkpoint_dir = Path(checkpoint_dir)
    models, bundle = build_models(backbone, heads, make_rng(0))
    for part, filename in CHECKPOINT_NAMES.items():
        path = checkpoint_dir / filename
        if not path.exists():
            raise DataError(f"Checkpoint ausente: {path}")
        updated = bundle.assign_from(load_checkpoint(path))
        logger.info(f"📦 {part}: {updated} arrays carregados de {path}")
    return models, bundle


class MAODPipeline:
    """Processa um frame por vez (contrato do robô)."""

    def __init__(self, models: MAODModels):
        self.models = models
        self.counters: Counter = Counter()

    def process_frame(self, image: np.ndarray) -> Tuple[DetectionResult, TimingReport]:
        models = self.models
        t0 = time.perf_counter()
        features = models.extractor.extract_features(image)
        self.counters['extract'] += 1
        t1 = time.perf_counter()
        verdict = models.meta.meta_forward(features).situation
        self.counters['meta'] += 1
        t2 = time.perf_counter()

        if verdict == Situation.NO_OBJECT:
            result: DetectionResult = Nothing()
        elif verdict == Situation.FAR_OBJECTS:
            scores = models.rough.rough_forward(features)
            index = int(np.argmax(scores))
            result = RoughCell(index, models.grid.cell_center(index))
            self.counters['rough'] += 1
        else:
            result = FineBox(models.fine.fine_forward(features))
            self.counters['fine'] += 1
        t3 = time.perf_counter()

        head_time = t3 - t2 if verdict != Situation.NO_OBJECT else 0.0
        logger.debug(f"Frame: veredito {verdict.label}, resultado {result}")
        return result, TimingReport(t1 - t0, t2 - t1, head_time, t3 - t0)

    def run_sequence(self, frames: Sequence[np.ndarray]) -> Tuple[List[DetectionResult], TimingReport]:
        """Processa a sequência e agrega os tempos (cpu_time = TT / NF)."""
        if len(frames) == 0:
            raise DataError("Sequência vazia: NF deve ser ≥ 1")
        results, timings = [], []
        for frame in frames:
            result, timing = self.process_frame(frame)
            results.append(result)
            timings.append(timing)
        nf = len(timings)
        total_time = float(sum(t.total for t in timings))
        aggregate = TimingReport(
            extract=float(np.mean([t.extract for t in timings])),
            meta=float(np.mean([t.meta for t in timings])),
            head=float(np.mean([t.head for t in timings])),
            total=total_time / nf,
            frames=nf,
            total_time=total_time,
        )
        logger.info(f"Sequência: NF={nf}, TT={total_time:.4f}s, cpu_time={aggregate.cpu_time:.5f}s/frame")
        return results, aggregate


def process_frame(image: np.ndarray, models: MAODModels) -> Tuple[DetectionResult, TimingReport]:
    return MAODPipeline(models).process_frame(image)


def run_sequence(frames: Sequence[np.ndarray], models: MAODModels) -> Tuple[List[DetectionResult], TimingReport]:
    return MAODPipeline(models).run_sequence(frames)


# ===========================
# AMORTIZAÇÃO
# ===========================
@dataclass
class AmortizationReport:
    trials: int
    head: str
    shared_time: float
    unshared_time: float
    head_only_time: float
    head_stage_time: float
    meta_stage_time: float
    meta_overhead: float
    samples: Dict[str, List[float]]

    @property
    def ratio(self) -> float:
        return self.unshared_time / self.shared_time

    @property
    def meta_share(self) -> float:
        return self.meta_stage_time / self.shared_time


def amortization_probe(image: np.ndarray, models: MAODModels, trials: int) -> AmortizationReport:
    """
    Compara o pipeline com mapa compartilhado contra meta e cabeça com
    extrações próprias. Sempre roda uma cabeça de detecção (fina se o
    veredito for CloseObject, grossa caso contrário) para que as duas
    decomposições sejam comparáveis.
    """
    if trials < MIN_PROBE_TRIALS:
        raise DataError(f"amortization_probe exige ao menos {MIN_PROBE_TRIALS} tentativas, recebido {trials}")

    extractor, meta = models.extractor, models.meta
    verdict = meta.meta_forward(extractor.extract_features(image)).situation
    if verdict == Situation.CLOSE_OBJECT:
        head_name, run_head = 'fine', models.fine.fine_forward
    else:
        head_name, run_head = 'rough', models.rough.rough_forward

    samples: Dict[str, List[float]] = {k: [] for k in ('shared', 'unshared', 'head_only',
                                                       'extract', 'meta', 'head')}
    clock = time.perf_counter
    for _ in range(trials):
        t0 = clock()
        features = extractor.extract_features(image)
        t1 = clock()
        meta.meta_forward(features)
        t2 = clock()
        run_head(features)
        t3 = clock()
        samples['shared'].append(t3 - t0)
        samples['extract'].append(t1 - t0)
        samples['meta'].append(t2 - t1)
        samples['head'].append(t3 - t2)

        t0 = clock()
        meta.meta_forward(extractor.extract_features(image))
        run_head(extractor.extract_features(image))
        samples['unshared'].append(clock() - t0)

        t0 = clock()
        run_head(extractor.extract_features(image))
        samples['head_only'].append(clock() - t0)

    med = {k: float(np.median(v)) for k, v in samples.items()}
    report = AmortizationReport(trials, head_name, med['shared'], med['unshared'], med['head_only'],
                                med['head'], med['meta'], med['shared'] - med['head_only'], samples)
    logger.info(f"⏱️ Amortização ({trials} tentativas, cabeça {head_name}): compartilhado "
                f"{report.shared_time * 1e3:.2f} ms, separado {report.unshared_time * 1e3:.2f} ms, "
                f"razão {report.ratio:.2f}, fração meta {report.meta_share:.1%}")
    return report


def timing_frame(samples: Dict[str, Sequence[float]]) -> pd.DataFrame:
    """Tabela stage, median_s, p90_s."""
    rows = [{'stage': stage, 'median_s': float(np.median(values)),
             'p90_s': float(np.percentile(values, 90))}
            for stage, values in samples.items() if len(values) > 0]
    return pd.DataFrame(rows, columns=['stage', 'median_s', 'p90_s'])
