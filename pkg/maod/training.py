"""
Treinamento das cabeças sobre o extrator congelado.

Fluxo completo (usado pela CLI):
    1. pré-treino substituto do extrator (texturas) + congelamento
    2. train_head para meta, rough e fine, cada um com seu subconjunto:
       meta usa todas as amostras, rough só FarObjects, fine só CloseObject
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from maod.backbone import (EXTRACTOR_PREFIX, FeatureExtractor, ProxyReport, calibrate_extractor, freeze,
                           proxy_pretrain)
from maod.bundle import ModelBundle
from maod.config import SHOW_PROGRESS
from maod.exceptions import ConfigError, DataError, InvariantViolation
from maod.heads import (ClassWeights, FineHead, GridSpec, MetaHead, RoughHead, Situation,
                        class_weights_from_counts, fine_loss, rough_loss, rough_targets,
                        weighted_ce_loss)
from maod.scenegen import SceneConfig, SceneSample, gen_proxy_dataset
from maod.tensor_core import SGD, Tensor, backward, make_rng, no_grad

logger = logging.getLogger(__name__)

FEATURE_BATCH = 64
HEAD_NAMES = ('meta', 'rough', 'fine')


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.02
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 32
    seed: int = 1
    alpha: Union[str, Tuple[float, ...]] = 'auto'
    clip_norm: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate deve ser > 0, recebido {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs deve ser ≥ 0, recebido {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size deve ser ≥ 1, recebido {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum deve estar em [0, 1), recebido {self.momentum}")
        if self.clip_norm < 0:
            raise ConfigError(f"clip_norm deve ser ≥ 0, recebido {self.clip_norm}")
        if isinstance(self.alpha, str) and self.alpha != 'auto':
            raise ConfigError(f"alpha deve ser 'auto' ou uma lista de pesos, recebido {self.alpha!r}")

    @classmethod
    def from_dict(cls, section: Dict[str, Any], seed: int) -> 'TrainConfig':
        alpha = section.get('alpha', 'auto')
        if not isinstance(alpha, str):
            alpha = tuple(float(a) for a in alpha)
        return cls(learning_rate=float(section['learning_rate']), momentum=float(section['momentum']),
                   epochs=int(section['epochs']), batch_size=int(section['batch_size']),
                   seed=int(seed), alpha=alpha, clip_norm=float(section.get('clip_norm', 0.0)))


@dataclass
class TrainResult:
    name: str
    head: Any
    losses: List[float]
    initial_loss: float
    final_loss: float
    samples: int
    alpha: Optional[Tuple[float, ...]] = None
    extractor_checksum: str = ''

    def to_dict(self) -> Dict[str, Any]:
        return {'head': self.name, 'samples': self.samples, 'epochs': len(self.losses),
                'initial_loss': self.initial_loss, 'final_loss': self.final_loss,
                'alpha': list(self.alpha) if self.alpha else None}


def head_name(head) -> str:
    if isinstance(head, MetaHead):
        return 'meta'
    if isinstance(head, RoughHead):
        return 'rough'
    if isinstance(head, FineHead):
        return 'fine'
    raise DataError(f"Tipo de cabeça desconhecido: {type(head).__name__}")


def select_samples(name: str, samples: Sequence[SceneSample]) -> List[SceneSample]:
    """Amostras que alimentam cada cabeça."""
    if name == 'meta':
        return list(samples)
    wanted = Situation.FAR_OBJECTS if name == 'rough' else Situation.CLOSE_OBJECT
    return [s for s in samples if s.situation == wanted]


def extract_batch(extractor: FeatureExtractor, images: np.ndarray) -> np.ndarray:
    """Mapas de características (N×C×H×W) calculados uma única vez por amostra."""
    chunks = []
    for start in range(0, len(images), FEATURE_BATCH):
        chunks.append(extractor.extract_features(images[start:start + FEATURE_BATCH]).data)
    return np.concatenate(chunks, axis=0)


def rough_class_weights(targets: np.ndarray) -> ClassWeights:
    """α por célula a partir da ocupação (contagem + 1)."""
    occupancy = (np.asarray(targets) > 0).sum(axis=0) + 1
    return class_weights_from_counts(occupancy.tolist())


def _targets(name: str, samples: Sequence[SceneSample], grid: Optional[GridSpec]) -> np.ndarray:
    if name == 'meta':
        return np.asarray([int(s.situation) for s in samples], dtype=np.int64)
    if name == 'rough':
        return np.stack([rough_targets(s.centers, grid) for s in samples])
    return np.stack([s.boxes[0].as_array() for s in samples])


def _alpha(name: str, targets: np.ndarray, config: TrainConfig, k: int) -> Optional[ClassWeights]:
    if name == 'fine':
        return None
    if config.alpha != 'auto':
        if len(config.alpha) != k:
            raise ConfigError(f"alpha explícito com {len(config.alpha)} pesos para {k} saídas")
        return ClassWeights(tuple(config.alpha))
    if name == 'meta':
        return class_weights_from_counts(np.bincount(targets, minlength=k).tolist())
    return rough_class_weights(targets)


def _loss(name: str, head, features: np.ndarray, targets: np.ndarray, alpha: Optional[ClassWeights],
          mode: str = 'eval', rng: Optional[np.random.Generator] = None) -> Tensor:
    x = Tensor(features)
    if name == 'meta':
        return weighted_ce_loss(head.forward(x), targets, alpha)
    if name == 'rough':
        return rough_loss(head.forward(x, mode=mode, rng=rng), targets, alpha)
    return fine_loss(head.forward(x), targets)


def dataset_loss(name: str, head, features: np.ndarray, targets: np.ndarray,
                 alpha: Optional[ClassWeights], batch_size: int = FEATURE_BATCH) -> float:
    """Perda média sobre o conjunto (modo eval, sem grafo)."""
    total = 0.0
    with no_grad():
        for start in range(0, len(targets), batch_size):
            sl = slice(start, start + batch_size)
            total += _loss(name, head, features[sl], targets[sl], alpha).item() * len(targets[sl])
    return total / len(targets)


def train_head(head, dataset: Sequence[SceneSample], config: TrainConfig, bundle: ModelBundle,
               extractor: FeatureExtractor) -> TrainResult:
    """
    Treina uma cabeça com SGD + momento sobre características em cache.

    Args:
        head: MetaHead, RoughHead ou FineHead registrada em `bundle`
        dataset: Amostras de treino (o subconjunto da cabeça é escolhido aqui)
        config: Hiperparâmetros e semente
        bundle: Bundle com extrator e cabeças
        extractor: Extrator já congelado

    Returns:
        TrainResult com a curva de perda por época
    """
    name = head_name(head)
    if bundle.parameters(EXTRACTOR_PREFIX, trainable_only=True):
        raise DataError("O extrator não está congelado: congele 'fe.' antes de treinar as cabeças")
    if head.fingerprint != extractor.fingerprint:
        raise DataError("Cabeça e extrator de arquiteturas diferentes")

    samples = select_samples(name, dataset)
    if not samples:
        raise DataError(f"Nenhuma amostra de treino para a cabeça '{name}'")

    guarded = [EXTRACTOR_PREFIX] + [f"{other}." for other in HEAD_NAMES if other != name]
    before = {prefix: bundle.checksum(prefix) for prefix in guarded}
    grid = head.grid if name == 'rough' else None
    targets = _targets(name, samples, grid)
    features = extract_batch(extractor, np.stack([s.image for s in samples]))
    k = targets.shape[-1] if name == 'rough' else len(Situation)
    alpha = _alpha(name, targets, config, k)

    rng = make_rng(config.seed)
    optimizer = SGD(head.parameters(), config.learning_rate, config.momentum, config.clip_norm)
    initial = dataset_loss(name, head, features, targets, alpha)
    alpha_text = ', '.join(f"{a:.3f}" for a in alpha.alpha) if alpha else '-'
    logger.info(f"🚀 Treinando cabeça '{name}': {len(samples)} amostras, {config.epochs} épocas, "
                f"lr {config.learning_rate}, α [{alpha_text}], perda inicial {initial:.4f}")

    losses: List[float] = []
    for epoch in tqdm(range(config.epochs), desc=f'treino {name}', disable=not SHOW_PROGRESS):
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            optimizer.zero_grad()
            loss = _loss(name, head, features[idx], targets[idx], alpha, mode='train', rng=rng)
            backward(loss)
            optimizer.step()
            epoch_loss += loss.item() * len(idx)
            logger.debug(f"{name} época {epoch + 1} lote {start // config.batch_size}: {loss.item():.5f}")
        losses.append(epoch_loss / len(order))
        logger.info(f"Época {epoch + 1}/{config.epochs} - perda {name} {losses[-1]:.4f}")

    after = {prefix: bundle.checksum(prefix) for prefix in guarded}
    changed = [prefix for prefix in guarded if after[prefix] != before[prefix]]
    if changed:
        raise InvariantViolation(f"Parâmetros fora da cabeça '{name}' mudaram durante o treino: {changed}")

    final = dataset_loss(name, head, features, targets, alpha)
    logger.info(f"✅ Cabeça '{name}' treinada: perda {initial:.4f} → {final:.4f}")
    return TrainResult(name, head, losses, initial, final, len(samples),
                       alpha.alpha if alpha else None, after[EXTRACTOR_PREFIX])


def pretrain_extractor(extractor: FeatureExtractor, bundle: ModelBundle, scene: SceneConfig,
                       section: Dict[str, Any], seed: int,
                       calibration_images: Optional[np.ndarray] = None) -> ProxyReport:
    """
    Pré-treino substituto, calibração de escala e congelamento do extrator.

    Sem ``calibration_images`` a calibração usa as próprias imagens substitutas.
    """
    proxy = gen_proxy_dataset(scene.proxy_samples, seed, scene)
    report = proxy_pretrain(extractor, proxy, int(section['epochs']), make_rng(seed),
                            learning_rate=float(section['learning_rate']),
                            momentum=float(section['momentum']),
                            batch_size=int(section['batch_size']),
                            test_fraction=scene.test_fraction,
                            clip_norm=float(section.get('clip_norm', 0.0)))
    images = proxy.images if calibration_images is None else calibration_images
    calibrate_extractor(extractor, images)
    freeze(bundle, EXTRACTOR_PREFIX)
    return report


def train_heads(models, bundle: ModelBundle, samples: Sequence[SceneSample],
                train_cfg: Dict[str, Dict[str, Any]], seed: int,
                heads: Sequence[str] = HEAD_NAMES) -> Dict[str, TrainResult]:
    """Treina as cabeças pedidas na ordem meta, rough, fine."""
    results = {}
    for name in HEAD_NAMES:
        if name not in heads:
            continue
        config = TrainConfig.from_dict(train_cfg[name], seed)
        results[name] = train_head(getattr(models, name), samples, config, bundle, models.extractor)
    return results
