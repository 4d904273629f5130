"""
Extrator de características compartilhado (congelado após o pré-treino).

O pré-treino por tarefa substituta classifica texturas de fundo geradas
pelo scenegen; a cabeça temporária dessa tarefa é descartada ao final.
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from maod.bundle import ModelBundle, freeze
from maod.config import SHOW_PROGRESS
from maod.exceptions import ConfigError, DataError, ShapeError
from maod.layers import Dense, SeparableBlock, ShuffleBlock
from maod.tensor_core import (SGD, ConvSpec, Tensor, backward, global_avg_pool, linear,
                              no_grad, weighted_cross_entropy)

logger = logging.getLogger(__name__)

EXTRACTOR_PREFIX = 'fe.'

__all__ = ['BACKBONE_PRESETS', 'BlockSpec', 'BackboneConfig', 'FeatureExtractor', 'ProxyReport',
           'build_extractor', 'calibrate_extractor', 'extract_features', 'freeze', 'proxy_pretrain']

BLOCK_KINDS = ('separable', 'shuffle')


@dataclass(frozen=True)
class BlockSpec:
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    activation: str = 'relu'
    padding: Optional[int] = None
    kind: str = 'separable'
    groups: int = 1

    def conv_spec(self, in_channels: int) -> ConvSpec:
        pad = self.kernel_size // 2 if self.padding is None else self.padding
        return ConvSpec(in_channels, in_channels, self.kernel_size, self.stride, pad, 'depthwise')


DEFAULT_BLOCKS = (
    BlockSpec(24, 3, 1),
    BlockSpec(48, 3, 2),
    BlockSpec(96, 3, 2),
    BlockSpec(64, 3, 2),
)

# Mesma resolução e largura de saída do 'mobile', com 1×1 agrupadas e embaralhamento
SHUFFLE_BLOCKS = (
    BlockSpec(24, 3, 1),
    BlockSpec(48, 3, 2, kind='shuffle', groups=4),
    BlockSpec(96, 3, 2, kind='shuffle', groups=4),
    BlockSpec(64, 3, 2, kind='shuffle', groups=4),
)

BACKBONE_PRESETS: Dict[str, Tuple[BlockSpec, ...]] = {
    'mobile': DEFAULT_BLOCKS,
    'shuffle': SHUFFLE_BLOCKS,
}


def preset_blocks(name: str) -> List[Dict[str, Any]]:
    """Blocos de um preset no formato da seção 'backbone' do YAML."""
    try:
        return [asdict(b) for b in BACKBONE_PRESETS[name]]
    except KeyError:
        raise ConfigError(f"Backbone desconhecido: {name!r} (opções: {sorted(BACKBONE_PRESETS)})") from None


@dataclass(frozen=True)
class BackboneConfig:
    input_shape: Tuple[int, int, int] = (3, 64, 64)
    blocks: Tuple[BlockSpec, ...] = field(default=DEFAULT_BLOCKS)

    def __post_init__(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape inválido: {self.input_shape}")
        if not self.blocks:
            raise ConfigError("O extrator precisa de ao menos um bloco")
        self.output_shape()

    def output_shape(self) -> Tuple[int, int, int]:
        channels, h, w = self.input_shape
        for i, block in enumerate(self.blocks):
            if block.kind not in BLOCK_KINDS:
                raise ConfigError(f"Bloco {i}: tipo desconhecido {block.kind!r} (opções: {BLOCK_KINDS})")
            if block.kind == 'separable' and block.groups != 1:
                raise ConfigError(f"Bloco {i}: blocos 'separable' não aceitam groups = {block.groups}")
            if block.kind == 'shuffle' and (block.groups < 1 or channels % block.groups
                                            or block.out_channels % block.groups):
                raise ConfigError(f"Bloco {i}: groups = {block.groups} precisa dividir {channels} "
                                  f"e {block.out_channels} canais")
            try:
                h, w = block.conv_spec(channels).output_hw(h, w)
            except ShapeError as e:
                raise ConfigError(f"Bloco {i} reduz o mapa abaixo de 1×1: {e}") from e
            channels = block.out_channels
        return channels, h, w

    @property
    def output_channels(self) -> int:
        return self.blocks[-1].out_channels

    def to_dict(self) -> Dict[str, Any]:
        return {'input_shape': list(self.input_shape),
                'blocks': [asdict(b) for b in self.blocks]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'BackboneConfig':
        try:
            blocks = tuple(BlockSpec(**b) for b in data['blocks'])
            return cls(tuple(data['input_shape']), blocks)
        except (KeyError, TypeError) as e:
            raise ConfigError(f"Seção 'backbone' inválida: {e}") from e

    def fingerprint(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


class FeatureExtractor:
    """Pilha de blocos (separable ou shuffle) com parâmetros sob 'fe.'."""

    def __init__(self, config: BackboneConfig, bundle: ModelBundle, blocks: List[Any]):
        self.config = config
        self.bundle = bundle
        self.blocks = blocks
        self.calls = 0

    @property
    def fingerprint(self) -> str:
        return self.bundle.fingerprint

    @property
    def output_shape(self) -> Tuple[int, int, int]:
        return self.config.output_shape()

    @property
    def frozen(self) -> bool:
        return not self.bundle.parameters(EXTRACTOR_PREFIX, trainable_only=True)

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x

    def validate_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        expected = tuple(self.config.input_shape)
        if image.shape != expected and not (image.ndim == 4 and image.shape[1:] == expected):
            raise ShapeError(f"Imagem {image.shape} não confere com a entrada configurada {expected}")
        if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
            raise DataError("Valores da imagem devem estar em [0, 1]")
        return image

    def extract_features(self, image: np.ndarray) -> Tensor:
        image = self.validate_image(image)
        self.calls += 1
        with no_grad():
            return self.forward(Tensor(image))


def build_extractor(config: BackboneConfig, rng: np.random.Generator) -> Tuple[FeatureExtractor, ModelBundle]:
    """
    Constrói o extrator com inicialização determinística.

    Returns:
        (extrator, bundle) - o bundle usa a impressão digital da configuração
    """
    bundle = ModelBundle(config.fingerprint())
    channels = config.input_shape[0]
    blocks = []
    for i, spec in enumerate(config.blocks):
        if spec.kind == 'shuffle':
            blocks.append(ShuffleBlock(bundle, f"fe.block{i}", channels, spec.out_channels, rng,
                                       groups=spec.groups, kernel_size=spec.kernel_size, stride=spec.stride,
                                       padding=spec.padding, activation=spec.activation))
        else:
            blocks.append(SeparableBlock(bundle, f"fe.block{i}", channels, spec.out_channels, rng,
                                         kernel_size=spec.kernel_size, stride=spec.stride,
                                         padding=spec.padding, activation=spec.activation))
        channels = spec.out_channels
    logger.info(f"Extrator construído: {len(blocks)} blocos, saída {config.output_shape()}, "
                f"{bundle.count(EXTRACTOR_PREFIX)} parâmetros")
    return FeatureExtractor(config, bundle, blocks), bundle


def extract_features(extractor: FeatureExtractor, image: np.ndarray) -> Tensor:
    """Mapa de características de uma imagem (C×H×W em [0, 1])."""
    return extractor.extract_features(image)


@dataclass
class ProxyReport:
    initial_accuracy: float
    final_accuracy: float
    losses: List[float]


def _proxy_accuracy(extractor: FeatureExtractor, head: Dense, images: np.ndarray,
                    labels: np.ndarray, batch_size: int) -> float:
    if len(labels) == 0:
        return 0.0
    correct = 0
    with no_grad():
        for start in range(0, len(labels), batch_size):
            feats = global_avg_pool(extractor.forward(Tensor(images[start:start + batch_size])))
            logits = linear(feats, head.weight, head.bias).data
            correct += int((logits.argmax(axis=1) == labels[start:start + batch_size]).sum())
    return correct / len(labels)


def proxy_pretrain(extractor: FeatureExtractor, proxy_dataset, epochs: int, rng: np.random.Generator,
                   learning_rate: float = 0.02, momentum: float = 0.9, batch_size: int = 32,
                   test_fraction: float = 0.2, clip_norm: float = 0.0) -> ProxyReport:
    """
    Pré-treina o extrator numa tarefa de classificação substituta.

    Args:
        extractor: Extrator ainda não congelado
        proxy_dataset: Objeto com `images` (N×C×H×W), `labels` (N) e `num_classes`
        epochs: Número de épocas (0 = nada muda)
        rng: Gerador para divisão, embaralhamento e cabeça temporária
        clip_norm: Norma global máxima dos gradientes (0 = sem corte)

    Returns:
        ProxyReport com acurácias no conjunto separado antes/depois e curva de perda
    """
    images = np.asarray(proxy_dataset.images, dtype=np.float64)
    labels = np.asarray(proxy_dataset.labels, dtype=np.int64)
    if len(labels) == 0:
        raise DataError("Dataset substituto vazio")
    if epochs < 0:
        raise DataError(f"epochs deve ser ≥ 0, recebido {epochs}")
    if extractor.frozen:
        raise DataError("O extrator já está congelado; o pré-treino deve vir antes do freeze")

    order = rng.permutation(len(labels))
    n_test = max(1, int(round(len(labels) * test_fraction))) if len(labels) > 1 else 0
    test_idx, train_idx = order[:n_test], order[n_test:]

    num_classes = int(proxy_dataset.num_classes)
    head_bundle = ModelBundle(extractor.fingerprint)
    head = Dense(head_bundle, 'proxy.linear', extractor.config.output_channels, num_classes, rng)
    initial = _proxy_accuracy(extractor, head, images[test_idx], labels[test_idx], batch_size)

    params = extractor.bundle.parameters(EXTRACTOR_PREFIX, trainable_only=True) + head_bundle.parameters()
    optimizer = SGD(params, learning_rate, momentum, clip_norm)
    alpha = np.ones(num_classes)
    losses = []
    logger.info(f"🚀 Pré-treino substituto: {len(train_idx)} treino / {len(test_idx)} teste, "
                f"{epochs} épocas, acurácia inicial {initial:.3f}")
    for epoch in tqdm(range(epochs), desc='pré-treino', disable=not SHOW_PROGRESS):
        shuffled = rng.permutation(train_idx)
        epoch_loss = 0.0
        for start in range(0, len(shuffled), batch_size):
            idx = shuffled[start:start + batch_size]
            targets = np.eye(num_classes)[labels[idx]]
            optimizer.zero_grad()
            feats = global_avg_pool(extractor.forward(Tensor(images[idx])))
            loss = weighted_cross_entropy(head(feats), targets, alpha)
            backward(loss)
            optimizer.step()
            epoch_loss += loss.item() * len(idx)
        losses.append(epoch_loss / max(1, len(shuffled)))
        logger.info(f"Época {epoch + 1}/{epochs} - perda substituta {losses[-1]:.4f}")

    final = _proxy_accuracy(extractor, head, images[test_idx], labels[test_idx], batch_size)
    logger.info(f"✅ Pré-treino concluído: acurácia {initial:.3f} → {final:.3f} (cabeça temporária descartada)")
    return ProxyReport(initial, final, losses)


def calibrate_extractor(extractor: FeatureExtractor, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """
    Reescala cada canal de saída do extrator para RMS 1 sobre ``images``.

    O fator é absorvido pelo último pointwise (peso e viés), então o extrator
    continua sendo uma função fixa da imagem. Canais mortos (RMS 0) ficam intactos.

    Returns:
        Fatores aplicados por canal
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise DataError(f"Calibração exige um lote N×C×H×W não vazio, recebido {images.shape}")
    if extractor.frozen:
        raise DataError("Calibre o extrator antes do freeze")
    sq_sum = np.zeros(extractor.config.output_channels)
    count = 0
    with no_grad():
        for start in range(0, len(images), batch_size):
            feats = extractor.forward(Tensor(images[start:start + batch_size])).data
            sq_sum += np.sum(feats ** 2, axis=(0, 2, 3))
            count += feats.shape[0] * feats.shape[2] * feats.shape[3]
    rms = np.sqrt(sq_sum / count)
    live = rms > 0
    scale = np.ones_like(rms)
    scale[live] = 1.0 / rms[live]

    # relu e identidade comutam com escala positiva
    last = extractor.blocks[-1]
    last.pw_weight.data *= scale[:, None, None, None]
    last.pw_bias.data *= scale
    logger.info(f"📏 Extrator calibrado em {len(images)} imagens: RMS {rms.min():.3g}..{rms.max():.3g} → 1 "
                f"({int((~live).sum())} canais mortos)")
    return scale
