"""
Blocos reutilizáveis das redes (registram seus parâmetros num ModelBundle).
"""
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from maod.bundle import ModelBundle
from maod.exceptions import ConfigError
from maod.tensor_core import (ConvSpec, Tensor, channel_shuffle, conv2d, fan_in_uniform, he_uniform,
                              linear, relu)

ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    'relu': relu,
    'identity': lambda x: x,
}


def get_activation(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"Ativação desconhecida: {name!r} (opções: {sorted(ACTIVATIONS)})") from None


class SeparableBlock:
    """depthwise K×K (+viés, ativação) → pointwise 1×1 (+viés, ativação)."""

    def __init__(self, bundle: ModelBundle, prefix: str, in_channels: int, out_channels: int,
                 rng: np.random.Generator, kernel_size: int = 3, stride: int = 1,
                 padding: Optional[int] = None, activation: str = 'relu'):
        pad = kernel_size // 2 if padding is None else padding
        self.prefix = prefix
        self.dw_spec = ConvSpec(in_channels, in_channels, kernel_size, stride, pad, 'depthwise')
        self.pw_spec = ConvSpec(in_channels, out_channels, 1, 1, 0, 'pointwise')
        self.activation = get_activation(activation)
        self.dw_weight = bundle.add(f"{prefix}.dw.weight",
                                    he_uniform(self.dw_spec.weight_shape(), kernel_size * kernel_size, rng))
        self.dw_bias = bundle.add(f"{prefix}.dw.bias", np.zeros(in_channels))
        self.pw_weight = bundle.add(f"{prefix}.pw.weight",
                                    he_uniform(self.pw_spec.weight_shape(), in_channels, rng))
        self.pw_bias = bundle.add(f"{prefix}.pw.bias", np.zeros(out_channels))

    def output_shape(self, in_shape: Tuple[int, int, int]) -> Tuple[int, int, int]:
        h, w = self.dw_spec.output_hw(in_shape[1], in_shape[2])
        return self.pw_spec.out_channels, h, w

    def __call__(self, x: Tensor) -> Tensor:
        x = self.activation(conv2d(x, self.dw_weight, self.dw_spec, self.dw_bias))
        return self.activation(conv2d(x, self.pw_weight, self.pw_spec, self.pw_bias))


class ShuffleBlock:
    """
    pointwise agrupada (+relu) → embaralhamento de canais → depthwise K×K
    (sem ativação) → pointwise agrupada (+ativação).

    A última convolução fica em ``pw_weight``/``pw_bias``, como no SeparableBlock.
    """

    def __init__(self, bundle: ModelBundle, prefix: str, in_channels: int, out_channels: int,
                 rng: np.random.Generator, groups: int, kernel_size: int = 3, stride: int = 1,
                 padding: Optional[int] = None, activation: str = 'relu'):
        pad = kernel_size // 2 if padding is None else padding
        self.prefix = prefix
        self.groups = groups
        self.gw_spec = ConvSpec(in_channels, out_channels, 1, 1, 0, 'pointwise', groups)
        self.dw_spec = ConvSpec(out_channels, out_channels, kernel_size, stride, pad, 'depthwise')
        self.pw_spec = ConvSpec(out_channels, out_channels, 1, 1, 0, 'pointwise', groups)
        self.activation = get_activation(activation)
        self.gw_weight = bundle.add(f"{prefix}.gw.weight",
                                    he_uniform(self.gw_spec.weight_shape(), in_channels // groups, rng))
        self.gw_bias = bundle.add(f"{prefix}.gw.bias", np.zeros(out_channels))
        self.dw_weight = bundle.add(f"{prefix}.dw.weight",
                                    fan_in_uniform(self.dw_spec.weight_shape(), kernel_size * kernel_size, rng))
        self.dw_bias = bundle.add(f"{prefix}.dw.bias", np.zeros(out_channels))
        self.pw_weight = bundle.add(f"{prefix}.pw.weight",
                                    he_uniform(self.pw_spec.weight_shape(), out_channels // groups, rng))
        self.pw_bias = bundle.add(f"{prefix}.pw.bias", np.zeros(out_channels))

    def output_shape(self, in_shape: Tuple[int, int, int]) -> Tuple[int, int, int]:
        h, w = self.dw_spec.output_hw(in_shape[1], in_shape[2])
        return self.pw_spec.out_channels, h, w

    def __call__(self, x: Tensor) -> Tensor:
        x = relu(conv2d(x, self.gw_weight, self.gw_spec, self.gw_bias))
        x = channel_shuffle(x, self.groups)
        x = conv2d(x, self.dw_weight, self.dw_spec, self.dw_bias)
        return self.activation(conv2d(x, self.pw_weight, self.pw_spec, self.pw_bias))


class Dense:
    """Camada linear; init 'he' para camadas seguidas de relu, 'fan_in' nas saídas."""

    def __init__(self, bundle: ModelBundle, prefix: str, in_features: int, out_features: int,
                 rng: np.random.Generator, init: str = 'fan_in'):
        init_fn = he_uniform if init == 'he' else fan_in_uniform
        self.prefix = prefix
        self.weight = bundle.add(f"{prefix}.weight", init_fn((out_features, in_features), in_features, rng))
        self.bias = bundle.add(f"{prefix}.bias", np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Projection:
    """Convolução 1×1 sem ativação (reduz canais)."""

    def __init__(self, bundle: ModelBundle, prefix: str, in_channels: int, out_channels: int,
                 rng: np.random.Generator):
        self.spec = ConvSpec(in_channels, out_channels, 1, 1, 0, 'pointwise')
        self.weight = bundle.add(f"{prefix}.weight", fan_in_uniform(self.spec.weight_shape(), in_channels, rng))
        self.bias = bundle.add(f"{prefix}.bias", np.zeros(out_channels))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.spec, self.bias)
