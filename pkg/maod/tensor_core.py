"""
Núcleo numérico do MAOD: tensores em numpy com autodiferenciação reversa.

Cada operação devolve um `Tensor` novo e, quando algum pai exige gradiente
(e o grafo está ativo), guarda um fechamento `_backward` que recebe o
gradiente da saída e devolve os gradientes dos pais. `backward(loss)`
percorre o grafo em ordem topológica reversa.

Convenções:
    - float64 em todo lugar
    - convolução = correlação cruzada (sem inverter o kernel)
    - operações aceitam um eixo de lote opcional na frente (N×C×H×W, N×F)
"""
import contextlib
import logging
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from maod.exceptions import DataError, GraphError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence[float], float]

_TINY = np.finfo(np.float64).tiny
_ONE_MINUS = np.nextafter(1.0, 0.0)

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, 'enabled', True)


@contextlib.contextmanager
def no_grad():
    """Desativa a gravação do grafo dentro do bloco (inferência)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def make_rng(seed: Optional[int]) -> np.random.Generator:
    """Único tipo de gerador usado no projeto (PCG64 do numpy)."""
    return np.random.default_rng(seed)


class Tensor:
    """Array denso float64 com buffer de gradiente opcional."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() exige tensor de um elemento, recebido {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other: 'Tensor') -> 'Tensor':
        return add(self, other)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Propaga o gradiente de uma perda escalar até as folhas treináveis.

    Folhas congeladas (requires_grad=False) nunca recebem buffer.
    """
    if loss._backward is None:
        raise GraphError("backward() sem forward gravado: o tensor não tem grafo "
                         "(folha, no_grad() ativo ou nenhum parâmetro treinável)")
    if loss.data.size != 1:
        raise GraphError(f"A perda precisa ser escalar, recebido formato {loss.shape}")

    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad


# ===========================
# CONVOLUÇÃO
# ===========================
CONV_MODES = ('standard', 'depthwise', 'pointwise')


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    mode: str = 'standard'
    groups: int = 1

    def __post_init__(self):
        for field_name in ('in_channels', 'out_channels', 'kernel_size', 'stride', 'groups'):
            value = getattr(self, field_name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ShapeError(f"ConvSpec.{field_name} deve ser inteiro ≥ 1, recebido {value!r}")
        if self.padding < 0:
            raise ShapeError(f"ConvSpec.padding deve ser ≥ 0, recebido {self.padding}")
        if self.mode not in CONV_MODES:
            raise ShapeError(f"Modo de convolução desconhecido: {self.mode!r}")
        if self.mode == 'depthwise' and self.out_channels % self.in_channels != 0:
            raise ShapeError(f"depthwise exige out_channels múltiplo de in_channels "
                             f"({self.out_channels} vs {self.in_channels})")
        if self.mode == 'pointwise' and self.kernel_size != 1:
            raise ShapeError(f"pointwise exige kernel_size = 1, recebido {self.kernel_size}")
        if self.groups > 1:
            if self.mode == 'depthwise':
                raise ShapeError("depthwise já é agrupada por canal; use groups = 1")
            if self.in_channels % self.groups or self.out_channels % self.groups:
                raise ShapeError(f"groups = {self.groups} precisa dividir in_channels ({self.in_channels}) "
                                 f"e out_channels ({self.out_channels})")

    @property
    def multiplier(self) -> int:
        return self.out_channels // self.in_channels

    def weight_shape(self) -> Tuple[int, int, int, int]:
        k = self.kernel_size
        if self.mode == 'depthwise':
            return (self.out_channels, 1, k, k)
        return (self.out_channels, self.in_channels // self.groups, k, k)

    def output_hw(self, height: int, width: int) -> Tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        if height + 2 * p < k or width + 2 * p < k:
            raise ShapeError(f"Entrada espacial {height}×{width} (padding {p}) menor que o kernel {k}")
        return (height + 2 * p - k) // s + 1, (width + 2 * p - k) // s + 1


def standard_param_count(in_channels: int, out_channels: int, kernel_size: int) -> int:
    return in_channels * out_channels * kernel_size * kernel_size


def separable_param_count(in_channels: int, out_channels: int, kernel_size: int) -> int:
    return in_channels * kernel_size * kernel_size + in_channels * out_channels


def conv_param_count(spec: ConvSpec, bias: bool = False) -> int:
    return int(np.prod(spec.weight_shape())) + (spec.out_channels if bias else 0)


def conv2d(x: Tensor, weights: Tensor, spec: ConvSpec, bias: Optional[Tensor] = None) -> Tensor:
    """
    Correlação cruzada 2D (C×H×W ou N×C×H×W).

    Args:
        x: Entrada
        weights: O×(C/groups)×K×K (standard/pointwise) ou O×1×K×K (depthwise)
        spec: Geometria da convolução
        bias: Viés opcional por canal de saída

    Returns:
        Tensor O×H'×W' (ou N×O×H'×W')
    """
    x, weights = as_tensor(x), as_tensor(weights)
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d espera C×H×W ou N×C×H×W, recebido {x.shape}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    if c != spec.in_channels:
        raise ShapeError(f"Entrada {x.shape} tem {c} canais, pesos {weights.shape} esperam {spec.in_channels}")
    if weights.shape != spec.weight_shape():
        raise ShapeError(f"Pesos {weights.shape} incompatíveis com a entrada {x.shape} "
                         f"(esperado {spec.weight_shape()} para {spec.mode})")
    o, k, s, p = spec.out_channels, spec.kernel_size, spec.stride, spec.padding
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"Viés {bias.shape} incompatível com {o} canais de saída")
    ho, wo = spec.output_hw(h, w)

    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]

    if spec.mode == 'depthwise':
        m = spec.multiplier
        wd = weights.data.reshape(c, m, k, k)
        out = np.einsum('nchwkl,cmkl->ncmhw', windows, wd).reshape(n, o, ho, wo)
        cols = None
    elif spec.groups > 1:
        gr = spec.groups
        wd = weights.data.reshape(gr, o // gr, (c // gr) * k * k)
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, gr, (c // gr) * k * k)
        out = np.einsum('rgf,gof->rgo', cols, wd).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    else:
        wd = weights.data.reshape(o, c * k * k)
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        out = (cols @ wd.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _scatter(gxp, tap_grad):
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += tap_grad(i, j)

    def _backward(g):
        g4 = g if batched else g[None]
        gx = gw = gb = None
        if spec.mode == 'depthwise':
            g5 = g4.reshape(n, c, spec.multiplier, ho, wo)
            if weights.requires_grad:
                gw = np.einsum('nchwkl,ncmhw->cmkl', windows, g5).reshape(weights.shape)
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                _scatter(gxp, lambda i, j: np.einsum('ncmhw,cm->nchw', g5, wd[:, :, i, j]))
                gx = gxp[:, :, p:p + h, p:p + w]
        elif spec.groups > 1:
            g3 = g4.transpose(0, 2, 3, 1).reshape(-1, spec.groups, o // spec.groups)
            if weights.requires_grad:
                gw = np.einsum('rgo,rgf->gof', g3, cols).reshape(weights.shape)
            if x.requires_grad:
                dcols = np.einsum('rgo,gof->rgf', g3, wd).reshape(n, ho, wo, c, k, k)
                gxp = np.zeros_like(xp)
                _scatter(gxp, lambda i, j: dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
                gx = gxp[:, :, p:p + h, p:p + w]
        else:
            g2 = g4.transpose(0, 2, 3, 1).reshape(-1, o)
            if weights.requires_grad:
                gw = (g2.T @ cols).reshape(weights.shape)
            if x.requires_grad:
                dcols = (g2 @ wd).reshape(n, ho, wo, c, k, k)
                gxp = np.zeros_like(xp)
                _scatter(gxp, lambda i, j: dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
                gx = gxp[:, :, p:p + h, p:p + w]
        if gx is not None and not batched:
            gx = gx[0]
        if bias is not None and bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        return gx, gw, gb

    if not batched:
        out = out[0]
    parents = (x, weights, bias) if bias is not None else (x, weights)
    return _result(out, parents, _backward)


def depthwise_separable(x: Tensor, dw_weights: Tensor, pw_weights: Tensor,
                        dw_bias: Optional[Tensor] = None, pw_bias: Optional[Tensor] = None,
                        stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """Convolução depthwise por canal seguida de convolução 1×1 (padding 'same' por padrão)."""
    x, dw_weights, pw_weights = as_tensor(x), as_tensor(dw_weights), as_tensor(pw_weights)
    if x.ndim not in (3, 4) or dw_weights.ndim != 4 or pw_weights.ndim != 4:
        raise ShapeError(f"Formatos inválidos: entrada {x.shape}, depthwise {dw_weights.shape}, "
                         f"pointwise {pw_weights.shape}")
    channels = x.shape[-3]
    mid = dw_weights.shape[0]
    kernel = dw_weights.shape[-1]
    if dw_weights.shape[1] != 1 or mid % channels != 0:
        raise ShapeError(f"Pesos depthwise {dw_weights.shape} incompatíveis com {channels} canais de entrada")
    if pw_weights.shape[1] != mid or pw_weights.shape[2:] != (1, 1):
        raise ShapeError(f"Canais entre estágios não conferem: depthwise produz {mid}, "
                         f"pointwise {pw_weights.shape} espera {pw_weights.shape[1]}")
    pad = kernel // 2 if padding is None else padding
    dw_spec = ConvSpec(channels, mid, kernel, stride, pad, 'depthwise')
    pw_spec = ConvSpec(mid, pw_weights.shape[0], 1, 1, 0, 'pointwise')
    return conv2d(conv2d(x, dw_weights, dw_spec, dw_bias), pw_weights, pw_spec, pw_bias)


# ===========================
# POOLING, LINEAR, FORMATO
# ===========================
def global_avg_pool(x: Tensor) -> Tensor:
    """C×H×W → C (ou N×C×H×W → N×C)."""
    x = as_tensor(x)
    if x.ndim not in (3, 4) or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"global_avg_pool espera C×H×W ou N×C×H×W, recebido {x.shape}")
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1))

    def _backward(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), x.shape).copy(),)

    return _result(out, (x,), _backward)


def linear(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """output = weights · x + bias (x com N ou B×N)."""
    x, weights = as_tensor(x), as_tensor(weights)
    if weights.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"linear: entrada {x.shape} incompatível com pesos {weights.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weights.shape[0],):
            raise ShapeError(f"linear: viés {bias.shape} incompatível com pesos {weights.shape}")
    out = x.data @ weights.data.T
    if bias is not None:
        out = out + bias.data

    def _backward(g):
        gx = g @ weights.data if x.requires_grad else None
        gw = None
        if weights.requires_grad:
            gw = g.T @ x.data if x.ndim == 2 else np.outer(g, x.data)
        gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=0) if g.ndim == 2 else g.copy()
        return gx, gw, gb

    parents = (x, weights, bias) if bias is not None else (x, weights)
    return _result(out, parents, _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: formatos diferentes {a.shape} e {b.shape}")

    def _backward(g):
        return g, g

    return _result(a.data + b.data, (a, b), _backward)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {x.shape} → {shape} impossível") from e

    def _backward(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), _backward)


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    """Intercala os canais de ``groups`` grupos (C×H×W ou N×C×H×W)."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"channel_shuffle espera C×H×W ou N×C×H×W, recebido {x.shape}")
    c = x.shape[-3]
    if groups < 1 or c % groups:
        raise ShapeError(f"channel_shuffle: {c} canais não se dividem em {groups} grupos")
    perm = np.arange(c).reshape(groups, c // groups).T.ravel()
    axis = x.ndim - 3
    out = np.take(x.data, perm, axis=axis)

    def _backward(g):
        gx = np.empty_like(g)
        if axis:
            gx[:, perm] = g
        else:
            gx[perm] = g
        return (gx,)

    return _result(out, (x,), _backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Projeção escalar Σ x·w (usada para reduzir saídas a uma perda)."""
    x = as_tensor(x)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != x.shape:
        raise ShapeError(f"weighted_sum: pesos {weights.shape} != entrada {x.shape}")

    def _backward(g):
        return (g * weights,)

    return _result(np.asarray((x.data * weights).sum()), (x,), _backward)


# ===========================
# ATIVAÇÕES
# ===========================
def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def _backward(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), _backward)


def sigmoid(x: Tensor) -> Tensor:
    """Sigmoide estável; saída sempre no intervalo aberto (0, 1)."""
    x = as_tensor(x)
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    s = np.clip(s, _TINY, _ONE_MINUS)

    def _backward(g):
        return (g * s * (1.0 - s),)

    return _result(s, (x,), _backward)


def _log_softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    """Softmax no último eixo, subtraindo o máximo antes da exponencial."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax exige ao menos um elemento, recebido {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = np.maximum(e / e.sum(axis=-1, keepdims=True), _TINY)

    def _backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), _backward)


DROPOUT_MODES = ('train', 'eval')


def dropout(x: Tensor, p: float, mode: str, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Dropout invertido: em treino zera com prob. p e escala por 1/(1-p); em eval é identidade."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise DataError(f"Probabilidade de dropout deve estar em [0, 1), recebido {p}")
    if mode not in DROPOUT_MODES:
        raise DataError(f"Modo de dropout desconhecido: {mode!r}")
    if mode == 'eval' or p == 0.0:
        return x
    if rng is None:
        raise DataError("dropout em modo train exige um gerador explícito")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def _backward(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), _backward)


# ===========================
# PERDAS
# ===========================
def weighted_cross_entropy(logits: Tensor, targets: np.ndarray, alpha: np.ndarray) -> Tensor:
    """
    Entropia cruzada ponderada: −Σ α_i · t_i · log softmax(o)_i, média no lote.

    Args:
        logits: K ou B×K
        targets: distribuição(ões) alvo com o mesmo formato dos logits
        alpha: pesos por classe (K)
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if logits.ndim not in (1, 2) or targets.shape != logits.shape or alpha.shape != logits.shape[-1:]:
        raise ShapeError(f"Entropia cruzada: logits {logits.shape}, alvos {targets.shape}, "
                         f"alpha {alpha.shape} incompatíveis")
    if not np.all(np.isfinite(logits.data)):
        raise DataError("Logits não finitos (NaN/Inf) na entropia cruzada")
    batch = logits.shape[0] if logits.ndim == 2 else 1
    log_p = _log_softmax(logits.data)
    weighted = alpha * targets
    loss = -(weighted * log_p).sum() / batch

    def _backward(g):
        p = np.exp(log_p)
        return ((p * weighted.sum(axis=-1, keepdims=True) - weighted) * (g / batch),)

    return _result(np.asarray(loss), (logits,), _backward)


def squared_error(pred: Tensor, target: np.ndarray) -> Tensor:
    """Soma dos quadrados por amostra, média no lote."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError(f"Erro quadrático: predição {pred.shape} vs alvo {target.shape}")
    batch = pred.shape[0] if pred.ndim == 2 else 1
    diff = pred.data - target

    def _backward(g):
        return (2.0 * diff * (g / batch),)

    return _result(np.asarray((diff * diff).sum() / batch), (pred,), _backward)


# ===========================
# INICIALIZAÇÃO E OTIMIZADOR
# ===========================
def he_uniform(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def fan_in_uniform(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class SGD:
    """Descida de gradiente com momento; ignora tensores congelados.

    Com ``clip_norm > 0`` os gradientes são reescalados para que a norma global
    não passe de ``clip_norm`` antes do passo.
    """

    def __init__(self, params: Iterable[Tensor], learning_rate: float, momentum: float = 0.9,
                 clip_norm: float = 0.0):
        if learning_rate <= 0:
            raise DataError(f"learning_rate deve ser > 0, recebido {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise DataError(f"momentum deve estar em [0, 1), recebido {momentum}")
        if clip_norm < 0:
            raise DataError(f"clip_norm deve ser ≥ 0, recebido {clip_norm}")
        self.params = [p for p in params if p.requires_grad]
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.clip_norm = clip_norm
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        total = sum(float(np.sum(p.grad ** 2)) for p in self.params if p.grad is not None)
        return float(np.sqrt(total))

    def step(self):
        scale = 1.0
        if self.clip_norm > 0:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for p, v in zip(self.params, self._velocity):
            if p.grad is None or not p.requires_grad:
                continue
            v *= self.momentum
            v += scale * p.grad
            p.data -= self.learning_rate * v
