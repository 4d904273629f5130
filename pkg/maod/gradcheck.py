"""
Verificação de gradientes por diferenças finitas centrais.
"""
import logging
from typing import Callable, Sequence

import numpy as np

from maod.tensor_core import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-4


def numerical_gradient(fn: Callable[[], float], array: np.ndarray, h: float = DEFAULT_STEP) -> np.ndarray:
    """
    Gradiente numérico de `fn` em relação a `array` (alterado e restaurado no lugar).

    Args:
        fn: Função sem argumentos que devolve um escalar
        array: Array float64 lido por `fn`
        h: Passo da diferença central
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = fn()
        flat[i] = original - h
        minus = fn()
        flat[i] = original
        grad_flat[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """‖a − n‖ / (‖a‖ + ‖n‖); zero quando ambos são nulos."""
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = DEFAULT_STEP) -> float:
    """
    Compara gradientes analíticos e numéricos de uma perda escalar.

    Args:
        fn: Recebe `inputs` e devolve um Tensor escalar (deve ser determinística)
        inputs: Tensores com requires_grad=True

    Returns:
        Maior erro relativo entre os tensores de entrada
    """
    for t in inputs:
        t.grad = None
    backward(fn(*inputs))
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)

        def _value():
            with no_grad():
                return fn(*inputs).item()

        numeric = numerical_gradient(_value, t.data, h)
        error = relative_error(analytic, numeric)
        logger.debug(f"gradcheck {t.name or t.shape}: erro relativo {error:.3e}")
        worst = max(worst, error)
    return worst
