"""
ModelBundle: todos os parâmetros nomeados do sistema (extrator + cabeças),
cada array com sua flag de congelamento e a impressão digital da arquitetura.

Convenção de nomes: "fe.*" extrator, "meta.*", "rough.*", "fine.*" cabeças.
"""
import hashlib
import logging
from typing import Dict, Iterator, List, Tuple

import numpy as np

from maod.exceptions import CheckpointError, DataError
from maod.tensor_core import Tensor

logger = logging.getLogger(__name__)

FINGERPRINT_BYTES = 32


class ModelBundle:
    """Coleção ordenada de arrays nomeados."""

    def __init__(self, fingerprint: str):
        try:
            raw = bytes.fromhex(fingerprint)
        except (TypeError, ValueError) as e:
            raise DataError(f"Impressão digital inválida: {fingerprint!r}") from e
        if len(raw) != FINGERPRINT_BYTES:
            raise DataError(f"Impressão digital deve ter {FINGERPRINT_BYTES} bytes, recebido {len(raw)}")
        self.fingerprint = fingerprint
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray, frozen: bool = False) -> Tensor:
        if name in self._params:
            raise DataError(f"Parâmetro duplicado no bundle: {name}")
        tensor = Tensor(np.array(data, dtype=np.float64), requires_grad=not frozen, name=name)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise DataError(f"Parâmetro inexistente no bundle: {name}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def is_frozen(self, name: str) -> bool:
        return not self[name].requires_grad

    def matching(self, prefix: str) -> List[str]:
        return [name for name in self._params if name.startswith(prefix)]

    def parameters(self, prefix: str = '', trainable_only: bool = False) -> List[Tensor]:
        return [t for name, t in self._params.items()
                if name.startswith(prefix) and (t.requires_grad or not trainable_only)]

    def count(self, prefix: str = '', trainable_only: bool = False) -> int:
        """Número de escalares sob o prefixo."""
        return int(sum(t.data.size for t in self.parameters(prefix, trainable_only)))

    def checksum(self, prefix: str = '') -> str:
        """SHA-256 dos nomes e bytes dos arrays sob o prefixo."""
        digest = hashlib.sha256()
        for name in self.matching(prefix):
            digest.update(name.encode('utf-8'))
            digest.update(np.ascontiguousarray(self._params[name].data).tobytes())
        return digest.hexdigest()

    def subset(self, prefix: str) -> 'ModelBundle':
        """Bundle com os mesmos tensores (compartilhados) sob o prefixo."""
        names = self.matching(prefix)
        if not names:
            raise DataError(f"Nenhum parâmetro com prefixo '{prefix}'")
        part = ModelBundle(self.fingerprint)
        for name in names:
            part._params[name] = self._params[name]
        return part

    def merge(self, other: 'ModelBundle') -> 'ModelBundle':
        """Junta outro bundle a este (mesma arquitetura, nomes disjuntos)."""
        if other.fingerprint != self.fingerprint:
            raise CheckpointError(
                f"Impressões digitais diferentes: {self.fingerprint[:12]}… vs {other.fingerprint[:12]}…",
                code=CheckpointError.FINGERPRINT_MISMATCH)
        for name, tensor in other.items():
            if name in self._params:
                raise DataError(f"Parâmetro duplicado ao juntar bundles: {name}")
            self._params[name] = tensor
        return self

    def assign_from(self, other: 'ModelBundle', prefix: str = '') -> int:
        """
        Copia valores e flags de `other` para os arrays existentes (no lugar).

        Returns:
            Número de arrays atualizados
        """
        if other.fingerprint != self.fingerprint:
            raise CheckpointError(
                f"Checkpoint de outra arquitetura: {other.fingerprint[:12]}… vs {self.fingerprint[:12]}…",
                code=CheckpointError.FINGERPRINT_MISMATCH)
        updated = 0
        for name, source in other.items():
            if not name.startswith(prefix):
                continue
            if name not in self._params:
                raise CheckpointError(f"Array '{name}' não existe no modelo construído",
                                      code=CheckpointError.SHAPE_MISMATCH)
            target = self._params[name]
            if target.shape != source.shape:
                raise CheckpointError(f"Array '{name}': formato {source.shape} no checkpoint, "
                                      f"{target.shape} no modelo", code=CheckpointError.SHAPE_MISMATCH)
            np.copyto(target.data, source.data)
            target.requires_grad = source.requires_grad
            target.grad = None
            updated += 1
        return updated


def freeze(bundle: ModelBundle, name_prefix: str) -> ModelBundle:
    """
    Congela todos os arrays cujo nome começa com `name_prefix`.

    Raises:
        DataError: prefixo não corresponde a nenhum array
    """
    names = bundle.matching(name_prefix)
    if not names:
        raise DataError(f"Prefixo '{name_prefix}' não corresponde a nenhum array "
                        f"(erro de digitação? prefixos existentes: {_prefixes(bundle)})")
    for name in names:
        tensor = bundle[name]
        tensor.requires_grad = False
        tensor.grad = None
    logger.info(f"🔒 {len(names)} arrays congelados com prefixo '{name_prefix}'")
    return bundle


def _prefixes(bundle: ModelBundle) -> List[str]:
    return sorted({name.split('.', 1)[0] + '.' for name in bundle})
