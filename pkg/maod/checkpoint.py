"""
Checkpoint binário dos arrays do ModelBundle (little-endian).

Layout:
    b"MAOD" | u16 versão | 32 bytes de impressão digital
    por array: u16 tamanho do nome | nome UTF-8 | u8 congelado | u8 rank |
               u32 × rank dimensões | float64 × produto das dimensões

Salvar, carregar e salvar de novo produz os mesmos bytes.
"""
import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from maod.bundle import FINGERPRINT_BYTES, ModelBundle
from maod.exceptions import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b'MAOD'
VERSION = 1
_HEADER = struct.Struct('<4sH32s')
_NAME_LEN = struct.Struct('<H')
_FLAGS = struct.Struct('<BB')


def encode_bundle(bundle: ModelBundle, prefix: str = '') -> bytes:
    """Serializa os arrays sob `prefix` (todos, por padrão)."""
    parts = [_HEADER.pack(MAGIC, VERSION, bytes.fromhex(bundle.fingerprint))]
    for name in bundle.matching(prefix):
        tensor = bundle[name]
        raw_name = name.encode('utf-8')
        data = np.ascontiguousarray(tensor.data, dtype='<f8')
        parts.append(_NAME_LEN.pack(len(raw_name)))
        parts.append(raw_name)
        parts.append(_FLAGS.pack(int(bundle.is_frozen(name)), data.ndim))
        parts.append(struct.pack(f'<{data.ndim}I', *data.shape))
        parts.append(data.tobytes())
    return b''.join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"Checkpoint truncado lendo {what} (offset {self.pos})",
                                  code=CheckpointError.TRUNCATED)
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    @property
    def done(self) -> bool:
        return self.pos == len(self.raw)


def decode_bundle(raw: bytes) -> ModelBundle:
    reader = _Reader(raw)
    if len(raw) < len(MAGIC) or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("Arquivo não é um checkpoint MAOD", code=CheckpointError.BAD_MAGIC)
    magic, version, fingerprint = _HEADER.unpack(reader.take(_HEADER.size, 'cabeçalho'))
    if version != VERSION:
        raise CheckpointError(f"Versão {version} não suportada (esperado {VERSION})",
                              code=CheckpointError.BAD_VERSION)
    bundle = ModelBundle(fingerprint.hex())
    while not reader.done:
        (name_len,) = _NAME_LEN.unpack(reader.take(_NAME_LEN.size, 'tamanho do nome'))
        name = reader.take(name_len, 'nome').decode('utf-8')
        frozen, rank = _FLAGS.unpack(reader.take(_FLAGS.size, f"flags de '{name}'"))
        shape = struct.unpack(f'<{rank}I', reader.take(4 * rank, f"dimensões de '{name}'"))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(reader.take(8 * count, f"dados de '{name}'"), dtype='<f8')
        bundle.add(name, data.reshape(shape).astype(np.float64), frozen=bool(frozen))
    return bundle


def save_checkpoint(bundle: ModelBundle, path: Union[str, Path], prefix: str = '') -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_bundle(bundle, prefix))
    logger.info(f"💾 Checkpoint salvo: {path} ({len(bundle.matching(prefix))} arrays, prefixo '{prefix}')")
    return path


def load_checkpoint(path: Union[str, Path]) -> ModelBundle:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint não encontrado: {path}")
    bundle = decode_bundle(path.read_bytes())
    logger.debug(f"Checkpoint lido: {path} ({len(bundle)} arrays)")
    return bundle


assert _HEADER.size == len(MAGIC) + 2 + FINGERPRINT_BYTES
