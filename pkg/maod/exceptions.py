"""
Exceções do MAOD.

Cada exceção carrega o código de saída usado pela CLI:
0 sucesso, 1 erro de uso, 2 erro de dados/validação, 3 violação de invariante.
"""


class MAODError(Exception):
    """Erro base do pacote."""

    exit_code = 2

    def __init__(self, message: str, code: str = None):
        super().__init__(message)
        self.code = code

    def __str__(self):
        message = super().__str__()
        return f"[{self.code}] {message}" if self.code else message


class UsageError(MAODError):
    """Argumentos de linha de comando inválidos."""

    exit_code = 1


class ConfigError(MAODError, ValueError):
    """Configuração inválida (arquivo YAML ou parâmetros)."""


class ShapeError(MAODError, ValueError):
    """Formatos de tensores incompatíveis."""


class DataError(MAODError, ValueError):
    """Dados de entrada inválidos (dataset, contagens, alvos)."""


class GraphError(MAODError, RuntimeError):
    """Uso incorreto do grafo de autodiferenciação."""


class GeometryError(MAODError, ValueError):
    """Raio da câmera sem interseção com o chão."""


class FrameError(MAODError, ValueError):
    """Quadro do protocolo de aquisição inválido."""

    BAD_START = 'BAD_START'
    UNKNOWN_TYPE = 'UNKNOWN_TYPE'
    SHORT_READ = 'SHORT_READ'
    CHECKSUM = 'CHECKSUM'
    BAD_LENGTH = 'BAD_LENGTH'


class CheckpointError(MAODError, ValueError):
    """Checkpoint ilegível ou incompatível."""

    BAD_MAGIC = 'BAD_MAGIC'
    BAD_VERSION = 'BAD_VERSION'
    TRUNCATED = 'TRUNCATED'
    FINGERPRINT_MISMATCH = 'FINGERPRINT_MISMATCH'
    SHAPE_MISMATCH = 'SHAPE_MISMATCH'


class InvariantViolation(MAODError, AssertionError):
    """Contrato interno quebrado (ex.: extrator congelado alterado)."""

    exit_code = 3
