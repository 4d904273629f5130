"""
Configurações do MAOD.

Os valores padrão ficam como constantes de módulo (sobrescrevíveis por
variáveis de ambiente MAOD_*). Um arquivo YAML de execução pode sobrescrever
qualquer chave das seções abaixo; veja `config.yaml` na raiz do projeto.
"""
import copy
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml
from decouple import config

from maod.exceptions import ConfigError

logger = logging.getLogger(__name__)

# Configurações de log
LOG_FILE = config('MAOD_LOG_FILE', default='maod.log')
LOG_LEVEL = config('MAOD_LOG_LEVEL', default='INFO')
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# Diretório padrão das execuções (cada execução ganha uma subpasta)
RUNS_DIR = Path(config('MAOD_RUNS_DIR', default='runs'))

# Semente global padrão
DEFAULT_SEED = config('MAOD_SEED', default=1, cast=int)

# Contagens do dataset por situação (NoObject, FarObjects, CloseObject)
DEFAULT_COUNTS = (607, 452, 328)

# Imagem e grade
IMAGE_SIZE = config('MAOD_IMAGE_SIZE', default=64, cast=int)
GRID_ROWS = 4
GRID_COLS = 4

# Limiares de situação (fração da área da imagem)
FAR_AREA_MAX = 0.06
CLOSE_AREA_MIN = 0.20

# Protocolo de aquisição
CAMERA_TIMEOUT_S = config('MAOD_CAMERA_TIMEOUT', default=0.5, cast=float)
SERIAL_TIMEOUT_S = config('MAOD_SERIAL_TIMEOUT', default=2.0, cast=float)

# Barras de progresso (tqdm)
SHOW_PROGRESS = config('MAOD_PROGRESS', default=True, cast=bool)

DEFAULTS: Dict[str, Dict[str, Any]] = {
    'scene': {
        'image_size': IMAGE_SIZE,
        'far_area_max': FAR_AREA_MAX,
        'close_area_min': CLOSE_AREA_MIN,
        'overlap_fraction': 0.0,
        'noise_sigma': 0.02,
        'blur_radius': 2,
        'margin': 0.02,
        'far_side_min': 0.04,
        'far_side_max': 0.22,
        'close_side_min': 0.45,
        'close_side_max': 0.80,
        'test_fraction': 0.2,
        'proxy_samples': 400,
    },
    'backbone': {
        'input_shape': [3, IMAGE_SIZE, IMAGE_SIZE],
        'blocks': [
            {'out_channels': 24, 'kernel_size': 3, 'stride': 1, 'activation': 'relu'},
            {'out_channels': 48, 'kernel_size': 3, 'stride': 2, 'activation': 'relu'},
            {'out_channels': 96, 'kernel_size': 3, 'stride': 2, 'activation': 'relu'},
            {'out_channels': 64, 'kernel_size': 3, 'stride': 2, 'activation': 'relu'},
        ],
    },
    'heads': {
        'grid_rows': GRID_ROWS,
        'grid_cols': GRID_COLS,
        'meta_channels': 24,
        'rough_channels': 24,
        'fine_channels': 24,
        'dropout': 0.2,
    },
    'train': {
        'proxy': {'epochs': 10, 'learning_rate': 0.02, 'momentum': 0.9, 'batch_size': 32,
                  'clip_norm': 5.0},
        'meta': {'epochs': 40, 'learning_rate': 0.02, 'momentum': 0.9, 'batch_size': 32,
                 'clip_norm': 5.0, 'alpha': 'auto'},
        'rough': {'epochs': 40, 'learning_rate': 0.02, 'momentum': 0.9, 'batch_size': 32,
                  'clip_norm': 5.0, 'alpha': 'auto'},
        # fine é regressão: sem pesos de classe
        'fine': {'epochs': 60, 'learning_rate': 0.1, 'momentum': 0.9, 'batch_size': 16,
                 'clip_norm': 5.0},
    },
    'eval': {
        'rough_threshold': 0.5,
        'rough_score': 'relative',
        'iou_threshold': 0.5,
    },
    'bench': {
        'trials': 30,
        'frames': 100,
    },
    'calibration': {
        'height_m': 0.30,
        'tilt_deg': 45.0,
        'hfov_deg': 90.0,
        'vfov_deg': 90.0,
        'offset_x_m': -0.22,
        'offset_y_m': 0.0,
    },
    'sim': {
        'object_x': 2.0,
        'object_y': 1.0,
        'object_radius': 0.10,
        'object_color': 'red',
        'background': 'plain',
        'step_m': 0.05,
        'turn_rad': 0.2,
        'refine_step_m': 0.01,
        'grasp_center': 0.1,
        'grasp_area': 0.28,
        'oracle_close_area': 0.12,
        'max_steps': 200,
        'noise_sigma': 0.0,
    },
}


def _merge(base: Dict[str, Any], override: Dict[str, Any], path: str = '') -> Dict[str, Any]:
    """Mescla `override` sobre `base`, rejeitando chaves desconhecidas."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"Chave de configuração desconhecida: '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}' deve ser uma seção (mapeamento)")
            merged[key] = _merge(base[key], value, where)
        else:
            merged[key] = value
    return merged


def load_run_config(path: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """
    Carrega a configuração de execução.

    Args:
        path: Arquivo YAML opcional; ausente = apenas os padrões

    Returns:
        Dicionário completo (padrões + sobrescritas do arquivo)
    """
    if path is None:
        return copy.deepcopy(DEFAULTS)

    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Arquivo de configuração não encontrado: {path}")

    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"YAML inválido em {path}: {e}") from e

    if not isinstance(data, dict):
        raise ConfigError(f"{path} deve conter um mapeamento de seções")

    merged = _merge(DEFAULTS, data)
    logger.debug(f"Configuração carregada de {path}")
    return merged


def config_hash(cfg: Dict[str, Any]) -> str:
    """SHA-256 do JSON canônico da configuração."""
    canonical = json.dumps(cfg, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()
