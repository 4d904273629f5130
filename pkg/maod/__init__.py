"""
MAOD - Model Adaption Object Detection
Detecção de objetos adaptativa para robô: um meta classificador decide,
a cada frame, se nada é processado, se roda a detecção grosseira (célula
da grade) ou a detecção fina (caixa), todos sobre um extrator congelado.
"""
import os

# Fixar threads do BLAS antes do numpy ser importado (resultados
# independentes do número de núcleos da máquina)
_THREADS = os.environ.get('MAOD_NUM_THREADS', '1')
for _var in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS'):
    os.environ.setdefault(_var, _THREADS)

__version__ = '1.0.0'
__author__ = 'Lucas'
__description__ = 'MAOD - Detecção de Objetos com Adaptação de Modelo'
