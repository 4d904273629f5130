"""
Relatórios de texto, tabelas CSV e gráficos das execuções.

Os relatórios não levam data/hora para que duas execuções com a mesma
semente produzam arquivos idênticos (exceto os de tempo).
"""
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

from maod.evaluation import ConfusionMatrix, FineReport, MetaReport, Metrics  # noqa: E402

logger = logging.getLogger(__name__)

BANNER = '=' * 80
RULE = '─' * 80


def _title(text: str) -> str:
    return f"{BANNER}\n{text.center(80).rstrip()}\n{BANNER}\n"


def write_text(text: str, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding='utf-8')
    logger.info(f"📄 Relatório salvo em: {path}")
    return path


def write_csv(frame: pd.DataFrame, path: Union[str, Path], index: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=index, float_format='%.10g', lineterminator='\n')
    logger.debug(f"CSV salvo em: {path}")
    return path


def loss_curve_frame(losses: Iterable[float]) -> pd.DataFrame:
    losses = list(losses)
    return pd.DataFrame({'epoch': range(1, len(losses) + 1), 'loss': losses})


# ===========================
# TREINO
# ===========================
def training_report(results: Dict[str, object], proxy=None, extractor_checksum: str = '') -> str:
    report = _title('RELATÓRIO DE TREINAMENTO - MAOD')
    if proxy is not None:
        report += (f"\n🧪 Pré-treino substituto (texturas)\n{RULE}\n"
                   f"  Acurácia inicial:  {proxy.initial_accuracy * 100:6.2f}%\n"
                   f"  Acurácia final:    {proxy.final_accuracy * 100:6.2f}%\n"
                   f"  Épocas:            {len(proxy.losses):6d}\n")
    if extractor_checksum:
        report += f"\n🔒 Extrator congelado (sha256): {extractor_checksum}\n"
    for name, result in results.items():
        alpha = ', '.join(f"{a:.3f}" for a in result.alpha) if result.alpha else '-'
        report += (f"\nCabeça: {name.upper()}\n{RULE}\n"
                   f"  Amostras:       {result.samples:6d}\n"
                   f"  Épocas:         {len(result.losses):6d}\n"
                   f"  Perda inicial:  {result.initial_loss:10.5f}\n"
                   f"  Perda final:    {result.final_loss:10.5f}\n"
                   f"  α:              [{alpha}]\n")
        if result.final_loss >= result.initial_loss:
            report += "  ⚠️  A perda não caiu; revise taxa de aprendizado e épocas.\n"
    return report + f"\n{BANNER}\n"


# ===========================
# AVALIAÇÃO
# ===========================
def _metrics_block(name: str, metrics: Metrics) -> str:
    block = (f"\n{name}\n{RULE}\n"
             f"  T / NP / NT:  {metrics.T} / {metrics.NP} / {metrics.NT}\n"
             f"  Precision:    {metrics.precision * 100:6.2f}%\n"
             f"  Recall:       {metrics.recall * 100:6.2f}%\n"
             f"  F1-Score:     {metrics.f1 * 100:6.2f}%\n")
    if metrics.degenerate:
        block += "  ⚠️  F1 degenerado (NP = 0, NT = 0 ou P + R = 0): definido como 0\n"
    return block


def evaluation_report(meta: MetaReport, rough: Optional[Metrics], fine: Optional[FineReport],
                      rough_threshold: float, rough_score: str, iou_threshold: float) -> str:
    report = _title('RELATÓRIO DE AVALIAÇÃO - MAOD')
    report += (f"\n🎯 Acurácia do meta classificador: {meta.accuracy * 100:.2f}%\n"
               f"📊 Total de amostras de teste: {meta.samples}\n")

    report += f"\n{BANNER}\n{'MÉTRICAS POR SITUAÇÃO'.center(80).rstrip()}\n{BANNER}\n"
    for label, m in meta.per_class.items():
        report += (f"\nSituação: {label}\n{RULE}\n"
                   f"  Precision:  {m['precision'] * 100:6.2f}%\n"
                   f"  Recall:     {m['recall'] * 100:6.2f}%\n"
                   f"  F1-Score:   {m['f1'] * 100:6.2f}%\n"
                   f"  Support:    {m['support']:6d} amostras\n")

    labels = list(meta.per_class)
    report += f"\n{BANNER}\n{'MATRIZ DE CONFUSÃO'.center(80).rstrip()}\n{BANNER}\n\n"
    report += "               Predito\n            " + '  '.join(l[:12].ljust(12) for l in labels) + "\nReal\n"
    for i, label in enumerate(labels):
        report += label[:12].ljust(12) + ''.join(f"{meta.confusion.counts[i, j]:6d}        "
                                                 for j in range(len(labels))).rstrip() + "\n"

    report += f"\n{BANNER}\n{'DETECÇÃO'.center(80).rstrip()}\n{BANNER}\n"
    if rough is not None:
        report += _metrics_block(f"Grossa (limiar {rough_threshold}, score {rough_score})", rough)
    if fine is not None:
        report += _metrics_block(f"Fina (IoU ≥ {iou_threshold})", fine.metrics)
        report += f"  IoU médio:    {fine.mean_iou:.4f}\n"

    report += f"\n{BANNER}\n{'PREDIÇÕES INCORRETAS'.center(80).rstrip()}\n{BANNER}\n\n"
    if meta.errors:
        report += f"Total de erros: {len(meta.errors)} ({len(meta.errors) / meta.samples * 100:.2f}%)\n"
        report += f"Top 10 erros com menor confiança:\n{RULE}\n"
        for err in meta.errors[:10]:
            report += (f"Amostra {err['index']}: Real: {err['actual']} | Predito: {err['predicted']} | "
                       f"Confiança: {err['confidence'] * 100:.2f}%\n")
    else:
        report += "🎉 Nenhum erro no meta classificador!\n"

    report += f"\n{BANNER}\n{'CONCLUSÕES'.center(80).rstrip()}\n{BANNER}\n\n"
    if meta.accuracy >= 0.95:
        report += "✅ Excelente! O meta classificador apresenta alta acurácia.\n"
    elif meta.accuracy >= 0.85:
        report += "👍 Bom! O meta classificador tem desempenho satisfatório.\n"
    else:
        report += "⚠️  Acurácia abaixo de 85%. Considere mais épocas ou mais dados.\n"
    supports = [m['support'] for m in meta.per_class.values() if m['support'] > 0]
    if supports and max(supports) / min(supports) > 3:
        report += "⚠️  Conjunto de teste desbalanceado.\n"
    return report + f"\n{BANNER}\n"


def plot_confusion(confusion: ConfusionMatrix, path: Union[str, Path]) -> Path:
    frame = confusion.to_frame()
    fig, ax = plt.subplots(figsize=(6, 5))
    sns.heatmap(frame, annot=True, fmt='d', cmap='Blues', ax=ax)
    ax.set_title('Matriz de Confusão', fontsize=14, fontweight='bold')
    ax.set_ylabel('Real')
    ax.set_xlabel('Predito')
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"📊 Gráfico salvo em: {path}")
    return Path(path)


def plot_losses(curves: Dict[str, List[float]], path: Union[str, Path]) -> Path:
    fig, ax = plt.subplots(figsize=(8, 5))
    for name, losses in curves.items():
        ax.plot(range(1, len(losses) + 1), losses, label=name)
    ax.set_xlabel('Época')
    ax.set_ylabel('Perda')
    ax.set_title('Curvas de Perda', fontsize=14, fontweight='bold')
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"📊 Gráfico salvo em: {path}")
    return Path(path)


# ===========================
# BENCHMARK E SIMULAÇÃO
# ===========================
def bench_report(probe, sequence_timing, host: Dict[str, object]) -> str:
    report = _title('RELATÓRIO DE TEMPO - MAOD')
    report += (f"\n🖥️  Host: {host.get('cpu_count')} CPUs, {host.get('memory_gb')} GB, "
               f"threads BLAS {host.get('threads')}\n")
    report += (f"\nSequência\n{RULE}\n"
               f"  NF:                 {sequence_timing.frames:8d}\n"
               f"  TT:                 {sequence_timing.total_time:12.6f} s\n"
               f"  cpu_time (TT/NF):   {sequence_timing.cpu_time:12.6f} s/frame\n"
               f"  extração média:     {sequence_timing.extract:12.6f} s\n"
               f"  meta média:         {sequence_timing.meta:12.6f} s\n"
               f"  cabeça média:       {sequence_timing.head:12.6f} s\n")
    report += (f"\nAmortização ({probe.trials} tentativas, cabeça {probe.head})\n{RULE}\n"
               f"  compartilhado:      {probe.shared_time:12.6f} s (mediana)\n"
               f"  separado:           {probe.unshared_time:12.6f} s (mediana)\n"
               f"  só cabeça:          {probe.head_only_time:12.6f} s (mediana)\n"
               f"  custo do meta:      {probe.meta_overhead:12.6f} s\n"
               f"  estágio meta:       {probe.meta_stage_time:12.6f} s ({probe.meta_share * 100:.1f}% do frame)\n"
               f"  razão sep./comp.:   {probe.ratio:12.3f}\n")
    if probe.shared_time < probe.unshared_time:
        report += "\n✅ O mapa compartilhado é mais rápido que extrações separadas.\n"
    else:
        report += "\n⚠️  O mapa compartilhado não foi mais rápido nesta medição.\n"
    return report + f"\n{BANNER}\n"


def sim_report(summaries: List[Dict[str, object]]) -> str:
    report = _title('RELATÓRIO DE SIMULAÇÃO - MAOD')
    grasped = sum(1 for s in summaries if s['final_phase'] == 'Grasped')
    report += f"\n🤖 Mundos: {len(summaries)} | Agarrados: {grasped}\n"
    for s in summaries:
        distance = s['final_distance']
        distance_text = f"{distance:.4f} m" if distance is not None else '-'
        report += (f"\nMundo {s['world']} (semente {s['seed']})\n{RULE}\n"
                   f"  Passos:          {s['steps']:6d}\n"
                   f"  Fase final:      {s['final_phase']}\n"
                   f"  Distância final: {distance_text}\n")
    return report + f"\n{BANNER}\n"


def comparison_report(frame: pd.DataFrame) -> str:
    """Tabela lado a lado dos backbones comparados (qualidade e custo)."""
    report = _title('COMPARAÇÃO DE BACKBONES - MAOD')
    for row in frame.to_dict('records'):
        report += (f"\n🧱 {row['backbone']}\n{RULE}\n"
                   f"  Parâmetros do extrator: {row['extractor_params']:10d}\n"
                   f"  Parâmetros totais:      {row['params']:10d}\n"
                   f"  Acurácia meta:          {row['meta_accuracy'] * 100:9.2f}%\n"
                   f"  F1 rough:               {row['rough_f1'] * 100:9.2f}%\n"
                   f"  F1 fine:                {row['fine_f1'] * 100:9.2f}%\n"
                   f"  IoU médio fine:         {row['fine_mean_iou']:10.4f}\n"
                   f"  cpu_time:               {row['cpu_time']:10.6f} s/frame\n")
    if len(frame) > 1:
        fastest = frame.loc[frame['cpu_time'].idxmin(), 'backbone']
        best = frame.loc[frame['meta_accuracy'].idxmax(), 'backbone']
        report += f"\n⚡ Mais rápido: {fastest} | 🎯 Melhor acurácia meta: {best}\n"
    return report + f"\n{BANNER}\n"
