"""Testes dos relatórios de texto e dos gráficos."""
from maod.evaluation import ConfusionMatrix, FineReport, MetaReport, Metrics
from maod.heads import Situation
from maod.reports import (BANNER, evaluation_report, loss_curve_frame, plot_confusion, plot_losses,
                          sim_report, write_csv)


def _meta_report(accuracy=1.0, errors=()):
    confusion = ConfusionMatrix()
    for sit in Situation:
        confusion.add(sit, sit)
    per_class = {s.label: {**Metrics(1, 1, 1).to_dict(), 'support': 1} for s in Situation}
    return MetaReport(accuracy, confusion, per_class, list(errors), 3)


def test_evaluation_report_sections():
    fine = FineReport(Metrics(0, 1, 1), 0.2, [0.2])
    text = evaluation_report(_meta_report(), Metrics(2, 2, 3), fine, 0.5, 'relative', 0.5)
    assert text.startswith(BANNER)
    assert 'MATRIZ DE CONFUSÃO' in text
    assert 'Grossa (limiar 0.5, score relative)' in text
    assert 'F1 degenerado' in text
    assert 'Nenhum erro' in text


def test_evaluation_report_lists_errors():
    errors = [{'index': 4, 'actual': 'NoObject', 'predicted': 'FarObjects', 'confidence': 0.41}]
    text = evaluation_report(_meta_report(2 / 3, errors), None, None, 0.5, 'absolute', 0.5)
    assert 'Amostra 4: Real: NoObject | Predito: FarObjects | Confiança: 41.00%' in text
    assert 'Acurácia abaixo de 85%' in text


def test_sim_report_counts_grasps():
    text = sim_report([{'world': 0, 'seed': 1, 'steps': 40, 'final_phase': 'Grasped', 'final_distance': 0.02},
                       {'world': 1, 'seed': 1, 'steps': 20, 'final_phase': 'Searching',
                        'final_distance': None}])
    assert 'Mundos: 2 | Agarrados: 1' in text
    assert 'Distância final: -' in text


def test_csv_is_deterministic(tmp_path):
    frame = loss_curve_frame([0.5, 0.25])
    a = write_csv(frame, tmp_path / 'a.csv')
    b = write_csv(frame, tmp_path / 'b.csv')
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines() == ['epoch,loss', '1,0.5', '2,0.25']


def test_plots_are_written(tmp_path):
    confusion = ConfusionMatrix()
    confusion.add(Situation.NO_OBJECT, Situation.FAR_OBJECTS)
    assert plot_confusion(confusion, tmp_path / 'c.png').stat().st_size > 0
    assert plot_losses({'meta': [1.0, 0.5], 'fine': [0.3, 0.1]}, tmp_path / 'l.png').stat().st_size > 0
