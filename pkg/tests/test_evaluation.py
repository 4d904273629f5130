"""Testes das métricas, do emparelhamento e da avaliação por cabeça."""
import itertools

import numpy as np
import pytest

from maod.evaluation import (ConfusionMatrix, Metrics, ModelPredictor, OraclePredictor, evaluate_fine,
                             evaluate_meta, evaluate_rough, f1, iou_rule, match_count, max_matching,
                             metrics_frame)
from maod.exceptions import DataError
from maod.heads import BoxTarget, GridSpec, Situation
from maod.scenegen import SceneSample


def brute_force_matching(adjacency, n_targets):
    """Maior número de pares disjuntos por busca exaustiva."""
    n_pred = len(adjacency)
    best = 0
    if n_pred <= n_targets:
        for order in itertools.permutations(range(n_targets), n_pred):
            best = max(best, sum(1 for p, t in enumerate(order) if t in adjacency[p]))
    else:
        for order in itertools.permutations(range(n_pred), n_targets):
            best = max(best, sum(1 for t, p in enumerate(order) if t in adjacency[p]))
    return best


def test_f1_values():
    assert f1(3, 4, 5) == pytest.approx(2 / 3)
    assert f1(0, 4, 5) == 0.0
    assert f1(0, 0, 5) == 0.0
    assert f1(0, 3, 0) == 0.0
    assert f1(4, 4, 4) == 1.0
    with pytest.raises(DataError):
        f1(5, 4, 6)
    with pytest.raises(DataError):
        f1(-1, 2, 2)


def test_metrics_properties_and_degenerate_flag():
    m = Metrics(3, 4, 5, TT=2.0, NF=100)
    assert m.precision == 0.75 and m.recall == 0.6
    assert m.cpu_time == pytest.approx(0.02)
    assert not m.degenerate
    empty = Metrics(0, 0, 7)
    assert empty.degenerate and empty.f1 == 0.0 and empty.cpu_time is None


@pytest.mark.parametrize('T, NP, NT', [(0, 3, 4), (0, 1, 1), (0, 20, 1)])
def test_zero_matches_means_precision_plus_recall_is_zero(T, NP, NT):
    m = Metrics(T, NP, NT)
    assert m.precision + m.recall == 0.0
    assert m.degenerate and m.f1 == 0.0
    assert not Metrics(1, NP, NT).degenerate


def test_max_matching_against_brute_force(rng):
    for _ in range(200):
        n_pred = int(rng.integers(0, 7))
        n_targets = int(rng.integers(0, 7))
        adjacency = [[t for t in range(n_targets) if rng.uniform() < 0.4] for _ in range(n_pred)]
        assert max_matching(adjacency, n_targets) == brute_force_matching(adjacency, n_targets)


def test_iou_rule_matching_against_brute_force(rng):
    rule = iou_rule(0.5)
    for _ in range(100):
        targets = [BoxTarget(*rng.uniform(0.3, 0.7, size=2), *rng.uniform(0.1, 0.4, size=2))
                   for _ in range(int(rng.integers(1, 5)))]
        predictions = [BoxTarget(t.x + rng.normal(0, 0.05), t.y + rng.normal(0, 0.05), t.w, t.h)
                       for t in targets for _ in range(int(rng.integers(0, 2)))]
        adjacency = [[j for j, t in enumerate(targets) if rule(p, t)] for p in predictions]
        T = match_count(predictions, targets, rule)
        assert T == brute_force_matching(adjacency, len(targets))
        assert T <= min(len(predictions), len(targets))


def test_each_target_counts_once():
    # duas predições na mesma célula de um único alvo: T = 1
    grid = GridSpec(4, 4)
    rule = lambda cell, center: grid.cell_index(*center) == cell  # noqa: E731
    assert match_count([10, 10], [(0.6, 0.6)], rule) == 1
    assert match_count([10], [(0.6, 0.6), (0.55, 0.55)], rule) == 1


def test_confusion_matrix_rows_and_accuracy():
    confusion = ConfusionMatrix()
    pairs = [(0, 0), (0, 1), (1, 1), (2, 2), (2, 2), (2, 1)]
    for actual, predicted in pairs:
        confusion.add(Situation(actual), Situation(predicted))
    assert confusion.row_sums() == [2, 1, 3]
    assert confusion.total == 6
    assert confusion.accuracy == pytest.approx(4 / 6)
    frame = confusion.to_frame()
    assert list(frame.columns) == ['NoObject', 'FarObjects', 'CloseObject']


def test_oracle_predictor_scores_perfectly(tiny_dataset):
    grid = GridSpec(4, 4)
    oracle = OraclePredictor(grid)
    test = tiny_dataset.samples

    meta = evaluate_meta(oracle, test)
    assert meta.accuracy == 1.0
    assert meta.errors == []
    assert meta.confusion.row_sums() == [10, 10, 10]
    assert all(entry['f1'] == 1.0 for entry in meta.per_class.values())

    rough = evaluate_rough(oracle, test, grid)
    assert rough.precision == 1.0
    assert rough.NT == sum(len(s.boxes) for s in test if s.situation == Situation.FAR_OBJECTS)

    fine = evaluate_fine(oracle, test)
    assert fine.metrics.f1 == 1.0
    assert fine.mean_iou == pytest.approx(1.0)


def test_evaluate_meta_lists_errors_by_confidence():
    class Fixed:
        def __init__(self, answers):
            self.answers = iter(answers)

        def predict_situation(self, sample):
            return next(self.answers)

    image = np.zeros((3, 4, 4))
    samples = [SceneSample(image, Situation.NO_OBJECT, ()) for _ in range(3)]
    report = evaluate_meta(Fixed([(Situation.FAR_OBJECTS, 0.9), (Situation.NO_OBJECT, 0.8),
                                  (Situation.CLOSE_OBJECT, 0.4)]), samples)
    assert report.accuracy == pytest.approx(1 / 3)
    assert [e['confidence'] for e in report.errors] == [0.4, 0.9]
    assert report.per_class['NoObject']['support'] == 3


def test_evaluation_rejects_empty_and_bad_thresholds(tiny_dataset):
    grid = GridSpec(4, 4)
    oracle = OraclePredictor(grid)
    no_far = [s for s in tiny_dataset.samples if s.situation != Situation.FAR_OBJECTS]
    with pytest.raises(DataError):
        evaluate_rough(oracle, no_far, grid)
    with pytest.raises(DataError):
        evaluate_rough(oracle, tiny_dataset.samples, grid, score_threshold=1.0)
    with pytest.raises(DataError):
        evaluate_meta(oracle, [])


def test_fine_iou_threshold_decides_hit():
    class Shifted:
        def predict_box(self, sample):
            b = sample.boxes[0]
            return BoxTarget(b.x + 0.1, b.y, b.w, b.h)

    target = BoxTarget(0.5, 0.5, 0.4, 0.4)
    samples = [SceneSample(np.zeros((3, 4, 4)), Situation.CLOSE_OBJECT, (target,))]
    # IoU = 0.12 / 0.20 = 0.6
    assert evaluate_fine(Shifted(), samples, 0.5).metrics.T == 1
    assert evaluate_fine(Shifted(), samples, 0.7).metrics.T == 0


def test_model_predictor_runs_on_tiny_models(tiny_models, tiny_dataset):
    models, _ = tiny_models
    predictor = ModelPredictor(models)
    report = evaluate_meta(predictor, tiny_dataset.test)
    assert sum(report.confusion.row_sums()) == len(tiny_dataset.test)
    rough = evaluate_rough(predictor, tiny_dataset.test, models.grid)
    assert rough.NP >= 1


def test_metrics_frame_columns():
    frame = metrics_frame({'meta': Metrics(1, 1, 1), 'rough': Metrics(0, 0, 2)})
    assert frame['stage'].tolist() == ['meta', 'rough']
    assert frame['f1'].tolist() == [1.0, 0.0]
    assert frame['degenerate'].tolist() == [False, True]
