"""
Execução em escala de bancada (configuração padrão). Lenta: rode com
`pytest -m slow`.
"""
import numpy as np
import pytest

from maod.backbone import EXTRACTOR_PREFIX, BackboneConfig
from maod.config import DEFAULT_COUNTS, DEFAULTS
from maod.evaluation import ModelPredictor, evaluate_fine, evaluate_meta, evaluate_rough
from maod.geometry import Calibration
from maod.heads import HeadConfig, Situation
from maod.pipeline import MAODPipeline, amortization_probe, build_models
from maod.scenegen import default_scene_config, gen_dataset
from maod.simulator import default_sim_config, run_worlds, simulate_approach
from maod.tensor_core import make_rng
from maod.training import pretrain_extractor, train_heads

pytestmark = pytest.mark.slow


@pytest.fixture(scope='module')
def desk_run():
    scene = default_scene_config()
    dataset = gen_dataset(DEFAULT_COUNTS, 1, scene)
    models, bundle = build_models(BackboneConfig(), HeadConfig(), make_rng(1))
    images = np.stack([s.image for s in dataset.train])
    pretrain_extractor(models.extractor, bundle, scene, DEFAULTS['train']['proxy'], seed=1,
                       calibration_images=images)
    before = bundle.checksum(EXTRACTOR_PREFIX)
    train_heads(models, bundle, dataset.train, DEFAULTS['train'], seed=1)
    assert bundle.checksum(EXTRACTOR_PREFIX) == before
    return dataset, models


def test_desk_scale_metrics(desk_run):
    dataset, models = desk_run
    predictor = ModelPredictor(models)
    meta = evaluate_meta(predictor, dataset.test)
    assert meta.accuracy >= 0.85
    assert np.all(meta.confusion.counts.sum(axis=0) > 0)

    counts = meta.confusion.counts
    errors = counts.sum() - counts.trace()
    if errors:
        no_object = int(Situation.NO_OBJECT)
        with_empty = counts[no_object].sum() + counts[:, no_object].sum() - 2 * counts[no_object, no_object]
        assert with_empty <= 0.2 * errors

    rough = evaluate_rough(predictor, dataset.test, models.grid, 0.5, DEFAULTS['eval']['rough_score'])
    assert rough.f1 >= 0.70
    fine = evaluate_fine(predictor, dataset.test, 0.5)
    assert fine.mean_iou >= 0.5
    assert fine.metrics.f1 >= 0.8


def test_shared_map_is_cheaper(desk_run):
    dataset, models = desk_run
    image = next(s.image for s in dataset.test if s.situation == Situation.FAR_OBJECTS)
    report = amortization_probe(image, models, 30)
    assert report.shared_time < report.unshared_time
    assert report.meta_share < 0.25


def test_trained_closed_loop(desk_run):
    _, models = desk_run
    calib = Calibration.from_dict(DEFAULTS['calibration'], DEFAULTS['scene']['image_size'])
    config = default_sim_config()

    result = simulate_approach(config.default_world(), MAODPipeline(models), calib, 400, config, seed=1)
    verdicts = {row['verdict'] for row in result.trajectory}
    assert {'FarObjects', 'CloseObject'} <= verdicts
    assert result.grasped and result.final_distance <= 0.05

    summaries = run_worlds(10, 1, calib, config, lambda camera: MAODPipeline(models), 400)
    grasped = [s for s in summaries if s['final_phase'] == 'Grasped']
    assert len(grasped) >= 8
    assert all(s['final_distance'] <= 0.05 for s in grasped)
