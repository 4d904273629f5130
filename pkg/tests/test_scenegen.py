"""Testes do gerador de cenas e da escrita/leitura do dataset."""
import json

import numpy as np
import pytest

from maod.exceptions import ConfigError, DataError
from maod.heads import GridSpec, Situation
from maod.scenegen import (BACKGROUND_KINDS, MANIFEST_FILE, ObjectSpec, SceneConfig, SceneSpec,
                           default_scene_config, derive_seed, gen_dataset, gen_proxy_dataset, gen_sample,
                           read_dataset, render, write_dataset)
from maod.tensor_core import make_rng


def test_render_range_and_shape(rng):
    spec = SceneSpec('checker', (ObjectSpec(0.5, 0.5, 0.3, 0.3, 'red'),), blur=1)
    image = render(spec, rng, 32, 0.02)
    assert image.shape == (3, 32, 32)
    assert image.min() >= 0.0 and image.max() <= 1.0


def test_render_without_noise_paints_object_color():
    spec = SceneSpec('plain', (ObjectSpec(0.5, 0.5, 0.5, 0.5, 'blue'),), tone=0.5)
    image = render(spec, make_rng(0), 16, 0.0)
    np.testing.assert_allclose(image[:, 8, 8], [0.10, 0.20, 0.85])
    np.testing.assert_allclose(image[:, 0, 0], [0.5, 0.5, 0.5])


def test_object_spec_rejects_out_of_image():
    with pytest.raises(DataError):
        ObjectSpec(0.05, 0.5, 0.3, 0.3)
    with pytest.raises(DataError):
        ObjectSpec(0.5, 0.5, 0.3, 0.3, 'green')


@pytest.mark.parametrize('situation', list(Situation))
def test_gen_sample_respects_situation_definition(situation):
    config = default_scene_config()
    for seed in range(20):
        sample = gen_sample(situation, make_rng(seed), config)
        assert sample.situation == situation
        if situation == Situation.NO_OBJECT:
            assert sample.boxes == ()
        elif situation == Situation.FAR_OBJECTS:
            assert 1 <= len(sample.boxes) <= 4
            assert all(b.area <= config.far_area_max + 1e-12 for b in sample.boxes)
        else:
            assert len(sample.boxes) == 1
            assert sample.boxes[0].area >= config.close_area_min - 1e-12


def test_every_dataset_label_matches_its_boxes(tmp_path):
    config = default_scene_config()
    dataset = gen_dataset((40, 40, 40), 5, config)
    write_dataset(dataset, tmp_path / 'labels')
    grid = GridSpec(4, 4)
    for sample in read_dataset(tmp_path / 'labels').samples:
        areas = [b.area for b in sample.boxes]
        if sample.situation == Situation.NO_OBJECT:
            assert areas == []
            assert sample.grid_targets(grid) is None
            continue
        for box in sample.boxes:
            assert 0.0 <= box.x <= 1.0 and 0.0 <= box.y <= 1.0
            x0, y0 = box.x - box.w / 2, box.y - box.h / 2
            x1, y1 = box.x + box.w / 2, box.y + box.h / 2
            assert x0 >= -1e-9 and y0 >= -1e-9 and x1 <= 1 + 1e-9 and y1 <= 1 + 1e-9
        if sample.situation == Situation.FAR_OBJECTS:
            assert 1 <= len(areas) <= 4
            assert max(areas) <= config.far_area_max + 1e-12
        else:
            assert len(areas) == 1
            assert areas[0] >= config.close_area_min - 1e-12
        assert sample.grid_targets(grid).sum() == pytest.approx(1.0, abs=1e-9)


def test_gen_sample_same_seed_is_bit_identical():
    config = default_scene_config()
    a = gen_sample(Situation.FAR_OBJECTS, make_rng(5), config)
    b = gen_sample(Situation.FAR_OBJECTS, make_rng(5), config)
    assert np.array_equal(a.image, b.image)
    assert a.boxes == b.boxes


def test_gen_sample_rejects_invalid_situation(rng):
    with pytest.raises(DataError):
        gen_sample(7, rng, default_scene_config())


def test_scene_config_validation():
    with pytest.raises(ConfigError):
        SceneConfig(far_area_max=0.3, close_area_min=0.2)
    with pytest.raises(ConfigError):
        SceneConfig.from_dict({'unknown_key': 1})


def test_derive_seed_is_pure():
    assert derive_seed(1, 10) == derive_seed(1, 10)
    assert derive_seed(1, 10) != derive_seed(1, 11)
    assert derive_seed(1, 10) != derive_seed(2, 10)


def test_gen_dataset_counts_and_split(tiny_scene):
    dataset = gen_dataset((10, 5, 5), 3, tiny_scene)
    assert len(dataset.samples) == 20
    assert dataset.class_counts('test') == [2, 1, 1]
    assert dataset.class_counts('train') == [8, 4, 4]
    assert set(dataset.train_indices).isdisjoint(dataset.test_indices)


def test_gen_dataset_single_close_sample(tiny_scene):
    dataset = gen_dataset((0, 0, 1), 1, tiny_scene)
    assert len(dataset.samples) == 1
    assert dataset.samples[0].situation == Situation.CLOSE_OBJECT


@pytest.mark.parametrize('counts', [(0, 0, 0), (1, -1, 1), (1, 2)])
def test_gen_dataset_rejects_bad_counts(tiny_scene, counts):
    with pytest.raises(DataError):
        gen_dataset(counts, 1, tiny_scene)


def test_write_and_read_dataset(tmp_path, tiny_scene):
    dataset = gen_dataset((3, 3, 3), 2, tiny_scene)
    write_dataset(dataset, tmp_path / 'a')
    loaded = read_dataset(tmp_path / 'a')
    assert [s.situation for s in loaded.samples] == [s.situation for s in dataset.samples]
    assert loaded.test_indices == dataset.test_indices
    for original, back in zip(dataset.samples, loaded.samples):
        assert np.abs(original.image - back.image).max() <= 0.5 / 255 + 1e-12
        assert back.boxes == original.boxes

    records = [json.loads(line) for line in (tmp_path / 'a' / MANIFEST_FILE).read_text().splitlines()]
    assert records[0]['file'] == 'images/00000.ppm'
    assert {r['split'] for r in records} <= {'train', 'test'}


def test_same_seed_writes_identical_tree(tmp_path, tiny_scene):
    for name in ('a', 'b'):
        write_dataset(gen_dataset((2, 2, 2), 9, tiny_scene), tmp_path / name)
    files_a = sorted(p.relative_to(tmp_path / 'a') for p in (tmp_path / 'a').rglob('*') if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / 'b') for p in (tmp_path / 'b').rglob('*') if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / 'a' / rel).read_bytes() == (tmp_path / 'b' / rel).read_bytes()


def test_read_dataset_missing_directory(tmp_path):
    with pytest.raises(DataError):
        read_dataset(tmp_path / 'nada')


def test_proxy_dataset_is_balanced(tiny_scene):
    proxy = gen_proxy_dataset(8, 1, tiny_scene)
    assert proxy.images.shape == (8, 3, 16, 16)
    assert proxy.num_classes == len(BACKGROUND_KINDS)
    assert np.bincount(proxy.labels).tolist() == [2, 2, 2, 2]
