"""Testes de ponta a ponta da linha de comando (configuração mínima)."""
import copy
import json

import pandas as pd
import pytest
import yaml

from maod.cli import MANIFEST_FILE, build_parser, main
from maod.config import LOG_FILE
from maod.pipeline import CHECKPOINT_NAMES

TINY_CONFIG = {
    'scene': {'image_size': 16, 'proxy_samples': 16},
    'backbone': {
        'input_shape': [3, 16, 16],
        'blocks': [
            {'out_channels': 8, 'kernel_size': 3, 'stride': 2, 'activation': 'relu'},
            {'out_channels': 8, 'kernel_size': 3, 'stride': 2, 'activation': 'relu'},
        ],
    },
    'heads': {'meta_channels': 6, 'rough_channels': 6, 'fine_channels': 6},
    'train': {
        'proxy': {'epochs': 1, 'batch_size': 8},
        'meta': {'epochs': 1, 'batch_size': 8},
        'rough': {'epochs': 1, 'batch_size': 8},
        'fine': {'epochs': 1, 'batch_size': 8},
    },
    'bench': {'frames': 3},
}


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    config = tmp_path / 'tiny.yaml'
    config.write_text(yaml.safe_dump(TINY_CONFIG), encoding='utf-8')
    return tmp_path, config


@pytest.fixture
def data_dir(workspace):
    root, config = workspace
    out = root / 'data'
    assert main(['gen', '--counts', '6,6,6', '--seed', '1', '--config', str(config), '--out', str(out)]) == 0
    return out


def test_gen_writes_dataset_and_manifest(data_dir):
    for name in ('labels.jsonl', 'dataset.json', MANIFEST_FILE, LOG_FILE):
        assert (data_dir / name).exists()
    manifest = json.loads((data_dir / MANIFEST_FILE).read_text())
    assert manifest['command'] == 'gen'
    assert manifest['seed'] == 1
    assert 'out' not in manifest['arguments']
    assert len(manifest['config_hash']) == 64
    assert len(list((data_dir / 'images').glob('*.ppm'))) == 18


def test_gen_is_reproducible(workspace):
    root, config = workspace
    for name in ('a', 'b'):
        assert main(['gen', '--counts', '2,2,2', '--config', str(config), '--out', str(root / name)]) == 0
    assert (root / 'a' / 'labels.jsonl').read_bytes() == (root / 'b' / 'labels.jsonl').read_bytes()
    assert (root / 'a' / MANIFEST_FILE).read_bytes() == (root / 'b' / MANIFEST_FILE).read_bytes()


def test_eval_with_oracle_scores_perfectly(workspace, data_dir):
    root, config = workspace
    out = root / 'oracle'
    assert main(['eval', '--oracle', '--data', str(data_dir), '--config', str(config), '--out', str(out)]) == 0
    metrics = pd.read_csv(out / 'metrics.csv').set_index('stage')
    assert metrics.loc['rough', 'precision'] == 1.0
    assert metrics.loc['fine', 'f1'] == 1.0
    confusion = pd.read_csv(out / 'confusion.csv', index_col=0)
    assert confusion.values.trace() == confusion.values.sum()
    assert (out / 'evaluation_report.txt').exists()


def test_train_eval_bench_and_sim_with_models(workspace, data_dir):
    root, config = workspace
    models = root / 'models'
    assert main(['train', '--data', str(data_dir), '--config', str(config), '--out', str(models)]) == 0
    for filename in CHECKPOINT_NAMES.values():
        assert (models / filename).exists()
    for name in ('meta', 'rough', 'fine', 'proxy'):
        assert (models / f'loss_{name}.csv').exists()
    assert (models / 'training_report.txt').exists()

    retrained = root / 'fine_only'
    assert main(['train', '--data', str(data_dir), '--config', str(config), '--head', 'fine',
                 '--extractor', str(models / CHECKPOINT_NAMES['extractor']), '--out', str(retrained)]) == 0
    assert (retrained / CHECKPOINT_NAMES['extractor']).read_bytes() == \
        (models / CHECKPOINT_NAMES['extractor']).read_bytes()
    assert not (retrained / CHECKPOINT_NAMES['meta']).exists()

    evaluated = root / 'eval'
    assert main(['eval', '--data', str(data_dir), '--checkpoints', str(models), '--config', str(config),
                 '--out', str(evaluated)]) == 0
    assert (evaluated / 'meta_per_class.csv').exists()

    bench = root / 'bench'
    assert main(['bench', '--checkpoints', str(models), '--config', str(config), '--out', str(bench)]) == 0
    probe = pd.read_csv(bench / 'timing_probe.csv')
    assert probe['stage'].tolist() == ['shared', 'unshared', 'head_only']
    assert 'amortização' in (bench / 'bench_report.txt').read_text(encoding='utf-8').lower()

    sim = root / 'sim'
    assert main(['sim', '--checkpoints', str(models), '--max-steps', '3', '--config', str(config),
                 '--out', str(sim)]) == 0
    assert len(pd.read_csv(sim / 'trajectory.csv')) <= 3


def test_sim_with_oracle_grasps(workspace):
    root, _ = workspace
    out = root / 'sim'
    assert main(['sim', '--oracle', '--out', str(out)]) == 0
    trajectory = pd.read_csv(out / 'trajectory.csv')
    assert trajectory['phase'].iloc[-1] == 'Grasped'
    assert (out / 'sim_report.txt').exists()


def test_sim_empty_world_and_worlds(workspace):
    root, _ = workspace
    assert main(['sim', '--oracle', '--empty', '--max-steps', '5', '--out', str(root / 'empty')]) == 0
    assert set(pd.read_csv(root / 'empty' / 'trajectory.csv')['phase']) == {'Searching'}
    assert main(['sim', '--oracle', '--worlds', '2', '--out', str(root / 'worlds')]) == 0
    assert len(pd.read_csv(root / 'worlds' / 'worlds.csv')) == 2


@pytest.mark.parametrize('argv', [
    [],
    ['gen', '--counts', '1,2'],
    ['gen', '--bogus'],
    ['eval'],
    ['voar'],
])
def test_usage_errors_exit_with_one(workspace, argv):
    root, _ = workspace
    if argv and argv[0] == 'gen':
        argv = argv + ['--out', str(root / 'out')]
    assert main(argv) == 1


def test_data_and_config_errors_exit_with_two(workspace, capsys):
    root, config = workspace
    assert main(['eval', '--oracle', '--data', str(root / 'nada'), '--out', str(root / 'e')]) == 2
    assert 'maod: erro' in capsys.readouterr().err

    bad = root / 'bad.yaml'
    bad.write_text('scene:\n  cor: azul\n', encoding='utf-8')
    assert main(['gen', '--config', str(bad), '--out', str(root / 'g')]) == 2
    assert main(['gen', '--config', str(root / 'faltando.yaml'), '--out', str(root / 'g')]) == 2
    assert main(['gen', '--counts', '0,0,0', '--config', str(config), '--out', str(root / 'g')]) == 2


def test_default_run_dir_lives_under_runs(workspace):
    root, config = workspace
    assert main(['gen', '--counts', '1,1,1', '--config', str(config)]) == 0
    created = list((root / 'runs').iterdir())
    assert len(created) == 1
    assert '_gen_' in created[0].name


def test_parser_lists_all_commands():
    parser = build_parser()
    for command in ('gen', 'train', 'eval', 'bench', 'sim', 'serve', 'compare'):
        assert parser.parse_args([command] + {'train': ['--data', 'x'], 'eval': ['--data', 'x'],
                                              'compare': ['--data', 'x'],
                                              'bench': ['--checkpoints', 'x'],
                                              'serve': ['--checkpoints', 'x', '--port', '1']}
                                 .get(command, [])).command == command


def test_train_is_reproducible(workspace, data_dir):
    root, config = workspace
    for name in ('t1', 't2'):
        assert main(['train', '--data', str(data_dir), '--head', 'meta', '--config', str(config),
                     '--out', str(root / name)]) == 0
    for filename in ('extractor.ckpt', 'meta.ckpt', 'loss_meta.csv', 'training_report.txt', MANIFEST_FILE):
        assert (root / 't1' / filename).read_bytes() == (root / 't2' / filename).read_bytes()


def test_backbone_flag_replaces_blocks_in_manifest(workspace):
    root, config = workspace
    out = root / 'shuffled'
    assert main(['gen', '--counts', '1,1,1', '--backbone', 'shuffle', '--config', str(config),
                 '--out', str(out)]) == 0
    manifest = json.loads((out / MANIFEST_FILE).read_text())
    kinds = [block['kind'] for block in manifest['config']['backbone']['blocks']]
    assert kinds == ['separable', 'shuffle', 'shuffle', 'shuffle']
    assert manifest['arguments']['backbone'] == 'shuffle'


def test_compare_reports_quality_and_cost_per_backbone(workspace):
    root, _ = workspace
    tiny32 = copy.deepcopy(TINY_CONFIG)
    tiny32['scene']['image_size'] = 32
    tiny32['backbone']['input_shape'] = [3, 32, 32]
    config = root / 'tiny32.yaml'
    config.write_text(yaml.safe_dump(tiny32), encoding='utf-8')
    data = root / 'data32'
    assert main(['gen', '--counts', '6,6,6', '--config', str(config), '--out', str(data)]) == 0

    out = root / 'compare'
    assert main(['compare', '--data', str(data), '--config', str(config), '--out', str(out)]) == 0
    frame = pd.read_csv(out / 'comparison.csv').set_index('backbone')
    assert frame.index.tolist() == ['mobile', 'shuffle']
    assert (frame['cpu_time'] > 0).all()
    assert frame[['meta_accuracy', 'rough_f1', 'fine_f1']].apply(lambda c: c.between(0, 1)).all().all()
    assert frame.loc['shuffle', 'extractor_params'] < frame.loc['mobile', 'extractor_params']
    for name in ('mobile', 'shuffle'):
        for filename in CHECKPOINT_NAMES.values():
            assert (out / name / filename).exists()
    assert 'shuffle' in (out / 'comparison_report.txt').read_text(encoding='utf-8')

    assert main(['compare', '--data', str(data), '--backbones', 'mobile,vgg', '--config', str(config),
                 '--out', str(root / 'bad')]) == 1
