"""
Linha de comando do MAOD.

    python -m maod gen   --counts 607,452,328 --seed 1 --out runs/dados
    python -m maod train --data runs/dados --head all --out runs/modelos
    python -m maod eval  --data runs/dados --checkpoints runs/modelos
    python -m maod bench --checkpoints runs/modelos --frames 100 --trials 30
    python -m maod sim   --oracle --worlds 10
    python -m maod compare --data runs/dados --backbones mobile,shuffle
    python -m maod serve --checkpoints runs/modelos --port 5050

Códigos de saída: 0 sucesso, 1 erro de uso, 2 erro de dados/validação,
3 violação de invariante (ou erro inesperado).
"""
import argparse
import json
import logging
import platform
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import psutil

import maod
from maod.acquisition import AcquisitionResponder, OpenCVCameraSource, serve_tcp
from maod.backbone import BACKBONE_PRESETS, EXTRACTOR_PREFIX, BackboneConfig, preset_blocks
from maod.checkpoint import load_checkpoint, save_checkpoint
from maod.config import (DEFAULT_COUNTS, DEFAULT_SEED, LOG_FILE, LOG_FORMAT, LOG_LEVEL, RUNS_DIR,
                         config_hash, load_run_config)
from maod.evaluation import (ModelPredictor, OraclePredictor, evaluate_fine, evaluate_meta,
                             evaluate_rough, metrics_frame)
from maod.exceptions import DataError, InvariantViolation, MAODError, UsageError
from maod.geometry import Calibration
from maod.heads import GridSpec, HeadConfig
from maod.pipeline import (CHECKPOINT_NAMES, MAODPipeline, amortization_probe, build_models,
                           load_models, timing_frame)
from maod.reports import (bench_report, comparison_report, evaluation_report, loss_curve_frame,
                          plot_confusion, plot_losses, sim_report, training_report, write_csv, write_text)
from maod.scenegen import SceneConfig, gen_dataset, read_dataset, write_dataset
from maod.simulator import OracleDetector, SimCamera, SimConfig, run_worlds, simulate_approach
from maod.tensor_core import make_rng
from maod.training import HEAD_NAMES, pretrain_extractor, train_heads

logger = logging.getLogger(__name__)

MANIFEST_FILE = 'run_manifest.json'


# ===========================
# INFRAESTRUTURA
# ===========================
class _Parser(argparse.ArgumentParser):
    """argparse que levanta UsageError em vez de chamar sys.exit."""

    def error(self, message):
        raise UsageError(message)


def _parse_counts(text: str) -> List[int]:
    try:
        counts = [int(part) for part in text.split(',')]
    except ValueError:
        raise UsageError(f"--counts espera A,B,C inteiros, recebido {text!r}")
    if len(counts) != 3:
        raise UsageError(f"--counts espera exatamente 3 valores, recebido {len(counts)}")
    return counts


def _parse_backbones(text: str) -> List[str]:
    names = [part.strip() for part in text.split(',') if part.strip()]
    unknown = [n for n in names if n not in BACKBONE_PRESETS]
    if not names or unknown:
        raise UsageError(f"--backbones espera presets de {sorted(BACKBONE_PRESETS)}, recebido {text!r}")
    if len(set(names)) != len(names):
        raise UsageError(f"--backbones repetidos: {text!r}")
    return names


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=DEFAULT_SEED, help='Semente global')
    common.add_argument('--config', type=Path, default=None, help='Arquivo YAML de configuração')
    common.add_argument('--out', type=Path, default=None, help='Diretório de saída da execução')
    common.add_argument('--verbose', action='store_true', help='Log em nível DEBUG')
    common.add_argument('--backbone', choices=sorted(BACKBONE_PRESETS), default=None,
                        help='Substitui os blocos do extrator por um preset')

    parser = _Parser(prog='maod', description=maod.__description__)
    sub = parser.add_subparsers(dest='command', parser_class=_Parser)

    gen = sub.add_parser('gen', parents=[common], help='Gera o dataset sintético')
    gen.add_argument('--counts', default=','.join(map(str, DEFAULT_COUNTS)),
                     help='Amostras NoObject,FarObjects,CloseObject')

    train = sub.add_parser('train', parents=[common], help='Pré-treina o extrator e treina as cabeças')
    train.add_argument('--data', type=Path, required=True, help='Diretório do dataset (saída de gen)')
    train.add_argument('--head', choices=HEAD_NAMES + ('all',), default='all')
    train.add_argument('--extractor', type=Path, default=None, help='Reutiliza um extractor.ckpt')
    train.add_argument('--plots', action='store_true', help='Salva as curvas de perda em PNG')

    ev = sub.add_parser('eval', parents=[common], help='Avalia os modelos no conjunto de teste')
    ev.add_argument('--data', type=Path, required=True)
    ev.add_argument('--checkpoints', type=Path, default=None)
    ev.add_argument('--oracle', action='store_true', help='Usa predições perfeitas (valida o protocolo)')
    ev.add_argument('--plots', action='store_true', help='Salva a matriz de confusão em PNG')

    bench = sub.add_parser('bench', parents=[common], help='Mede tempos por estágio e amortização')
    bench.add_argument('--checkpoints', type=Path, required=True)
    bench.add_argument('--data', type=Path, default=None, help='Usa as imagens de teste deste dataset')
    bench.add_argument('--frames', type=int, default=None)
    bench.add_argument('--trials', type=int, default=None)

    sim = sub.add_parser('sim', parents=[common], help='Simulação de aproximação em malha fechada')
    sim.add_argument('--checkpoints', type=Path, default=None)
    sim.add_argument('--oracle', action='store_true', help='Detector de verdade em vez dos modelos')
    sim.add_argument('--worlds', type=int, default=0, help='Roda N mundos sorteados')
    sim.add_argument('--max-steps', type=int, default=None)
    sim.add_argument('--empty', action='store_true', help='Mundo sem objeto')

    serve = sub.add_parser('serve', parents=[common], help='Respondedor de aquisição em socket local')
    serve.add_argument('--checkpoints', type=Path, required=True)
    serve.add_argument('--port', type=int, required=True)
    serve.add_argument('--camera', type=int, default=0, help='Índice do dispositivo OpenCV')

    compare = sub.add_parser('compare', parents=[common],
                             help='Treina e avalia o pipeline com cada backbone e compara qualidade e custo')
    compare.add_argument('--data', type=Path, required=True)
    compare.add_argument('--backbones', default=','.join(BACKBONE_PRESETS),
                         help='Presets separados por vírgula')
    return parser


def setup_logging(run_dir: Path, verbose: bool):
    run_dir.mkdir(parents=True, exist_ok=True)
    level = logging.DEBUG if verbose else getattr(logging, str(LOG_LEVEL).upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(run_dir / LOG_FILE, encoding='utf-8'),
            logging.StreamHandler()
        ],
        force=True,
    )


def resolve_run_dir(out: Optional[Path], command: str, digest: str) -> Path:
    if out is not None:
        return out
    stamp = datetime.now().strftime('%Y%m%d_%H%M%S')
    return RUNS_DIR / f"{stamp}_{command}_{digest[:8]}"


def write_manifest(run_dir: Path, args: argparse.Namespace, cfg: Dict[str, Any]) -> Path:
    """Manifesto sem data/hora: comando, argumentos, semente, hash e versões."""
    arguments = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
                 if k not in ('out', 'verbose')}
    manifest = {
        'command': args.command,
        'arguments': arguments,
        'seed': args.seed,
        'config_hash': config_hash(cfg),
        'config': cfg,
        'versions': {'maod': maod.__version__, 'python': platform.python_version(),
                     'numpy': np.__version__},
    }
    path = run_dir / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    return path


def _architecture(cfg: Dict[str, Any]):
    backbone = BackboneConfig.from_dict(cfg['backbone'])
    h = cfg['heads']
    heads = HeadConfig(GridSpec(int(h['grid_rows']), int(h['grid_cols'])), int(h['meta_channels']),
                       int(h['rough_channels']), int(h['fine_channels']), float(h['dropout']))
    return backbone, heads


def _calibration(cfg: Dict[str, Any]) -> Calibration:
    return Calibration.from_dict(cfg['calibration'], int(cfg['scene']['image_size']))


def _require_dir(path: Optional[Path], flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} é obrigatório para este comando")
    if not path.exists():
        raise DataError(f"Diretório não encontrado: {path}")
    return path


# ===========================
# COMANDOS
# ===========================
def cmd_gen(args, cfg: Dict[str, Any], run_dir: Path) -> int:
    counts = _parse_counts(args.counts)
    dataset = gen_dataset(counts, args.seed, SceneConfig.from_dict(cfg['scene']))
    write_dataset(dataset, run_dir)
    return 0


def cmd_train(args, cfg: Dict[str, Any], run_dir: Path) -> int:
    dataset = read_dataset(_require_dir(args.data, '--data'))
    backbone, head_cfg = _architecture(cfg)
    models, bundle = build_models(backbone, head_cfg, make_rng(args.seed))

    proxy = None
    if args.extractor is not None:
        if not args.extractor.exists():
            raise DataError(f"Checkpoint do extrator não encontrado: {args.extractor}")
        bundle.assign_from(load_checkpoint(args.extractor), prefix=EXTRACTOR_PREFIX)
        if not models.extractor.frozen:
            raise DataError(f"{args.extractor} não contém um extrator congelado")
        logger.info(f"📂 Extrator reutilizado de {args.extractor}")
    else:
        images = np.stack([s.image for s in dataset.train])
        proxy = pretrain_extractor(models.extractor, bundle, dataset.config, cfg['train']['proxy'], args.seed,
                                   calibration_images=images)

    before = bundle.checksum(EXTRACTOR_PREFIX)
    heads = HEAD_NAMES if args.head == 'all' else (args.head,)
    results = train_heads(models, bundle, dataset.train, cfg['train'], args.seed, heads)
    after = bundle.checksum(EXTRACTOR_PREFIX)
    if after != before:
        raise InvariantViolation("Checksum do extrator mudou durante o treino")

    save_checkpoint(bundle, run_dir / CHECKPOINT_NAMES['extractor'], prefix=EXTRACTOR_PREFIX)
    for name, result in results.items():
        save_checkpoint(bundle, run_dir / CHECKPOINT_NAMES[name], prefix=f"{name}.")
        write_csv(loss_curve_frame(result.losses), run_dir / f"loss_{name}.csv")
    if proxy is not None:
        write_csv(loss_curve_frame(proxy.losses), run_dir / 'loss_proxy.csv')

    write_text(training_report(results, proxy, after), run_dir / 'training_report.txt')
    if args.plots and results:
        plot_losses({name: r.losses for name, r in results.items()}, run_dir / 'loss_curves.png')
    return 0


def cmd_eval(args, cfg: Dict[str, Any], run_dir: Path) -> int:
    dataset = read_dataset(_require_dir(args.data, '--data'))
    backbone, head_cfg = _architecture(cfg)
    if args.oracle:
        predictor = OraclePredictor(head_cfg.grid)
    else:
        models, _ = load_models(_require_dir(args.checkpoints, '--checkpoints'), backbone, head_cfg)
        predictor = ModelPredictor(models)

    ev = cfg['eval']
    test = dataset.test
    meta = evaluate_meta(predictor, test)
    rough = evaluate_rough(predictor, test, head_cfg.grid, float(ev['rough_threshold']), ev['rough_score'])
    fine = evaluate_fine(predictor, test, float(ev['iou_threshold']))

    write_csv(meta.confusion.to_frame(), run_dir / 'confusion.csv', index=True)
    write_csv(metrics_frame({'rough': rough, 'fine': fine.metrics}), run_dir / 'metrics.csv')
    per_class = [{'situation': label, **values} for label, values in meta.per_class.items()]
    write_csv(pd.DataFrame(per_class), run_dir / 'meta_per_class.csv')
    write_text(evaluation_report(meta, rough, fine, float(ev['rough_threshold']), ev['rough_score'],
                                 float(ev['iou_threshold'])), run_dir / 'evaluation_report.txt')
    if args.plots:
        plot_confusion(meta.confusion, run_dir / 'confusion_matrix.png')
    return 0


def _host() -> Dict[str, Any]:
    return {'cpu_count': psutil.cpu_count(logical=True),
            'memory_gb': round(psutil.virtual_memory().total / 1024 ** 3, 1),
            'threads': maod._THREADS}


def cmd_bench(args, cfg: Dict[str, Any], run_dir: Path) -> int:
    backbone, head_cfg = _architecture(cfg)
    models, _ = load_models(_require_dir(args.checkpoints, '--checkpoints'), backbone, head_cfg)
    frames_n = args.frames if args.frames is not None else int(cfg['bench']['frames'])
    trials = args.trials if args.trials is not None else int(cfg['bench']['trials'])
    if frames_n < 1:
        raise DataError(f"--frames deve ser ≥ 1, recebido {frames_n}")

    if args.data is not None:
        images = [s.image for s in read_dataset(_require_dir(args.data, '--data')).test]
    else:
        generated = gen_dataset((frames_n, frames_n, frames_n), args.seed, SceneConfig.from_dict(cfg['scene']))
        images = [s.image for s in generated.samples]
    order = make_rng(args.seed).permutation(len(images))
    frames = [images[i % len(images)] for i in np.resize(order, frames_n)]

    probe = amortization_probe(frames[0], models, trials)
    _, timing = MAODPipeline(models).run_sequence(frames)

    write_csv(timing_frame({k: probe.samples[k] for k in ('shared', 'unshared', 'head_only')}),
              run_dir / 'timing_probe.csv')
    write_csv(timing_frame({k: probe.samples[k] for k in ('extract', 'meta', 'head')}),
              run_dir / 'timing_stages.csv')
    write_text(bench_report(probe, timing, _host()), run_dir / 'bench_report.txt')
    return 0


def cmd_sim(args, cfg: Dict[str, Any], run_dir: Path) -> int:
    sim_cfg = SimConfig.from_dict(cfg['sim'])
    calib = _calibration(cfg)
    max_steps = args.max_steps if args.max_steps is not None else sim_cfg.max_steps
    if max_steps < 1:
        raise DataError(f"--max-steps deve ser ≥ 1, recebido {max_steps}")

    if args.oracle:
        def factory(camera):
            return OracleDetector(camera, sim_cfg.oracle_close_area)
    else:
        backbone, head_cfg = _architecture(cfg)
        models, _ = load_models(_require_dir(args.checkpoints, '--checkpoints'), backbone, head_cfg)

        def factory(camera):
            return MAODPipeline(models)

    if args.worlds > 0:
        summaries = run_worlds(args.worlds, args.seed, calib, sim_cfg, factory, max_steps)
        write_csv(pd.DataFrame(summaries), run_dir / 'worlds.csv')
    else:
        world = sim_cfg.default_world(with_object=not args.empty)
        result = simulate_approach(world, factory(SimCamera(calib, sim_cfg, args.seed)), calib,
                                   max_steps, sim_cfg, args.seed)
        write_csv(result.to_frame(), run_dir / 'trajectory.csv')
        summaries = [{'world': 0, 'seed': args.seed, **result.summary()}]
    write_text(sim_report(summaries), run_dir / 'sim_report.txt')
    return 0


def cmd_serve(args, cfg: Dict[str, Any], run_dir: Path) -> int:
    backbone, head_cfg = _architecture(cfg)
    models, _ = load_models(_require_dir(args.checkpoints, '--checkpoints'), backbone, head_cfg)
    responder = AcquisitionResponder(MAODPipeline(models), _calibration(cfg))
    camera = OpenCVCameraSource(args.camera, int(cfg['scene']['image_size']))
    serve_tcp(args.port, responder, camera)
    return 0


def compare_backbone(name: str, cfg: Dict[str, Any], dataset, seed: int, run_dir: Path) -> Dict[str, Any]:
    """Pipeline completo (pré-treino, cabeças, avaliação, sequência) com um preset de backbone."""
    logger.info(f"{'=' * 80}\n🧱 Backbone '{name}'\n{'=' * 80}")
    cfg = {**cfg, 'backbone': {**cfg['backbone'], 'blocks': preset_blocks(name)}}
    backbone, head_cfg = _architecture(cfg)
    models, bundle = build_models(backbone, head_cfg, make_rng(seed))
    images = np.stack([s.image for s in dataset.train])
    pretrain_extractor(models.extractor, bundle, dataset.config, cfg['train']['proxy'], seed,
                       calibration_images=images)
    train_heads(models, bundle, dataset.train, cfg['train'], seed)

    out = run_dir / name
    out.mkdir(parents=True, exist_ok=True)
    for part, filename in CHECKPOINT_NAMES.items():
        prefix = EXTRACTOR_PREFIX if part == 'extractor' else f"{part}."
        save_checkpoint(bundle, out / filename, prefix=prefix)

    ev = cfg['eval']
    predictor = ModelPredictor(models)
    test = dataset.test
    meta = evaluate_meta(predictor, test)
    rough = evaluate_rough(predictor, test, head_cfg.grid, float(ev['rough_threshold']), ev['rough_score'])
    fine = evaluate_fine(predictor, test, float(ev['iou_threshold']))
    _, timing = MAODPipeline(models).run_sequence([s.image for s in test])
    return {'backbone': name, 'extractor_params': bundle.count(EXTRACTOR_PREFIX), 'params': bundle.count(),
            'meta_accuracy': meta.accuracy, 'rough_f1': rough.f1, 'fine_f1': fine.metrics.f1,
            'fine_mean_iou': fine.mean_iou, 'cpu_time': timing.cpu_time}


def cmd_compare(args, cfg: Dict[str, Any], run_dir: Path) -> int:
    names = _parse_backbones(args.backbones)
    dataset = read_dataset(_require_dir(args.data, '--data'))
    rows = [compare_backbone(name, cfg, dataset, args.seed, run_dir) for name in names]
    frame = pd.DataFrame(rows)
    write_csv(frame, run_dir / 'comparison.csv')
    write_text(comparison_report(frame), run_dir / 'comparison_report.txt')
    return 0


COMMANDS = {
    'gen': cmd_gen,
    'train': cmd_train,
    'eval': cmd_eval,
    'bench': cmd_bench,
    'sim': cmd_sim,
    'serve': cmd_serve,
    'compare': cmd_compare,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Ponto de entrada; devolve o código de saída."""
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"Informe um comando: {', '.join(COMMANDS)}")
        cfg = load_run_config(args.config)
        if args.backbone is not None:
            cfg['backbone']['blocks'] = preset_blocks(args.backbone)
        cfg_digest = config_hash(cfg)
        run_dir = resolve_run_dir(args.out, args.command, cfg_digest)
        setup_logging(run_dir, args.verbose)
        logger.info(f"{'=' * 80}\n🚀 maod {args.command} | semente {args.seed} | config {cfg_digest[:8]} "
                    f"| saída {run_dir}\n{'=' * 80}")
        write_manifest(run_dir, args, cfg)
        code = COMMANDS[args.command](args, cfg, run_dir)
        logger.info(f"✅ Comando '{args.command}' concluído")
        return code
    except MAODError as e:
        logger.error(f"❌ {e}")
        logger.debug("Detalhes", exc_info=True)
        print(f"maod: erro: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"❌ Erro inesperado: {e}")
        return 3
