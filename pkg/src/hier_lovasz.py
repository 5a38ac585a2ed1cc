from __future__ import annotations
import sys
import csv
import logging
import argparse
from dataclasses import replace
from typing import Callable, TextIO

import jaraco.logging
import numpy as np

from console import Console, log, setup_logging
from config import RunConfig, load_run_config, load_scene_spec
from core import (
    ClassCatalog, HleError, PanopticMap, ValidationError, load_instance_map, load_label_map,
    load_panoptic, save_panoptic, write_grid,
)
from decoder import DOWNSAMPLE_FACTORS, decode
from embed_model import LOSS_VARIANTS, load_fields, load_state, save_fields, save_state
from helpers import parse_float_list, parse_int_list, parse_pixel
from metrics import METRIC_NAMES, evaluate_all, panoptic_quality
from synth import generate, standard_catalog, standard_suite, suite_scene
from text import align_table, format_value
from thomson import thomson_init
from trainer import TrainConfig, TrainResult, hierarchy_report, run_ablation, summarize_ablation, train
import bench
import gradcheck
import viz

CURVE_HEADER = ['step', 'seg', 'seg_mean', 'ins', 'ins_var', 'seed', 'total']

# -------------------------------------------------------------
#  shared plumbing

def _catalog(args) -> ClassCatalog:
    catalog = ClassCatalog.from_file(args.catalog) if getattr(args, 'catalog', None) else standard_catalog()
    problems = catalog.validate()
    if problems:
        raise ValidationError('; '.join(problems))
    return catalog

def _open_out(path: str | None) -> TextIO:
    return open(path, 'w', encoding='utf-8', newline='') if path and path != '-' else sys.stdout

def _close_out(f: TextIO):
    if f is not sys.stdout:
        f.close()

def _parsed(parse: Callable, text: str, option: str):
    try:
        return parse(text)
    except ValueError:
        raise ValidationError(f"{option}: cannot parse '{text}'") from None

def _scene(args, catalog: ClassCatalog):
    """ --scene (suite name or scene spec file), --suite, or a labels + instances pair of HLE1 files """
    if args.scene:
        suite_names = [n for n, _ in standard_suite()]
        spec = suite_scene(args.scene) if args.scene in suite_names else load_scene_spec(args.scene)
        return generate(spec, catalog)
    if args.suite:
        return generate(suite_scene(args.suite), catalog)
    if not (args.labels and args.instances):
        raise ValidationError("give --scene, --suite, or both --labels and --instances")
    return load_label_map(args.labels), load_instance_map(args.instances)


# -------------------------------------------------------------
#  subcommands

def main_gen_scene(args, cfg: RunConfig) -> int:
    catalog = _catalog(args)
    if args.spec:
        spec = load_scene_spec(args.spec)
    elif args.suite:
        spec = suite_scene(args.suite)
    else:
        raise ValidationError("give --spec or --suite")
    if args.seed is not None:
        spec = replace(spec, rng_seed=args.seed)
    labels, instances = generate(spec, catalog)
    write_grid(args.out_labels, labels.data)
    write_grid(args.out_instances, instances.data)
    if args.out_panoptic:
        save_panoptic(args.out_panoptic, PanopticMap.from_ground_truth(labels, instances, catalog))
    log.info(f"scene {spec.height}x{spec.width} with {len(set(instances.data.reshape(-1).tolist()) - {0})} instances")
    return 0

def main_thomson(args, cfg: RunConfig) -> int:
    config = cfg.thomson
    for key in ('k', 'd', 'steps'):
        if getattr(args, key) is not None:
            setattr(config, key, getattr(args, key))
    if args.seed is not None:
        config.rng_seed = args.seed
    points = thomson_init(config)
    write_grid(args.out, points[:, None, :])
    gram = points @ points.T
    off = gram[~np.eye(len(points), dtype=bool)] if len(points) > 1 else np.zeros(1)
    Console.writeln(f"max_dot\t{off.max():.6f}")
    Console.writeln(f"min_dot\t{off.min():.6f}")
    return 0

def main_train(args, cfg: RunConfig) -> int:
    catalog = _catalog(args)
    config: TrainConfig = cfg.train
    if args.seed is not None:
        config.rng_seed = args.seed
    if args.steps is not None:
        config.steps = args.steps
    if args.variant:
        config.loss.variant = args.variant
    scene = _scene(args, catalog)
    result: TrainResult = train(scene, catalog, config)
    save_fields(args.out_fields, result.fields)
    save_state(args.out_state, result.state)
    if args.curve:
        with open(args.curve, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(CURVE_HEADER)
            for step, report in enumerate(result.curve):
                writer.writerow([step] + [f"{v:.8g}" for v in report.as_row()])
    if args.hierarchy:
        rows = [[h.instance_id, h.class_id, h.intra, h.same_class, h.other_class, 'yes' if h.ordered else 'no']
                for h in hierarchy_report(result.fields, *scene)]
        for line in align_table(['instance', 'class', 'intra', 'same_class', 'other_class', 'ordered'],
                                [[format_value(v) for v in row] for row in rows], directions='right'):
            Console.writeln(line)
    if result.curve:
        log.info(f"final total loss {result.curve[-1].total:.6f} after {len(result.curve)} steps")
    return 0

def main_decode(args, cfg: RunConfig) -> int:
    catalog = _catalog(args)
    fields, state = load_fields(args.fields), load_state(args.state)
    decoder_config = cfg.decoder
    if args.factor is not None:
        decoder_config.downsample_factor = args.factor
    panoptic = decode(fields, state, catalog, decoder_config)
    save_panoptic(args.out, panoptic)
    log.info(f"decoded {len(panoptic.segments)} segments to {args.out}")
    return 0

def main_eval(args, cfg: RunConfig) -> int:
    catalog = _catalog(args)
    pred, gt = load_panoptic(args.pred), load_panoptic(args.gt)
    metrics = [m.strip() for m in args.metrics.split(',') if m.strip()]
    for name, value in evaluate_all(pred, gt, catalog, metrics).items():
        Console.writeln(f"{name}\t{value:.6f}")
    if 'pq' in metrics:
        result = panoptic_quality(pred, gt, catalog)
        rows = []
        for class_id, c in sorted(result.per_class.items()):
            if not c.valid:
                continue
            info = catalog[class_id]
            rows.append([info.name, info.kind.value, c.pq, c.sq, c.rq, c.tp, c.fp, c.fn])
        Console.writeln('')
        for line in align_table(['class', 'kind', 'pq', 'sq', 'rq', 'tp', 'fp', 'fn'],
                                [[format_value(v) for v in row] for row in rows],
                                directions=['left', 'left'] + ['right'] * 6):
            Console.writeln(line)
    return 0

def main_bench_downsample(args, cfg: RunConfig) -> int:
    catalog = _catalog(args)
    fields, state = load_fields(args.fields), load_state(args.state)
    factors = _parsed(parse_int_list, args.factors, '--factors') if args.factors else list(DOWNSAMPLE_FACTORS)
    rows = bench.bench_downsample(fields, state, catalog, load_panoptic(args.gt), factors, cfg.decoder, args.repeats)
    out = _open_out(args.out)
    try:
        bench.write_bench_csv(rows, out)
    finally:
        _close_out(out)
    return 0

def main_gradcheck(args, cfg: RunConfig) -> int:
    names = [n.strip() for n in args.problems.split(',')] if args.problems else None
    results = gradcheck.run_gradcheck(names, args.points, args.seed or 0, args.step)
    rows, failed = [], []
    for name, checks in results.items():
        worst = max((c.worst for c in checks), default=0.0)
        ok = worst < args.tolerance
        if not ok:
            failed.append(name)
        rows.append([name, str(len(checks)), f"{worst:.3e}", 'ok' if ok else 'FAIL'])
    for line in align_table(['problem', 'points', 'worst_rel_err', 'status'], rows,
                            directions=['left', 'right', 'right', 'left']):
        Console.writeln(line)
    if failed:
        log.error(f"gradient mismatch above {args.tolerance:g} in {failed}")
        return 1
    return 0

def main_viz(args, cfg: RunConfig) -> int:
    fields = load_fields(args.fields)
    if args.out_prefix:
        viz.viz_embeddings(fields, args.out_prefix)
    if args.target:
        if not args.out_distance:
            raise ValidationError("--target needs --out-distance")
        viz.viz_distance(fields, _parsed(parse_pixel, args.target, '--target'), args.out_distance)
    if not (args.out_prefix or args.target):
        raise ValidationError("nothing to do, give --out-prefix and/or --target")
    return 0

def main_ablate(args, cfg: RunConfig) -> int:
    catalog = standard_catalog()
    names = [n.strip() for n in args.scenes.split(',')] if args.scenes else [n for n, _ in standard_suite()]
    scenes = [(name, generate(suite_scene(name), catalog)) for name in names]
    variants = [v.strip() for v in args.variants.split(',')]
    seeds = _parsed(parse_int_list, args.seeds, '--seeds')
    if args.steps is not None:
        cfg.train.steps = args.steps
    rows = run_ablation(scenes, catalog, variants, seeds, cfg.train, cfg.decoder, args.jobs)
    out = _open_out(args.out)
    try:
        writer = csv.writer(out, lineterminator='\n')
        writer.writerow(['scene', 'variant', 'seed', 'pq', 'final_loss'])
        for row in rows:
            writer.writerow([row.scene, row.variant, row.seed, f"{row.pq:.6f}", f"{row.final_loss:.6g}"])
    finally:
        _close_out(out)
    for variant, pq in summarize_ablation(rows).items():
        log.info(f"{variant}: mean PQ {pq:.4f}")
    return 0

def main_sweep(args, cfg: RunConfig) -> int:
    catalog = _catalog(args)
    fields, state = load_fields(args.fields), load_state(args.state)
    grid: dict[str, list[float]] = {}
    for key in bench.SWEEP_KEYS:
        values = getattr(args, key)
        if values:
            grid[key] = _parsed(parse_float_list, values, f"--{key.replace('_', '-')}")
    if not grid:
        raise ValidationError(f"give at least one of {['--' + k.replace('_', '-') for k in bench.SWEEP_KEYS]}")
    results = bench.sweep_thresholds(fields, state, catalog, load_panoptic(args.gt), grid, cfg.decoder)
    keys = list(grid)
    rows = [[format_value(s[k]) for k in keys] + [format_value(pq)] for s, pq in results[:args.top]]
    for line in align_table(keys + ['pq'], rows, directions='right'):
        Console.writeln(line)
    return 0


# -------------------------------------------------------------
#  argument parsing

def _common(parser: argparse.ArgumentParser, catalog=True, seed=False):
    jaraco.logging.add_arguments(parser, default_level=logging.INFO)
    parser.add_argument('--no-color', action='store_true', help="plain log output")
    parser.add_argument('-c', '--config', default=None, help="run config file (key = value lines, [sections])")
    parser.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help="override a config value, repeatable; 'section.key=value' for ambiguous keys")
    if catalog:
        parser.add_argument('--catalog', default=None, help="class catalog ini file (default: the built-in 5-class catalog)")
    if seed:
        parser.add_argument('--seed', type=int, default=None, help="rng seed; same seed, same output files")

def _scene_args(parser: argparse.ArgumentParser):
    parser.add_argument('--scene', default=None, help="suite scene name or scene spec ini file")
    parser.add_argument('--suite', default=None, help=f"standard suite scene: {', '.join(n for n, _ in standard_suite())}")
    parser.add_argument('--labels', default=None, help="semantic label map (HLE1)")
    parser.add_argument('--instances', default=None, help="instance id map (HLE1)")

def build_parser() -> argparse.ArgumentParser:
    argparser = argparse.ArgumentParser(prog='hier_lovasz',
                                        description="Hierarchical Lovász embeddings for panoptic segmentation, at desk scale")
    sub = argparser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-scene', help="render a synthetic scene")
    _common(p, seed=True)
    p.add_argument('--spec', default=None, help="scene spec ini file")
    p.add_argument('--suite', default=None, help="standard suite scene name")
    p.add_argument('--out-labels', required=True)
    p.add_argument('--out-instances', required=True)
    p.add_argument('--out-panoptic', default=None, help="also write the ground-truth panoptic map")
    p.set_defaults(run=main_gen_scene)

    p = sub.add_parser('thomson', help="class means spread on the unit sphere")
    _common(p, catalog=False, seed=True)
    p.add_argument('--k', type=int, default=None, help="number of points")
    p.add_argument('--d', type=int, default=None, help="dimension")
    p.add_argument('--steps', type=int, default=None)
    p.add_argument('--out', required=True, help="k x 1 x d HLE1 grid")
    p.set_defaults(run=main_thomson)

    p = sub.add_parser('train', help="optimize per-pixel fields against one scene")
    _common(p, seed=True)
    _scene_args(p)
    p.add_argument('--steps', type=int, default=None)
    p.add_argument('--variant', choices=LOSS_VARIANTS, default=None)
    p.add_argument('--out-fields', required=True)
    p.add_argument('--out-state', required=True)
    p.add_argument('--curve', default=None, help="loss curve CSV")
    p.add_argument('--hierarchy', action='store_true', help="print per-instance embedding distances")
    p.set_defaults(run=main_train)

    p = sub.add_parser('decode', help="fields to a panoptic map")
    _common(p)
    p.add_argument('--fields', required=True)
    p.add_argument('--state', required=True)
    p.add_argument('--factor', type=int, choices=DOWNSAMPLE_FACTORS, default=None, help="downsampling factor")
    p.add_argument('--out', required=True, help="panoptic raster (HLE1) plus a .segments table")
    p.set_defaults(run=main_decode)

    p = sub.add_parser('eval', help="compare a predicted panoptic map to ground truth")
    _common(p)
    p.add_argument('--pred', required=True)
    p.add_argument('--gt', required=True)
    p.add_argument('--metrics', default=','.join(METRIC_NAMES), help=f"comma list of {', '.join(METRIC_NAMES)}")
    p.set_defaults(run=main_eval)

    p = sub.add_parser('bench-downsample', help="decode time and PQ per downsampling factor")
    _common(p)
    p.add_argument('--fields', required=True)
    p.add_argument('--state', required=True)
    p.add_argument('--gt', required=True, help="ground-truth panoptic map")
    p.add_argument('--factors', default=None, help="comma list (default 1,2,4,8)")
    p.add_argument('--repeats', type=int, default=5, help="timed runs per factor (at least 5)")
    p.add_argument('--out', default=None, help="CSV file (default stdout)")
    p.set_defaults(run=main_bench_downsample)

    p = sub.add_parser('gradcheck', help="analytic gradients vs central finite differences")
    _common(p, catalog=False, seed=True)
    p.add_argument('--problems', default=None, help=f"comma list of {', '.join(gradcheck.GRADIENT_PROBLEMS)}")
    p.add_argument('--points', type=int, default=100)
    p.add_argument('--step', type=float, default=gradcheck.DEFAULT_STEP)
    p.add_argument('--tolerance', type=float, default=gradcheck.DEFAULT_TOLERANCE)
    p.set_defaults(run=main_gradcheck)

    p = sub.add_parser('viz', help="PPM images of embeddings and distance heatmaps")
    _common(p, catalog=False)
    p.add_argument('--fields', required=True)
    p.add_argument('--out-prefix', default=None, help="writes <prefix>_<n>.ppm per 3 channels")
    p.add_argument('--target', default=None, help="row,col of the heatmap target pixel")
    p.add_argument('--out-distance', default=None)
    p.set_defaults(run=main_viz)

    p = sub.add_parser('ablate', help="PQ per loss variant and seed over suite scenes")
    _common(p, catalog=False)
    p.add_argument('--scenes', default=None, help="comma list of suite scenes (default all)")
    p.add_argument('--variants', default='hierarchical,split,ae')
    p.add_argument('--seeds', default='0,1,2')
    p.add_argument('--steps', type=int, default=None)
    p.add_argument('--jobs', type=int, default=1)
    p.add_argument('--out', default=None, help="CSV file (default stdout)")
    p.set_defaults(run=main_ablate)

    p = sub.add_parser('sweep', help="grid search over decoder thresholds")
    _common(p)
    p.add_argument('--fields', required=True)
    p.add_argument('--state', required=True)
    p.add_argument('--gt', required=True)
    for key in bench.SWEEP_KEYS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, help="comma list of values")
    p.add_argument('--top', type=int, default=10)
    p.set_defaults(run=main_sweep)
    return argparser

def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        cfg = load_run_config(args.config, args.set)
        Console.enable_colors = cfg.misc.enable_console_colors and not args.no_color
        run: Callable[..., int] = args.run
        return run(args, cfg)
    except HleError as ex:
        log.error(str(ex))
        return 1
    except OSError as ex:
        log.error(f"{ex.filename or ''}: {ex.strerror or ex}")
        return 1
    except Exception as ex:
        log.error(f"unexpected error: {ex}", exc_info=True)
        return 2

if __name__ == '__main__':
    sys.exit(main())
