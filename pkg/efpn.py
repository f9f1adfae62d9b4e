'''
Command-line entry point.

    python efpn.py <command> [-c config.ini] [--set Section.Key=value ...] [--seed N] [-o OUTPUT] [-q]

Commands: train, eval, predict, params, flops, gradcheck, synth, augment, decompose, ensemble.
Failures print one line "efpn <command>: <category> error: <message>" on stderr and exit with the category's code.
'''
from __future__ import annotations
import argparse
import dataclasses
import json
import os
import sys
import traceback
from typing import Callable, Dict, List, Optional, Sequence
import numpy as np
from PIL import Image
import ops
from checkpoint import load_checkpoint, save_checkpoint
from data_io import ClassPalette, SegSample, encode_mask, fromUint8, load_dataset, save_dataset, imageCounts
from efpn_model import EfpnModel, build, flopBreakdown, levelFlopRatios, paramBreakdown
from gradcheck import check_model_gradients, finite_diff_check
from imbalance import (ClassStats, apply_balance_plan, balance_plan, baseline_workflow, combined_workflow, decompose,
                       minorityClasses, minorityIou)
from metrics import ConfusionMatrix, compute_report
from read_configs import RunConfig
from synthetic import generate_synthetic
from tensor import Tensor
from trainer import evaluate, load_training_state, predict, restoreParams, save_training_state, split, train
from errors import ConfigurationError, DataError, EfpnError, NumericError, UsageError
import logger
from logger import print

__version__ = '1.0'

CHECKPOINT_NAME = 'model.efpn'
STATE_NAME = 'training_state.npz'
HISTORY_NAME = 'history.csv'
METRICS_NAME = 'metrics.json'
LOG_NAME = 'efpn.log'


def writeJson(path: str, values: Dict) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(values, f, indent=2)
        f.write('\n')


def loadSamples(args: argparse.Namespace, run: RunConfig, palette: ClassPalette) -> List[SegSample]:
    '''
    The dataset named on the command line, the configured dataset root, or the configured synthetic benchmark.
    '''
    if getattr(args, 'synthetic', False):
        samples = generate_synthetic(run.syntheticConfig())
        print(f'Generated {len(samples)} synthetic samples (seed {run.seed})')
        return samples
    root = getattr(args, 'dataset', None) or run.datasetRoot
    samples = load_dataset(root, palette, run.workers)
    print(f'Loaded {len(samples)} samples from {root}')
    return samples


def checkArity(modelClasses: int, palette: ClassPalette, source: str) -> None:
    if modelClasses != palette.numClasses:
        raise UsageError(f'{source} predicts {modelClasses} classes but the palette defines {palette.numClasses}')


def metricsFor(model: EfpnModel, samples: Sequence[SegSample], palette: ClassPalette, seed: int, batchSize: int) -> Dict:
    cm = ConfusionMatrix(palette.numClasses)
    loss = None
    if samples:
        loss, cm = evaluate(model, samples, batchSize)
    report = compute_report(cm, palette.ciwTable(), seed)
    report.extra['loss'] = loss
    report.extra['samples'] = len(samples)
    return report.toDict()


def cmd_train(args: argparse.Namespace, run: RunConfig) -> None:
    palette = run.palette()
    if palette.numClasses != run.numClasses:
        raise ConfigurationError(f'Model.Number of classes is {run.numClasses} but the palette defines {palette.numClasses} classes')
    trainConfig = run.trainConfig()
    samples = loadSamples(args, run, palette)
    if not samples:
        raise DataError('No samples to train on')
    trainSamples, valSamples, testSamples = split(samples, trainConfig.splitRatios, run.seed)
    print(f'Split: {len(trainSamples)} train, {len(valSamples)} validation, {len(testSamples)} test')

    model = build(run.efpnConfig(), run.seed)
    model.metadata.update({'seed': run.seed, 'class_names': palette.names})
    resume = None
    if args.resume:
        resume = load_training_state(args.resume, model)
        print(f'Resuming after epoch {resume.epochsRun}')
    result = train(model, trainSamples, valSamples, trainConfig, resume=resume, showProgress=not args.quiet)

    save_training_state(os.path.join(args.output, STATE_NAME), model, result)
    restoreParams(model, result.bestParams)
    save_checkpoint(model, os.path.join(args.output, CHECKPOINT_NAME), {'best_epoch': result.bestEpoch})
    result.history.toCsv(os.path.join(args.output, HISTORY_NAME), run.seed)

    evalSet, evalName = next(((s, n) for s, n in ((testSamples, 'test'), (valSamples, 'validation'),
                                                   (trainSamples, 'train')) if s))
    metrics = metricsFor(model, evalSet, palette, run.seed, trainConfig.batchSize)
    metrics.update({'split': evalName, 'best_epoch': result.bestEpoch, 'epochs_run': result.epochsRun,
                    'test_ids': [s.id for s in testSamples]})
    writeJson(os.path.join(args.output, METRICS_NAME), metrics)
    print(f'IoU (with background) on the {evalName} split: {metrics["iou_with_bg"]}')


def cmd_eval(args: argparse.Namespace, run: RunConfig) -> None:
    palette = run.palette()
    model = load_checkpoint(args.checkpoint)
    checkArity(model.config.numClasses, palette, f'Checkpoint {args.checkpoint}')
    samples = loadSamples(args, run, palette)
    seed = model.metadata.get('seed', run.seed)
    metrics = metricsFor(model, samples, palette, seed, run.batchSize)
    metrics['checkpoint'] = os.path.basename(args.checkpoint)
    writeJson(os.path.join(args.output, METRICS_NAME), metrics)
    for key in ('iou_with_bg', 'iou_without_bg', 'fwiou', 'f1', 'balanced_accuracy', 'mcc'):
        print(f'{key:>18}: {metrics[key]}')


def cmd_predict(args: argparse.Namespace, run: RunConfig) -> None:
    palette = run.palette()
    model = load_checkpoint(args.checkpoint)
    checkArity(model.config.numClasses, palette, f'Checkpoint {args.checkpoint}')
    size = model.config.inputSize
    for path in args.images:
        try:
            with Image.open(path) as im:
                original = im.convert('RGB')
        except OSError as e:
            raise DataError(f'Image {path} cannot be read: {e}') from e
        resized = original.resize((size, size), Image.BILINEAR)
        indices = predict(model, fromUint8(np.asarray(resized))[None])[0]
        maskImage = Image.fromarray(encode_mask(indices, palette).astype(np.uint8))
        maskImage = maskImage.resize(original.size, Image.NEAREST)
        stem = os.path.splitext(os.path.basename(path))[0]
        maskImage.save(os.path.join(args.output, f'{stem}_mask.png'))
        Image.blend(original, maskImage, 0.5).save(os.path.join(args.output, f'{stem}_overlay.png'))
        print(f'{path}: classes {[palette.names[c] for c in np.unique(indices)]}')


def cmd_params(args: argparse.Namespace, run: RunConfig) -> None:
    config = run.efpnConfig()
    table = paramBreakdown(config)
    total = int(table['params'].sum())
    table.assign(seed=run.seed).to_csv(os.path.join(args.output, 'params.csv'), sep=';', index=False)
    print(table.to_string(index=False))
    print(f'Total trainable parameters: {total:,}')


def cmd_flops(args: argparse.Namespace, run: RunConfig) -> None:
    config = run.efpnConfig()
    table = flopBreakdown(config)
    table.assign(seed=run.seed).to_csv(os.path.join(args.output, 'flops.csv'), sep=';', index=False)
    print(table.to_string(index=False))
    print(f'Total FLOPs per {config.inputSize}x{config.inputSize} image: {int(table["flops"].sum()):,}')
    ratios = levelFlopRatios(config)
    for level, ratio in enumerate(ratios):
        print(f'Level {level}: inception reference / multi-scale FLOPs = {ratio:.2f}')
    print(f'FLOP ratio vs inception reference: {min(ratios):.2f}')


def _primitiveChecks(rng: np.random.Generator) -> List[tuple]:
    def t(*shape):
        return Tensor(rng.standard_normal(shape))

    target = rng.integers(0, 3, size=(2, 4, 4))
    return [
        ('conv2d', lambda x, w, b: ops.sum_all(ops.conv2d(x, w, b, stride=1, padding=1)), [t(2, 3, 5, 5), t(4, 3, 3, 3), t(4)]),
        ('depthwise_conv2d', lambda x, w: ops.sum_all(ops.depthwise_conv2d(x, w, padding=2)), [t(2, 3, 5, 5), t(3, 1, 5, 5)]),
        ('pointwise_conv', lambda x, w, b: ops.sum_all(ops.pointwise_conv(x, w, b)), [t(2, 3, 4, 4), t(5, 3, 1, 1), t(5)]),
        ('maxpool2d', lambda x: ops.sum_all(ops.maxpool2d(x, 2, 2)), [t(2, 3, 4, 4)]),
        ('upsample_nearest2x', lambda x: ops.sum_all(ops.scale(ops.upsample_nearest2x(x), 0.5)), [t(1, 2, 3, 3)]),
        ('relu', lambda x: ops.sum_all(ops.relu(x)), [t(2, 3, 4, 4)]),
        ('cross_entropy_loss', lambda x: ops.cross_entropy_loss(x, target), [t(2, 3, 4, 4)]),
    ]


def cmd_gradcheck(args: argparse.Namespace, run: RunConfig) -> None:
    rng = np.random.default_rng(run.seed)
    reports = []
    for name, closure, inputs in _primitiveChecks(rng):
        reports.append(finite_diff_check(closure, inputs, opName=name, tolerance=1e-3))

    config = run.efpnConfig()
    size = args.input_size or 2 ** config.levelCount
    # Parameter shapes do not depend on the input size
    config = dataclasses.replace(config, inputSize=size)
    config.validate()
    model = build(config, run.seed)
    x = Tensor(rng.uniform(0.0, 1.0, (1, config.inputChannels, size, size)))
    target = rng.integers(0, config.numClasses, size=(1, size, size))
    reports.append(check_model_gradients(model, x, target, samplesPerInput=args.samples, seed=run.seed))
    for report in reports:
        print(report)
    writeJson(os.path.join(args.output, 'gradcheck.json'),
              {'seed': run.seed, 'reports': [{'op': r.opName, 'max_rel_error': r.maxRelError, 'max_abs_error': r.maxAbsError,
                                              'passed': r.passed, 'tolerance': r.tolerance, 'checked': r.checked,
                                              'skipped': r.skipped} for r in reports]})
    failed = [r.opName for r in reports if not r.passed]
    if failed:
        raise NumericError(f'Gradient check failed for {failed}')


def cmd_synth(args: argparse.Namespace, run: RunConfig) -> None:
    palette = run.palette()
    samples = generate_synthetic(run.syntheticConfig())
    target = os.path.join(args.output, 'dataset')
    save_dataset(samples, target, palette)
    counts = imageCounts(samples, palette.numClasses)
    for name, count in zip(palette.names, counts):
        print(f'{name:>16}: {int(count)} images')
    print(f'Wrote {len(samples)} samples to {target}')


def _checkOutputOutsideDataset(args: argparse.Namespace, run: RunConfig) -> None:
    if getattr(args, 'synthetic', False):
        return
    root = os.path.abspath(getattr(args, 'dataset', None) or run.datasetRoot)
    if os.path.commonpath([root, os.path.abspath(args.output)]) == root:
        raise UsageError(f'Output folder {args.output} lies inside the input dataset {root}')


def cmd_augment(args: argparse.Namespace, run: RunConfig) -> None:
    palette = run.palette()
    _checkOutputOutsideDataset(args, run)
    samples = loadSamples(args, run, palette)
    stats = ClassStats.fromSamples(samples, palette.numClasses)
    plan = balance_plan(stats, run.balanceCap)
    balanced = apply_balance_plan(samples, plan, run.augmentationSpec(), run.seed, palette.numClasses)
    save_dataset(balanced, os.path.join(args.output, 'balanced'), palette)
    values = plan.toDict(palette.names)
    values['seed'] = run.seed
    writeJson(os.path.join(args.output, 'balance_plan.json'), values)
    for warning in plan.warnings:
        print(f'Warning: {warning}')
    print(f'Balanced dataset: {len(balanced)} samples (from {len(samples)}), target {plan.target} per class')


def cmd_decompose(args: argparse.Namespace, run: RunConfig) -> None:
    palette = run.palette()
    imbalanceConfig = run.imbalanceConfig()
    samples = loadSamples(args, run, palette)
    stats = ClassStats.fromSamples(samples, palette.numClasses)
    groupSpec = decompose(stats, imbalanceConfig.groupSize, imbalanceConfig.conflictIndices(palette))
    values = groupSpec.toDict(palette.names)
    values['seed'] = run.seed
    writeJson(os.path.join(args.output, 'groups.json'), values)
    for g, names in enumerate(values['group_names']):
        print(f'Group {g}: {", ".join(names)}')


def cmd_ensemble(args: argparse.Namespace, run: RunConfig) -> None:
    palette = run.palette()
    if palette.numClasses != run.numClasses:
        raise ConfigurationError(f'Model.Number of classes is {run.numClasses} but the palette defines {palette.numClasses} classes')
    trainConfig = run.trainConfig()
    imbalanceConfig = run.imbalanceConfig()
    samples = loadSamples(args, run, palette)
    trainSamples, valSamples, testSamples = split(samples, trainConfig.splitRatios, run.seed)
    bundle, report, record = combined_workflow(trainSamples, valSamples, testSamples, palette, run.efpnConfig(),
                                               trainConfig, run.augmentationSpec(), imbalanceConfig, run.seed,
                                               run.workers)
    for g, model in enumerate(bundle.models):
        model.metadata.update({'seed': run.seed, 'group': list(bundle.groupSpec.groups[g]),
                               'class_names': ['Background'] + [palette.names[c] for c in bundle.groupSpec.groups[g]]})
        save_checkpoint(model, os.path.join(args.output, f'group{g}.efpn'))
    values = {'seed': run.seed, 'combined': report.toDict(), 'test_ids': [s.id for s in testSamples]}
    values.update(record)

    if args.compare_baseline:
        minority = minorityClasses(ClassStats.fromSamples(trainSamples, palette.numClasses), imbalanceConfig.minorityFraction)
        baselineModel, baselineReport = baseline_workflow(trainSamples, valSamples, testSamples, palette,
                                                          run.efpnConfig(), trainConfig, run.seed,
                                                          showProgress=not args.quiet)
        baselineModel.metadata.update({'seed': run.seed, 'class_names': palette.names})
        save_checkpoint(baselineModel, os.path.join(args.output, 'baseline.efpn'))
        values['baseline'] = baselineReport.toDict()
        values['minority_classes'] = [palette.names[c] for c in minority]
        values['baseline_minority_iou'] = minorityIou(baselineReport, minority)
        values['combined_minority_iou'] = minorityIou(report, minority)
        print(f'Minority IoU: baseline {values["baseline_minority_iou"]}, combined {values["combined_minority_iou"]}')
    writeJson(os.path.join(args.output, 'ensemble_metrics.json'), values)
    print(f'Fused IoU (with background): {report.iouWithBg}')


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], None]] = {
    'train': cmd_train,
    'eval': cmd_eval,
    'predict': cmd_predict,
    'params': cmd_params,
    'flops': cmd_flops,
    'gradcheck': cmd_gradcheck,
    'synth': cmd_synth,
    'augment': cmd_augment,
    'decompose': cmd_decompose,
    'ensemble': cmd_ensemble,
}


def buildParser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-c', '--config', dest='config', metavar='CONFIG', default='config.ini',
                        help='INI configuration file (default: config.ini)')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='override one configuration value, may be repeated')
    common.add_argument('--seed', type=int, default=None, help='root seed, overrides General.Seed')
    common.add_argument('-o', '--output', dest='output', default=None, metavar='OUTPUT',
                        help='output folder, overrides General.Output folder')
    common.add_argument('-q', '--quiet', action='store_true', help='no progress bars')

    dataset = argparse.ArgumentParser(add_help=False)
    dataset.add_argument('-d', '--dataset', default=None, help='dataset root, overrides General.Dataset root')
    dataset.add_argument('--synthetic', action='store_true', help='use the synthetic benchmark of the [Synthetic] section')

    parser = argparse.ArgumentParser(prog='efpn', description='Efficient feature pyramid segmentation of sewer defects')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND', required=True)

    p = sub.add_parser('train', parents=[common, dataset], help='train a model and write checkpoint, history and metrics')
    p.add_argument('--resume', default=None, metavar='STATE', help='training state (.npz) of an interrupted run')
    p = sub.add_parser('eval', parents=[common, dataset], help='evaluate a checkpoint on a dataset')
    p.add_argument('checkpoint')
    p = sub.add_parser('predict', parents=[common], help='write colored masks and overlays for images')
    p.add_argument('checkpoint')
    p.add_argument('images', nargs='+')
    sub.add_parser('params', parents=[common], help='trainable parameters per module')
    sub.add_parser('flops', parents=[common], help='FLOPs per module and the ratio against the inception reference')
    p = sub.add_parser('gradcheck', parents=[common], help='finite-difference check of the operators and the model')
    p.add_argument('--input-size', dest='input_size', type=int, default=None, help='spatial size of the check input')
    p.add_argument('--samples', type=int, default=3, help='checked elements per parameter tensor')
    sub.add_parser('synth', parents=[common], help='write the synthetic benchmark dataset')
    sub.add_parser('augment', parents=[common, dataset], help='balance a dataset by under-sampling and augmentation')
    sub.add_parser('decompose', parents=[common, dataset], help='split the defect classes into groups')
    p = sub.add_parser('ensemble', parents=[common, dataset], help='train the group models and evaluate the fused ensemble')
    p.add_argument('--compare-baseline', dest='compare_baseline', action='store_true',
                   help='also train the plain single model and compare minority-class IoU')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = buildParser().parse_args(argv)
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f'General.Seed={args.seed}')
        run = RunConfig.fromFile(args.config, overrides)
        run.validate()
        args.output = args.output or run.outputFolder
        os.makedirs(args.output, exist_ok=True)
        logger.openLogFile(os.path.join(args.output, LOG_NAME))
        print(f'efpn {__version__} {args.command}, configuration {args.config}, seed {run.seed}')
        COMMANDS[args.command](args, run)
        return 0
    except EfpnError as e:
        logger.logOnly(traceback.format_exc())
        sys.stderr.write(f'efpn {args.command}: {e.category} error: {e}\n')
        return e.exitCode
    except Exception as e:
        logger.logOnly(traceback.format_exc())
        sys.stderr.write(f'efpn {args.command}: internal error: {e}\n')
        return 1
    finally:
        logger.closeLogFile()


if __name__ == '__main__':
    sys.exit(main())
