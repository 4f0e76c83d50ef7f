"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
import functools
import json
import logging
import time
from pathlib import Path

import click
import numpy as np

from checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from classify import evaluate
from config import Config
from data import (
    Normalizer,
    SplitSpec,
    apply_supervision,
    load_split,
    make_synthetic,
    split_paths,
    write_embedding_csv,
    write_ts,
)
from forms import ConfigValidationError, validate_run_config
from gradcheck import TOLERANCE, default_suite, end_to_end_check, run_suite
from model import SmateConfig, SmateModel, encode, fit_centroid_steps, smb_weights, train
from regularizer import Step
from run_logger import RunLogger
from tensor import ConfigurationError, SmateError, TrainingAborted
from uea_client import UeaArchiveClient
from utils import format_duration, format_ratio

logger = logging.getLogger(__name__)

SETTING_ALIASES = {'lambda': 'lam'}
DEFAULT_RATIOS = '1.0,0.8,0.6,0.4,0.2,0.1'


def handle_errors(f):
    @functools.wraps(f)
    def decorated(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except ConfigValidationError as e:
            raise click.UsageError(str(e))
        except (SmateError, OSError) as e:
            logger.debug('command failed', exc_info=True)
            raise click.ClickException(str(e))
    return decorated


def run_options(f):
    options = [
        click.option('--config', 'config_file', type=click.Path(exists=True, dir_okay=False),
                     help='JSON file with settings; flags override it.'),
        click.option('--data', 'data_dir', default=None, help='Directory holding <name>/<name>_TRAIN.ts.'),
        click.option('--dataset', default=None, help='Dataset name, e.g. BasicMotions.'),
        click.option('--ratio', type=float, default=None, help='Fraction of visible training labels.'),
        click.option('--seed', type=int, default=None),
        click.option('--epochs', type=int, default=None),
        click.option('--lr', type=float, default=None),
        click.option('--pool', type=int, default=None, help='Pool size P (default: about T/8).'),
        click.option('--embed-dim', 'embed_dim', type=int, default=None),
        click.option('--gru-dim', 'gru_dim', type=int, default=None),
        click.option('--conv-filters', 'conv_filters', type=int, default=None),
        click.option('--window', type=int, default=None, help='Convolution window m.'),
        click.option('--smb-window', 'smb_window', type=int, default=None),
        click.option('--lambda', 'lam', type=float, default=None, help='Weight of the regularization loss.'),
        click.option('--normalize', type=click.BOOL, default=None, help='z-normalize each variable.'),
        click.option('--no-smb', 'no_smb', is_flag=True, default=False, help='Drop the Spatial Modeling Blocks.'),
        click.option('--batch-size', 'batch_size', type=int, default=None, help='0 trains full-batch.'),
        click.option('--min-score', 'min_score', type=float, default=None,
                     help='Minimum score for propagating an unlabeled sample.'),
        click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def merge_settings(config_file, flags):
    """defaults < config file < command-line flags, then validation."""
    settings = dict(Config.DEFAULTS)
    if config_file:
        with open(config_file, encoding='utf-8') as f:
            try:
                from_file = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigValidationError({'config': [f'{config_file} is not valid JSON ({e})']})
        unknown = []
        for key, value in from_file.items():
            key = key.replace('-', '_')
            key = SETTING_ALIASES.get(key, key)
            if key == 'no_smb':
                key, value = 'use_smb', not value
            if key not in settings:
                unknown.append(key)
                continue
            settings[key] = value
        if unknown:
            raise ConfigValidationError({name: ['unknown setting'] for name in unknown})
    for key, value in flags.items():
        if key in settings and value is not None:
            settings[key] = value
    if flags.get('no_smb'):
        settings['use_smb'] = False
    return validate_run_config(settings)


def _data_dir(flags):
    return flags.get('data_dir') or Config.DATA_DIR


def _out_dir(flags, dataset):
    return Path(flags.get('out_dir') or Path(Config.RUNS_DIR) / dataset)


def _require_dataset(settings):
    if not settings.get('dataset'):
        raise ConfigValidationError({'dataset': ['a dataset name is required']})
    return settings['dataset']


def _model_config(settings, ds):
    return SmateConfig(
        T=ds.T,
        M=ds.M,
        gru_dim=settings['gru_dim'],
        conv_filters=settings['conv_filters'],
        window=settings['window'],
        smb_window=settings['smb_window'],
        pool=settings['pool'],
        embed_dim=settings['embed_dim'],
        lam=settings['lam'],
        lr=settings['lr'],
        epochs=settings['epochs'],
        seed=settings['seed'],
        batch_size=settings['batch_size'],
        use_smb=settings['use_smb'],
        min_score=settings['min_score'],
    )


def _training_split(data_dir, dataset, normalizer_mode, ratio, seed, normalizer=None):
    ds = load_split(data_dir, dataset, 'train')
    normalizer = normalizer or Normalizer.fit(ds, normalizer_mode)
    ds = apply_supervision(normalizer.apply(ds), SplitSpec(ratio=ratio, seed=seed))
    return ds, normalizer


def _fit(settings, data_dir):
    dataset = settings['dataset']
    mode = 'per_variable_global' if settings['normalize'] else 'none'
    train_ds, normalizer = _training_split(data_dir, dataset, mode, settings['ratio'], settings['seed'])
    model = SmateModel(_model_config(settings, train_ds))
    RunLogger.log_train('TRAIN_START', dataset, {
        'ratio': settings['ratio'], 'seed': settings['seed'], 'epochs': settings['epochs'],
        'use_smb': settings['use_smb'], 'lambda': settings['lam'],
    })
    started = time.monotonic()
    try:
        log = train(model, train_ds)
    except TrainingAborted as e:
        RunLogger.log_train('TRAIN_ABORTED', dataset, {'error': str(e)})
        raise
    elapsed = time.monotonic() - started
    RunLogger.log_train('TRAIN_DONE', dataset, {
        'epochs': len(log), 'final_total': log[-1].total, 'seconds': round(elapsed, 3),
    })
    run = {
        'dataset': dataset,
        'ratio': settings['ratio'],
        'seed': settings['seed'],
        'normalize': settings['normalize'],
    }
    return Checkpoint(model, normalizer, train_ds.label_set, run), log, elapsed


def _load_eval_split(ckpt: Checkpoint, data_dir, dataset, split):
    """Loads ``split`` normalized like the training data, with the training mask."""
    run = ckpt.run
    if split == 'train':
        ds, _ = _training_split(data_dir, dataset, None, run.get('ratio', 1.0), run.get('seed', 0),
                                normalizer=ckpt.normalizer or Normalizer('none', None, None))
    else:
        ds = load_split(data_dir, dataset, 'test')
        if ckpt.normalizer is not None:
            ds = ckpt.normalizer.apply(ds)
    config = ckpt.model.config
    if (ds.T, ds.M) != (config.T, config.M):
        raise ConfigurationError(
            f'{dataset} {split} series are (T={ds.T}, M={ds.M}) but the checkpoint expects (T={config.T}, M={config.M})'
        )
    return ds


def _evaluate(ckpt, data_dir, dataset, split, method, k):
    test_ds = _load_eval_split(ckpt, data_dir, dataset, split)
    model = ckpt.model
    train_embeddings = train_labels = None
    if method == 'knn' or model.centroids is None:
        train_ds = _load_eval_split(ckpt, data_dir, dataset, 'train')
        if model.centroids is None:
            model.centroid_steps = fit_centroid_steps(model, train_ds)
        if method == 'knn':
            labeled = np.flatnonzero(train_ds.mask)
            train_embeddings = encode(model, train_ds.samples[labeled]).data
            train_labels = [train_ds.visible_labels()[i] for i in labeled]
    return evaluate(model, model.centroids, test_ds, method=method, k=k,
                    train_embeddings=train_embeddings, train_labels=train_labels,
                    threads=Config.threads())


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='Debug logging.')
def cli(verbose):
    """Semi-supervised spatio-temporal representation learning for multivariate time series."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else getattr(logging, Config.LOG_LEVEL, logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )


@cli.command('train')
@run_options
@handle_errors
def cmd_train(config_file, **flags):
    """Train a model and write checkpoint.json and train_log.csv."""
    settings = merge_settings(config_file, flags)
    dataset = _require_dataset(settings)
    out_dir = _out_dir(flags, dataset)
    ckpt, log, elapsed = _fit(settings, _data_dir(flags))
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / 'checkpoint.json', ckpt)
    (out_dir / 'train_log.csv').write_text(log.to_csv(), encoding='utf-8')
    click.echo(
        f'{dataset}: {len(log)} epochs in {format_duration(elapsed)}, '
        f'total loss {log[0].total:.6f} -> {log[-1].total:.6f}'
    )
    click.echo(f'checkpoint: {out_dir / "checkpoint.json"}')


@cli.command('eval')
@click.option('--checkpoint', 'checkpoint_path', type=click.Path(dir_okay=False), default=None)
@click.option('--data', 'data_dir', default=None)
@click.option('--dataset', default=None)
@click.option('--split', type=click.Choice(['test', 'train']), default='test')
@click.option('--method', type=click.Choice(['centroid', 'knn']), default='centroid')
@click.option('--k', type=int, default=1)
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None)
@handle_errors
def cmd_eval(checkpoint_path, data_dir, dataset, split, method, k, out_dir):
    """Evaluate a checkpoint and write eval_<split>.json."""
    validate_run_config(dict(Config.DEFAULTS, method=method, k=k))
    checkpoint_path, out_dir = _checkpoint_paths(checkpoint_path, out_dir, dataset)
    ckpt = load_checkpoint(checkpoint_path)
    dataset = dataset or ckpt.run.get('dataset')
    if not dataset:
        raise click.UsageError('--dataset is required for this checkpoint')
    report = _evaluate(ckpt, data_dir or Config.DATA_DIR, dataset, split, method, k)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / f'eval_{split}.json'
    report_path.write_text(report.to_json() + '\n', encoding='utf-8')
    RunLogger.log_eval(dataset, report.accuracy, {'split': split, 'method': method, 'report': str(report_path)})
    click.echo(f'accuracy: {report.accuracy:.4f} ({report.n_test} samples, {method})')


def _checkpoint_paths(checkpoint_path, out_dir, dataset):
    if checkpoint_path is None:
        if out_dir is None and dataset is None:
            raise click.UsageError('give --checkpoint, --out or --dataset')
        base = Path(out_dir) if out_dir else Path(Config.RUNS_DIR) / dataset
        checkpoint_path = base / 'checkpoint.json'
    checkpoint_path = Path(checkpoint_path)
    return checkpoint_path, Path(out_dir) if out_dir else checkpoint_path.parent


@cli.command('export-embeddings')
@click.option('--checkpoint', 'checkpoint_path', type=click.Path(dir_okay=False), default=None)
@click.option('--data', 'data_dir', default=None)
@click.option('--dataset', default=None)
@click.option('--split', type=click.Choice(['train', 'test']), default='train')
@click.option('--step', type=click.Choice([s.value for s in Step]), default=Step.UNSUPERVISED.value,
              help='Regularization step whose centroids are written.')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None)
@handle_errors
def cmd_export_embeddings(checkpoint_path, data_dir, dataset, split, step, out_dir):
    """Write per-sample embeddings plus the centroids of one regularization step as CSV."""
    checkpoint_path, out_dir = _checkpoint_paths(checkpoint_path, out_dir, dataset)
    ckpt = load_checkpoint(checkpoint_path)
    dataset = dataset or ckpt.run.get('dataset')
    data_dir = data_dir or Config.DATA_DIR
    ds = _load_eval_split(ckpt, data_dir, dataset, split)
    model = ckpt.model
    if model.centroids is None:
        model.centroid_steps = fit_centroid_steps(model, _load_eval_split(ckpt, data_dir, dataset, 'train'))
    embeddings = encode(model, ds.samples).data
    cs = model.centroids_at(step)
    is_labeled = list(ds.mask) if split == 'train' else [False] * len(ds)
    sample_ids = [str(i) for i in range(len(ds))] + [f'centroid_{c}' for c in cs.class_ids]
    labels = ds.evaluation_labels() + list(cs.class_ids)
    rows = np.concatenate([embeddings, cs.centroids.data], axis=0)
    name = f'embeddings_{split}.csv' if step == Step.UNSUPERVISED.value else f'embeddings_{split}_{step}.csv'
    path = write_embedding_csv(out_dir / name, sample_ids, labels,
                               is_labeled + [True] * len(cs), rows)
    RunLogger.log_artifact('EXPORT', path, {'rows': len(sample_ids), 'split': split, 'step': step})
    click.echo(f'{len(sample_ids)} rows written to {path}')


@cli.command('export-smb')
@click.option('--checkpoint', 'checkpoint_path', type=click.Path(dir_okay=False), default=None)
@click.option('--data', 'data_dir', default=None)
@click.option('--dataset', default=None)
@click.option('--split', type=click.Choice(['train', 'test']), default='test')
@click.option('--sample', 'sample_index', type=int, default=0)
@click.option('--block', type=click.IntRange(0, 2), default=0)
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None)
@handle_errors
def cmd_export_smb(checkpoint_path, data_dir, dataset, split, sample_index, block, out_dir):
    """Write the SMB calibration weights of one sample as CSV."""
    checkpoint_path, out_dir = _checkpoint_paths(checkpoint_path, out_dir, dataset)
    ckpt = load_checkpoint(checkpoint_path)
    dataset = dataset or ckpt.run.get('dataset')
    ds = _load_eval_split(ckpt, data_dir or Config.DATA_DIR, dataset, split)
    if not 0 <= sample_index < len(ds):
        raise click.UsageError(f'--sample must be in [0, {len(ds) - 1}]')
    weights = smb_weights(ckpt.model, ds.samples[sample_index], block)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f'smb_{split}_{sample_index}_block{block}.csv'
    lines = ['t,' + ','.join(f'var_{j}' for j in range(weights.shape[1]))]
    lines += [f'{t},' + ','.join(repr(float(v)) for v in row) for t, row in enumerate(weights)]
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    RunLogger.log_artifact('EXPORT', path, {'kind': 'smb', 'sample': sample_index, 'block': block})
    click.echo(f'SMB weights written to {path}')


@cli.command('gradcheck')
@click.option('--seed', type=int, default=0)
@click.option('--entries', type=int, default=12, help='Entries checked per parameter.')
@click.pass_context
def cmd_gradcheck(ctx, seed, entries):
    """Compare analytic and finite-difference gradients for every op kind."""
    rng = np.random.default_rng(seed)
    results = run_suite(default_suite(rng), rng, max_entries=entries)
    results += run_suite([end_to_end_check(rng)], rng, tolerance=1e-3, max_entries=entries)
    click.echo(f'{"op":<22}{"max rel error":>16}{"entries":>9}  status')
    for r in results:
        click.echo(f'{r.op:<22}{r.max_error:>16.3e}{r.checked:>9}  {"pass" if r.passed else "FAIL"}')
    failed = [r.op for r in results if not r.passed]
    RunLogger.log_action('GRADCHECK', 'Suite', 'default', {
        'seed': seed, 'failed': failed, 'tolerance': TOLERANCE,
    })
    if failed:
        click.echo(f'failed: {", ".join(failed)}', err=True)
        ctx.exit(1)


@cli.command('fetch')
@click.option('--dataset', required=True, help='UEA dataset name, e.g. BasicMotions.')
@click.option('--data', 'data_dir', default=None)
@handle_errors
def cmd_fetch(dataset, data_dir):
    """Download a UEA dataset archive."""
    data_dir = data_dir or Config.DATA_DIR
    written = UeaArchiveClient().download(dataset, data_dir)
    RunLogger.log_action('FETCH', 'Dataset', dataset, {'files': written})
    for path in written:
        click.echo(path)


@cli.command('make-synthetic')
@click.option('--data', 'data_dir', default=None)
@click.option('--dataset', default='Synthetic')
@click.option('--classes', type=click.IntRange(min=2), default=3)
@click.option('--samples', type=click.IntRange(min=2), default=120)
@click.option('--test-samples', type=click.IntRange(min=2), default=120)
@click.option('--length', type=click.IntRange(min=1), default=64)
@click.option('--variables', type=click.IntRange(min=2), default=4)
@click.option('--noise', type=click.FloatRange(min=0.0), default=0.05)
@click.option('--phase-jitter', type=click.FloatRange(0.0, 1.0), default=0.0)
@click.option('--seed', type=int, default=0)
@handle_errors
def cmd_make_synthetic(data_dir, dataset, classes, samples, test_samples, length, variables, noise, phase_jitter, seed):
    """Write a coupled-sinusoid dataset as UEA .ts files."""
    data_dir = data_dir or Config.DATA_DIR
    train_path, test_path = split_paths(data_dir, dataset)
    common = dict(K=classes, T=length, M=variables, noise=noise, phase_jitter=phase_jitter, name=dataset)
    write_ts(make_synthetic(N=samples, seed=seed, **common), train_path)
    write_ts(make_synthetic(N=test_samples, seed=seed + 1, **common), test_path)
    click.echo(f'{train_path}\n{test_path}')


@cli.command('sweep')
@run_options
@click.option('--ratios', default=DEFAULT_RATIOS, help='Comma-separated supervision ratios.')
@handle_errors
def cmd_sweep(config_file, ratios, **flags):
    """Train and evaluate once per supervision ratio; writes sweep.csv."""
    try:
        ratio_list = [float(r) for r in ratios.split(',') if r.strip()]
    except ValueError:
        raise click.UsageError(f'--ratios must be comma-separated numbers, got {ratios!r}')
    base = merge_settings(config_file, flags)
    dataset = _require_dataset(base)
    data_dir = _data_dir(flags)
    out_dir = _out_dir(flags, dataset)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ['ratio,accuracy']
    for ratio in ratio_list:
        settings = validate_run_config(dict(base, ratio=ratio))
        ckpt, _, elapsed = _fit(settings, data_dir)
        report = _evaluate(ckpt, data_dir, dataset, 'test', settings['method'], settings['k'])
        lines.append(f'{ratio!r},{report.accuracy!r}')
        click.echo(f'r={format_ratio(ratio)}: accuracy {report.accuracy:.4f} ({format_duration(elapsed)})')
    path = out_dir / 'sweep.csv'
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    RunLogger.log_action('SWEEP', 'Dataset', dataset, {'ratios': ratio_list, 'csv': str(path)})
