"""
Command-line entry point for the ShuffleGuard workbench.

Commands are plain click commands registered on the Flask app's CLI, so they
run both as ``flask --app app <command>`` and as ``python cli.py <command>``.
Errors are printed as ``error: <message>`` and mapped to exit codes.
"""

import functools
import logging
import sys
from pathlib import Path

import click
import numpy as np
from flask.cli import FlaskGroup
from PIL import Image

from database import insert_run, record_report
from errors import InvalidArgumentError, ShuffleGuardError, exit_code_for
from services.attack_engine import BPDA_BACKWARDS, SWEEP_EPSILONS, AttackConfig, format_epsilon, parse_epsilon
from services.checkpoint import load_checkpoint
from services.data_pipeline import TRANSFORM_STAGES, load_split, read_batch_file, write_batch_file
from services.experiment_harness import (
    ablate_block_size, evaluate, load_manifest, parse_condition, run_pipeline, sweep, train
)
from services.keyed_permutation import (
    BlockGrid, ImageTensor, SecretKey, derive_permutation, deshuffle_image, key_space_report,
    shuffle_array, shuffle_image
)
from services.reporting import AccuracyReport, plot_accuracy_vs_epsilon, write_csv, write_json

logger = logging.getLogger('shuffleguard')


def workbench_command(func):
    """Add --verbose, configure logging and turn workbench errors into exit codes."""

    @click.option('--verbose', is_flag=True, help='Log at DEBUG level.')
    @functools.wraps(func)
    def wrapper(*args, verbose=False, **kwargs):
        logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                            format='%(asctime)s %(levelname)s %(name)s: %(message)s')
        try:
            return func(*args, **kwargs)
        except ShuffleGuardError as error:
            click.echo(f'error: {error}', err=True)
            sys.exit(exit_code_for(error))

    return wrapper


def _load_key(path):
    return SecretKey.load(path) if path else None


def _test_split(data_dir, test_subset):
    return load_split(data_dir, 'test').subset(test_subset)


def _load_run_manifest(path, data_dir=None, transform_stage=None):
    """Load a manifest, letting command-line flags override its data_dir and transform_stage."""
    manifest = load_manifest(path)
    overrides = {}
    if data_dir:
        overrides['data_dir'] = str(data_dir)
    if transform_stage:
        overrides['transform_stage'] = transform_stage
    return manifest.replace(**overrides) if overrides else manifest


def _write_report(report: AccuracyReport, out: Path, provenance: dict) -> Path:
    """Write <out>.json and <out>.csv side by side."""
    out = Path(out)
    write_json(report, out.with_suffix('.json'), provenance)
    write_csv(report, out.with_suffix('.csv'))
    return out.with_suffix('.json')


def _parse_blocks(text: str):
    try:
        blocks = [int(part) for part in text.split(',') if part.strip()]
    except ValueError as error:
        raise InvalidArgumentError(f"Block sizes must be integers, got '{text}'.") from error
    if not blocks or any(block < 1 for block in blocks):
        raise InvalidArgumentError("Block sizes must be positive integers.")
    return blocks


@click.command('keygen')
@click.option('--out', 'out_path', required=True, type=click.Path(dir_okay=False), help='Key file to write.')
@click.option('--seed', 'seed_hex', default=None, help='64 hex characters; random when omitted.')
@click.option('--label', default=None, help='Optional human-readable label.')
@workbench_command
def keygen_command(out_path, seed_hex, label):
    """Create a secret key file."""
    key = SecretKey.from_hex(seed_hex, label) if seed_hex else SecretKey.generate(label)
    key.save(out_path)
    click.echo(f'Wrote key {key.fingerprint()} to {out_path}')


@click.command('transform')
@click.option('--key', 'key_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--block', 'block_size', required=True, type=int, help='Block side M.')
@click.option('--in', 'in_path', required=True, type=click.Path(exists=True, dir_okay=False),
              help='PNG image or CIFAR-10 .bin batch.')
@click.option('--out', 'out_path', required=True, type=click.Path(dir_okay=False))
@click.option('--inverse', is_flag=True, help='De-shuffle instead of shuffle.')
@workbench_command
def transform_command(key_path, block_size, in_path, out_path, inverse):
    """Shuffle (or de-shuffle) an image or a binary batch with a key."""
    key = SecretKey.load(key_path)
    if Path(in_path).suffix.lower() == '.bin':
        images, labels = read_batch_file(in_path, expected_records=None)
        grid = BlockGrid.for_shape(images.shape, block_size)
        permutation = derive_permutation(key, grid.n)
        if inverse:
            permutation = permutation.inverse()
        write_batch_file(out_path, shuffle_array(images, permutation, grid), labels)
        click.echo(f'Transformed {len(labels)} records into {out_path}')
        return
    try:
        with Image.open(in_path) as source:
            pixels = np.asarray(source.convert('RGB'))
    except OSError as error:
        raise InvalidArgumentError(f"Cannot read image '{in_path}': {error}") from error
    grid = BlockGrid.for_shape(pixels.shape, block_size)
    if grid.needs_padding:
        logger.warning("Image %s is not a multiple of M=%d; padding is cropped and not invertible.",
                       pixels.shape[:2], block_size)
    op = deshuffle_image if inverse else shuffle_image
    result = op(ImageTensor(pixels, 'byte'), key, grid)
    Image.fromarray(result.data).save(out_path, format='PNG')
    click.echo(f'Wrote {out_path}')


@click.command('keyspace')
@click.option('--block', 'block_size', required=True, type=int)
@click.option('--channels', default=3, show_default=True, type=int)
@workbench_command
def keyspace_command(block_size, channels):
    """Print the number of block permutations n! and the seed-space bound."""
    report = key_space_report(block_size, channels)
    click.echo(f"n = {report['n']}")
    click.echo(f"key space n! = {report['key_space']} ({report['key_space_digits']} digits, "
               f"{report['key_space_bits']} bits)")
    click.echo(f"seed space = 2^{report['seed_space_bits']}")


@click.command('train')
@click.option('--manifest', 'manifest_path', required=True, type=click.Path(dir_okay=False))
@click.option('--full-paper-scale', '--full-scale', 'full_scale', is_flag=True,
              help='resnet18, 160 epochs, whole dataset.')
@click.option('--data-dir', default=None, help="Overrides the manifest's data_dir.")
@click.option('--transform-stage', type=click.Choice(TRANSFORM_STAGES), default=None,
              help="Overrides the manifest's transform_stage.")
@click.option('--evaluate', 'run_matrix', is_flag=True, help='Evaluate the attack matrix afterwards.')
@click.option('--progress', is_flag=True, help='Show progress bars.')
@workbench_command
def train_command(manifest_path, full_scale, data_dir, transform_stage, run_matrix, progress):
    """Train a classifier as described by a manifest."""
    manifest = _load_run_manifest(manifest_path, data_dir, transform_stage)
    if full_scale:
        manifest = manifest.full_scale()
    manifest.validate()
    if run_matrix:
        result, report = run_pipeline(manifest, progress=progress)
        out = _write_report(report, result.checkpoint_path.parent / 'report', {'seed': manifest.seed})
        record_report('train', str(result.checkpoint_path), report)
        click.echo(f'Report: {out}')
    else:
        result = train(manifest, progress=progress)
        insert_run('train', manifest.manifest_hash(), str(result.checkpoint_path), wall_time=result.wall_time)
    click.echo(f'Checkpoint: {result.checkpoint_path} (train acc {result.train_acc:.4f}, '
               f'test acc {result.test_acc:.4f})')


@click.command('attack')
@click.option('--model', 'model_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--key', 'key_path', default=None, type=click.Path(exists=True, dir_okay=False),
              help='Defense key; omit for an undefended model.')
@click.option('--guessed-key', default=None, help="'random', 'true' or a key file: runs the adaptive attack.")
@click.option('--eps', 'epsilon', default='8/255', show_default=True)
@click.option('--steps', default=20, show_default=True, type=int)
@click.option('--rand-init', is_flag=True)
@click.option('--step-size', default='2/255', show_default=True)
@click.option('--bpda-backward', type=click.Choice(BPDA_BACKWARDS), default='identity', show_default=True)
@click.option('--seed', default=0, show_default=True, type=int)
@click.option('--data-dir', default=None, help='Defaults to SHUFFLEGUARD_DATA_DIR.')
@click.option('--test-subset', default=1000, show_default=True, type=int)
@click.option('--out', 'out_path', default='report.json', show_default=True, type=click.Path(dir_okay=False))
@click.option('--progress', is_flag=True)
@workbench_command
def attack_command(model_path, key_path, guessed_key, epsilon, steps, rand_init, step_size, bpda_backward,
                   seed, data_dir, test_subset, out_path, progress):
    """Attack a checkpoint with PGD (or BPDA with a guessed key) and report accuracy."""
    checkpoint = load_checkpoint(model_path)
    key = _load_key(key_path)
    grid = checkpoint.defense_grid(key)
    guessed = None
    if guessed_key:
        if key is None:
            raise InvalidArgumentError("--guessed-key needs the defense --key.")
        guessed = {'random': SecretKey.guess(seed), 'true': key}.get(guessed_key) or SecretKey.load(guessed_key)
    cfg = AttackConfig(epsilon=epsilon, step_size=step_size, iterations=steps, random_init=rand_init,
                       guessed_key=guessed, grid=grid, bpda_backward=bpda_backward, seed=seed)
    condition = f"{'bpda' if guessed else 'pgd'}{steps}{'r' if rand_init else ''}"
    if guessed:
        condition += f'@{guessed_key}'
    split = _test_split(data_dir, test_subset)
    row = evaluate(checkpoint, key, split, cfg, condition=condition, grid=grid, progress=progress)
    report = AccuracyReport(rows=[row], manifest_hash=checkpoint.meta.get('manifest_hash', ''),
                            sample_count=len(split), title=f'{condition} at {format_epsilon(cfg.epsilon)}')
    out = _write_report(report, out_path, {'model': str(model_path), 'seed': seed})
    record_report('attack', str(out), report)
    click.echo(f'{condition} eps={format_epsilon(cfg.epsilon)}: clean {row.clean_acc:.4f}, '
               f'attacked {row.attacked_acc:.4f}')


@click.command('eval')
@click.option('--model', 'model_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--key', 'key_path', default=None, type=click.Path(exists=True, dir_okay=False))
@click.option('--allow-key-mismatch', is_flag=True, help='Evaluate with a key other than the training key.')
@click.option('--data-dir', default=None)
@click.option('--test-subset', default=1000, show_default=True, type=int)
@click.option('--out', 'out_path', default=None, type=click.Path(dir_okay=False))
@click.option('--progress', is_flag=True)
@workbench_command
def eval_command(model_path, key_path, allow_key_mismatch, data_dir, test_subset, out_path, progress):
    """Clean accuracy of a checkpoint on the test split."""
    checkpoint = load_checkpoint(model_path)
    split = _test_split(data_dir, test_subset)
    row = evaluate(checkpoint, _load_key(key_path), split, None, condition='clean',
                   allow_key_mismatch=allow_key_mismatch, progress=progress)
    report = AccuracyReport(rows=[row], manifest_hash=checkpoint.meta.get('manifest_hash', ''),
                            sample_count=len(split), title='Clean accuracy')
    artifact = _write_report(report, out_path, {'model': str(model_path)}) if out_path else model_path
    record_report('eval', str(artifact), report)
    click.echo(f'clean accuracy {row.clean_acc:.4f} on {len(split)} images')


@click.command('sweep')
@click.option('--model', 'model_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--key', 'key_path', default=None, type=click.Path(exists=True, dir_okay=False))
@click.option('--eps-list', default=','.join(format_epsilon(e) for e in SWEEP_EPSILONS), show_default=True)
@click.option('--attack', 'condition', default='pgd20', show_default=True,
              help="Condition such as 'pgd20', 'fgsm' or 'bpda40r@random'.")
@click.option('--step-size', default='2/255', show_default=True)
@click.option('--bpda-backward', type=click.Choice(BPDA_BACKWARDS), default='identity', show_default=True)
@click.option('--seed', default=0, show_default=True, type=int)
@click.option('--workers', default=1, show_default=True, type=int)
@click.option('--data-dir', default=None)
@click.option('--test-subset', default=1000, show_default=True, type=int)
@click.option('--out-dir', default='sweep', show_default=True, type=click.Path(file_okay=False))
@click.option('--progress', is_flag=True)
@workbench_command
def sweep_command(model_path, key_path, eps_list, condition, step_size, bpda_backward, seed, workers,
                  data_dir, test_subset, out_dir, progress):
    """Accuracy against the perturbation budget: CSV, JSON and an SVG plot."""
    checkpoint = load_checkpoint(model_path)
    key = _load_key(key_path)
    grid = checkpoint.defense_grid(key)
    cond = parse_condition(condition)
    epsilons = [parse_epsilon(part) for part in eps_list.split(',') if part.strip()]
    if not epsilons:
        raise InvalidArgumentError("--eps-list is empty.")
    template = cond.attack_config(max(epsilons), key, grid, parse_epsilon(step_size), seed, bpda_backward)
    if template is None:
        raise InvalidArgumentError("Sweeping needs an attack condition, not 'clean'.")
    split = _test_split(data_dir, test_subset)
    report = sweep(checkpoint, key, epsilons, template, split, condition=cond.name, workers=workers,
                   manifest_hash=checkpoint.meta.get('manifest_hash', ''), progress=progress)
    out = Path(out_dir)
    _write_report(report, out / 'sweep', {'model': str(model_path), 'seed': seed})
    plot_accuracy_vs_epsilon(report, out / 'sweep.svg', label=cond.name)
    record_report('sweep', str(out), report)
    for row in report.rows:
        click.echo(f'{format_epsilon(row.epsilon)}: {row.attacked_acc:.4f}')


@click.command('ablate')
@click.option('--manifest', 'manifest_path', required=True, type=click.Path(dir_okay=False))
@click.option('--blocks', default='2,4,8,16', show_default=True)
@click.option('--data-dir', default=None, help="Overrides the manifest's data_dir.")
@click.option('--transform-stage', type=click.Choice(TRANSFORM_STAGES), default=None,
              help="Overrides the manifest's transform_stage.")
@click.option('--out-dir', default=None, type=click.Path(file_okay=False),
              help="Defaults to the manifest's out_dir.")
@click.option('--progress', is_flag=True)
@workbench_command
def ablate_command(manifest_path, blocks, data_dir, transform_stage, out_dir, progress):
    """Train and evaluate one model per block size."""
    manifest = _load_run_manifest(manifest_path, data_dir, transform_stage).validate()
    report = ablate_block_size(manifest, _parse_blocks(blocks), progress=progress)
    out = Path(out_dir or manifest.out_dir) / 'ablation'
    _write_report(report, out, {'blocks': blocks, 'seed': manifest.seed})
    record_report('ablate', str(out.with_suffix('.json')), report)
    for row in report.rows:
        click.echo(f'M={row.block_size} {row.condition}: {row.attacked_acc:.4f}')


COMMANDS = [keygen_command, transform_command, keyspace_command, train_command, attack_command,
            eval_command, sweep_command, ablate_command]


def register_commands(app):
    """Attach the workbench commands to the Flask CLI."""
    for command in COMMANDS:
        app.cli.add_command(command)


def main():
    from app import create_app

    FlaskGroup(create_app=create_app, help='ShuffleGuard workbench.')(prog_name='shuffleguard')


if __name__ == '__main__':
    main()
