"""
Experiment Harness Module - training runs, evaluation, sweeps and ablations

Implements the manifest-driven protocol: train a (possibly key-defended)
classifier, evaluate clean and attacked accuracy under a matrix of attack
conditions, sweep the budget, and ablate the block size.
"""

import csv
import dataclasses
import hashlib
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

from tqdm import tqdm

from errors import ConfigError, InvalidArgumentError
from services.attack_engine import (
    AttackConfig, bpda_attack, parse_epsilon, pgd
)
from services.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from services.data_pipeline import (
    TRANSFORM_STAGES, DatasetSplit, batch_indices, load_cifar10, prepare_batch
)
from services.keyed_permutation import BlockGrid, KeyedShuffle, SecretKey
from services.nn_model import ArchitectureConfig, build_model, predict
from services.reporting import AccuracyReport, AccuracyRow
from services.tensor_autodiff import SGD, OptimizerState, Tensor, backward, softmax_cross_entropy

logger = logging.getLogger(__name__)

_CONDITION = re.compile(r'^(clean|fgsm|pgdkey|pgd|bpda)(\d+)?(r)?(?:@(.+))?$', re.IGNORECASE)


@dataclass
class ExperimentManifest:
    """Everything a run needs; rendered canonically for hashing."""

    variant: str = 'desk_small'
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    key_file: str = ''
    block_size: int = 4
    transform_stage: str = 'post'
    augment: bool = True
    train_subset: int = 5000
    test_subset: int = 1000
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_step_epochs: int = 12
    gamma: float = 0.1
    step_size: str = '2/255'
    epsilons: str = '8/255'
    attacks: str = 'clean,pgd20,bpda40r@random,bpda40r@true'
    bpda_backward: str = 'identity'
    ablation_attack: str = 'pgd20'
    ablation_epsilon: str = '32/255'
    adv_train_eps: str = '0'
    adv_train_steps: int = 7
    data_dir: str = ''
    out_dir: str = 'runs'

    @property
    def defended(self) -> bool:
        return bool(self.key_file)

    @property
    def epsilon_values(self) -> List[float]:
        return sorted(parse_epsilon(value) for value in _split(self.epsilons))

    @property
    def conditions(self) -> List['ConditionSpec']:
        return [parse_condition(text) for text in _split(self.attacks)]

    def load_key(self) -> Optional[SecretKey]:
        return SecretKey.load(self.key_file) if self.key_file else None

    def grid(self) -> Optional[BlockGrid]:
        return BlockGrid(M=self.block_size) if self.defended else None

    def architecture(self) -> ArchitectureConfig:
        return ArchitectureConfig(variant=self.variant)

    def to_text(self) -> str:
        values = dataclasses.asdict(self)
        return ''.join(f'{name} = {_render(values[name])}\n' for name in sorted(values))

    def manifest_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode('utf-8')).hexdigest()

    def run_name(self) -> str:
        block = f'M{self.block_size}' if self.defended else 'plain'
        return f'{self.variant}-{block}-s{self.seed}-{self.manifest_hash()[:8]}'

    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.run_name()

    def replace(self, **changes) -> 'ExperimentManifest':
        return dataclasses.replace(self, **changes)

    def full_scale(self) -> 'ExperimentManifest':
        return self.replace(variant='resnet18', epochs=160, lr_step_epochs=40, train_subset=0, test_subset=0)

    def validate(self, require_files: bool = True) -> 'ExperimentManifest':
        """Check values and referenced files; raises ConfigError listing every problem."""
        problems = []
        try:
            self.architecture()
        except InvalidArgumentError as error:
            problems.append(str(error))
        for name in ('epochs', 'train_subset', 'test_subset', 'adv_train_steps'):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be non-negative.")
        for name in ('batch_size', 'block_size', 'lr_step_epochs'):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive.")
        if self.transform_stage not in TRANSFORM_STAGES:
            problems.append(f"transform_stage must be one of {TRANSFORM_STAGES}.")
        for name in ('step_size', 'epsilons', 'ablation_epsilon', 'adv_train_eps'):
            try:
                values = [parse_epsilon(v) for v in _split(getattr(self, name))]
            except InvalidArgumentError as error:
                problems.append(f"{name}: {error}")
                continue
            if any(not 0 <= v <= 1 for v in values):
                problems.append(f"{name} values must lie in [0, 1].")
        for name in ('attacks', 'ablation_attack'):
            try:
                conditions = [parse_condition(text) for text in _split(getattr(self, name))]
            except InvalidArgumentError as error:
                problems.append(str(error))
                continue
            if not self.defended and any(c.kind in ('bpda', 'pgdkey') for c in conditions):
                problems.append(f"{name}: key-based attacks need a key_file.")
        if require_files:
            if self.key_file and not Path(self.key_file).is_file():
                problems.append(f"key_file '{self.key_file}' does not exist.")
            if self.data_dir and not Path(self.data_dir).is_dir():
                problems.append(f"data_dir '{self.data_dir}' does not exist.")
        if problems:
            raise ConfigError('Invalid manifest: ' + ' '.join(problems))
        return self


def _split(text: str) -> List[str]:
    return [part.strip() for part in str(text).split(',') if part.strip()]


def _render(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    return str(value)


def _coerce(name: str, raw: str, kind):
    if kind is bool:
        lowered = raw.lower()
        if lowered not in ('true', 'false', '1', '0', 'yes', 'no'):
            raise ConfigError(f"{name}: expected true/false, got '{raw}'.")
        return lowered in ('true', '1', 'yes')
    try:
        return kind(raw)
    except ValueError as error:
        raise ConfigError(f"{name}: cannot parse '{raw}' as {kind.__name__}.") from error


def parse_manifest(text: str) -> ExperimentManifest:
    """Parse 'key = value' lines; '#' starts a comment."""
    kinds = {f.name: type(f.default) for f in dataclasses.fields(ExperimentManifest)}
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"Manifest line {number}: expected 'key = value'.")
        name, raw = (part.strip() for part in line.split('=', 1))
        if name not in kinds:
            raise ConfigError(f"Manifest line {number}: unknown key '{name}'.")
        values[name] = _coerce(name, raw, kinds[name])
    return ExperimentManifest(**values)


def load_manifest(path: Union[str, Path]) -> ExperimentManifest:
    try:
        text = Path(path).read_text(encoding='utf-8')
    except OSError as error:
        raise ConfigError(f"Cannot read manifest '{path}': {error}") from error
    return parse_manifest(text)


@dataclass(frozen=True)
class ConditionSpec:
    """An attack condition such as 'pgd20', 'bpda40r@random' or 'clean'."""

    kind: str
    iterations: int = 0
    random_init: bool = False
    guess: str = ''

    @property
    def name(self) -> str:
        if self.kind in ('clean', 'fgsm'):
            return self.kind
        text = f"{self.kind}{self.iterations}{'r' if self.random_init else ''}"
        return f'{text}@{self.guess}' if self.kind == 'bpda' else text

    def attack_config(self, epsilon: float, key: Optional[SecretKey], grid: Optional[BlockGrid],
                      step_size: float, seed: int, bpda_backward: str = 'identity') -> Optional[AttackConfig]:
        """The AttackConfig for this condition at one budget; None for 'clean'."""
        if self.kind == 'clean':
            return None
        if self.kind == 'fgsm':
            return AttackConfig(epsilon=epsilon, step_size=epsilon, iterations=1, seed=seed)
        guessed = None
        backward_mode = bpda_backward
        if self.kind in ('bpda', 'pgdkey'):
            if key is None or grid is None:
                raise InvalidArgumentError(f"Condition '{self.name}' needs the defense key and grid.")
            if self.kind == 'pgdkey':
                guessed, backward_mode = key, 'exact-guessed'
            elif self.guess == 'true':
                guessed = key
            elif self.guess == 'random':
                guessed = SecretKey.guess(seed)
            else:
                guessed = SecretKey.load(self.guess)
        return AttackConfig(epsilon=epsilon, step_size=step_size, iterations=self.iterations,
                            random_init=self.random_init, guessed_key=guessed, grid=grid,
                            bpda_backward=backward_mode, seed=seed)


def parse_condition(text: str) -> ConditionSpec:
    match = _CONDITION.match(text.strip()) if text else None
    if not match:
        raise InvalidArgumentError(f"Unknown attack condition '{text}'.")
    kind, iterations, rand, guess = match.groups()
    kind = kind.lower()
    if guess and guess.lower() in ('random', 'true'):
        guess = guess.lower()
    if kind in ('clean', 'fgsm'):
        if iterations or rand or guess:
            raise InvalidArgumentError(f"Condition '{kind}' takes no iterations, 'r' or key guess.")
        return ConditionSpec(kind)
    if not iterations:
        raise InvalidArgumentError(f"Condition '{text}' needs an iteration count, e.g. {kind}20.")
    if guess and kind != 'bpda':
        raise InvalidArgumentError(f"Only bpda conditions take a key guess: '{text}'.")
    return ConditionSpec(kind, int(iterations), bool(rand), guess or ('random' if kind == 'bpda' else ''))


@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_acc: float
    test_acc: float
    lr: float


@dataclass
class TrainingResult:
    checkpoint_path: Path
    log: List[EpochLog] = field(default_factory=list)
    train_acc: float = 0.0
    test_acc: float = 0.0
    wall_time: float = 0.0


def load_data(manifest: ExperimentManifest, data: Optional[Tuple[DatasetSplit, DatasetSplit]] = None) -> Tuple[DatasetSplit, DatasetSplit]:
    train_split, test_split = data if data is not None else load_cifar10(manifest.data_dir or None)
    return train_split.subset(manifest.train_subset), test_split.subset(manifest.test_subset)


def clean_accuracy(model, split: DatasetSplit, key: Optional[SecretKey], grid: Optional[BlockGrid],
                   batch_size: int = 256, transform_stage: str = 'post') -> float:
    """Accuracy on a split passed through the defense with the given key."""
    if len(split) == 0:
        return 0.0
    model.eval()
    correct = 0
    for indices in batch_indices(len(split), batch_size, shuffle=False):
        batch, labels = prepare_batch(split, indices, key, grid, transform_stage=transform_stage)
        correct += int((predict(model, batch) == labels).sum())
    return correct / len(split)


def train(manifest: ExperimentManifest, data: Optional[Tuple[DatasetSplit, DatasetSplit]] = None,
          progress: bool = False) -> TrainingResult:
    """
    Train a classifier on (optionally key-shuffled) images and write a checkpoint.

    Args:
        manifest: validated experiment manifest
        data: preloaded (train, test) splits; loaded from data_dir otherwise
        progress: show tqdm progress bars

    Returns:
        TrainingResult: checkpoint path, per-epoch log and final accuracies
    """
    started = time.perf_counter()
    manifest.validate()
    train_split, test_split = load_data(manifest, data)
    key, grid = manifest.load_key(), manifest.grid()
    model = build_model(manifest.architecture(), seed=manifest.seed)
    state = OptimizerState(lr=manifest.lr, momentum=manifest.momentum, weight_decay=manifest.weight_decay,
                           step_epochs=manifest.lr_step_epochs, gamma=manifest.gamma)
    optimizer = SGD(model.parameters(), state)
    adv_eps = parse_epsilon(manifest.adv_train_eps)
    adv_cfg = None
    if adv_eps > 0:
        adv_cfg = AttackConfig(epsilon=adv_eps, step_size=parse_epsilon(manifest.step_size),
                               iterations=manifest.adv_train_steps, random_init=True, seed=manifest.seed)

    logger.info("Training %s on %d images (%s, %d epochs)", manifest.variant, len(train_split),
                f'block {manifest.block_size}' if key else 'no transform', manifest.epochs)
    log = []
    for epoch in range(manifest.epochs):
        model.train()
        total_loss, correct = 0.0, 0
        batches = batch_indices(len(train_split), manifest.batch_size, manifest.seed, epoch)
        for indices in tqdm(batches, desc=f'epoch {epoch + 1}', disable=not progress, leave=False):
            batch, labels = prepare_batch(train_split, indices, key, grid, augment_flag=manifest.augment,
                                          seed=manifest.seed, epoch=epoch,
                                          transform_stage=manifest.transform_stage)
            if adv_cfg is not None:
                model.eval()
                batch = pgd(model, batch, labels, dataclasses.replace(adv_cfg, seed=manifest.seed + epoch),
                            sample_ids=indices).adv_images
                model.train()
            optimizer.zero_grad()
            out = model(Tensor(batch))
            loss = softmax_cross_entropy(out, labels)
            backward(loss)
            optimizer.step()
            total_loss += float(loss.data) * len(indices)
            correct += int((out.data.argmax(axis=1) == labels).sum())
        lr = state.lr
        optimizer.end_epoch()
        test_acc = clean_accuracy(model, test_split, key, grid, transform_stage=manifest.transform_stage)
        entry = EpochLog(epoch + 1, total_loss / max(len(train_split), 1),
                         correct / max(len(train_split), 1), test_acc, lr)
        log.append(entry)
        logger.info("epoch %d: loss %.4f train %.4f test %.4f lr %.5f",
                    entry.epoch, entry.loss, entry.train_acc, entry.test_acc, entry.lr)

    run_dir = manifest.run_dir()
    checkpoint_path = run_dir / 'model.npz'
    meta = {
        'block_size': manifest.block_size if key else 0,
        'key_fingerprint': key.fingerprint() if key else None,
        'seed': manifest.seed,
        'epoch': manifest.epochs,
        'transform_stage': manifest.transform_stage,
        'manifest_hash': manifest.manifest_hash(),
    }
    save_checkpoint(checkpoint_path, model, state, meta)
    (run_dir / 'manifest.txt').write_text(manifest.to_text(), encoding='utf-8')
    write_training_log(log, run_dir / 'train_log.csv')

    train_acc = clean_accuracy(model, train_split, key, grid, transform_stage=manifest.transform_stage)
    final_test = log[-1].test_acc if log else clean_accuracy(model, test_split, key, grid,
                                                                   transform_stage=manifest.transform_stage)
    return TrainingResult(checkpoint_path, log, train_acc, final_test, time.perf_counter() - started)


def write_training_log(log: Sequence[EpochLog], path: Path):
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(['epoch', 'loss', 'train_acc', 'test_acc', 'lr'])
        for entry in log:
            writer.writerow([entry.epoch, f'{entry.loss:.6f}', f'{entry.train_acc:.6f}',
                             f'{entry.test_acc:.6f}', f'{entry.lr:.8g}'])


def evaluate(checkpoint: Checkpoint, key: Optional[SecretKey], split: DatasetSplit,
             attack: Optional[AttackConfig] = None, condition: Optional[str] = None,
             grid: Optional[BlockGrid] = None, batch_size: int = 128,
             allow_key_mismatch: bool = False, progress: bool = False) -> AccuracyRow:
    """
    Clean and attacked accuracy of a checkpoint on a split.

    Accuracy counts samples with predict(model, shuffle(x or x_adv, key)) == y.
    An attack with a guessed key runs the adaptive BPDA attack; otherwise PGD
    differentiates the bare classifier at the unshuffled input.

    Args:
        checkpoint: loaded checkpoint
        key: the defense key (None for an undefended model)
        split: evaluation split
        attack: attack to run, or None for clean accuracy only
        condition: row label
        grid: block grid of the defense; defaults to the checkpoint's block size
        allow_key_mismatch: evaluate with a key other than the training key

    Returns:
        AccuracyRow
    """
    if key is None:
        block_size = 0
    else:
        block_size = grid.M if grid is not None else checkpoint.block_size
    checkpoint.check_key(key, block_size, allow_key_mismatch)
    if key is not None and grid is None:
        grid = BlockGrid(M=block_size)
    model = checkpoint.model.eval().freeze()
    defense = KeyedShuffle.from_key(key, grid) if key is not None else None

    clean_correct = attacked_correct = 0
    batches = batch_indices(len(split), batch_size, shuffle=False)
    for indices in tqdm(batches, desc=condition or 'eval', disable=not progress, leave=False):
        x, y = prepare_batch(split, indices, None, None)
        clean_pred = predict(model, defense.apply(x) if defense else x)
        clean_correct += int((clean_pred == y).sum())
        if attack is None:
            attacked_correct += int((clean_pred == y).sum())
            continue
        if attack.guessed_key is not None:
            adv = bpda_attack(model, x, y, attack, sample_ids=indices).adv_images
        else:
            adv = pgd(model, x, y, attack, sample_ids=indices).adv_images
        attacked_pred = predict(model, defense.apply(adv) if defense else adv)
        attacked_correct += int((attacked_pred == y).sum())

    total = max(len(split), 1)
    key_match = None
    if attack is not None and attack.guessed_key is not None:
        key_match = attack.guessed_key == key
    return AccuracyRow(
        condition=condition or ('clean' if attack is None else 'attack'),
        clean_acc=clean_correct / total,
        attacked_acc=attacked_correct / total,
        epsilon=attack.epsilon if attack is not None else 0.0,
        iterations=attack.iterations if attack is not None else 0,
        random_init=attack.random_init if attack is not None else False,
        key_match=key_match,
        block_size=block_size,
        samples=len(split),
    )


def evaluate_matrix(checkpoint: Checkpoint, key: Optional[SecretKey], split: DatasetSplit,
                    conditions: Iterable[ConditionSpec], epsilons: Iterable[float], step_size: float = 2 / 255,
                    seed: int = 0, bpda_backward: str = 'identity', batch_size: int = 128,
                    manifest_hash: str = '', progress: bool = False) -> AccuracyReport:
    """One row per (epsilon, condition), in the style of an attack-setting table."""
    started = time.perf_counter()
    grid = checkpoint.defense_grid(key)
    rows = []
    for epsilon in sorted(epsilons):
        for condition in conditions:
            cfg = condition.attack_config(epsilon, key, grid, step_size, seed, bpda_backward)
            row = evaluate(checkpoint, key, split, cfg, condition=condition.name,
                           batch_size=batch_size, progress=progress)
            if cfg is None:
                row.epsilon = epsilon
            rows.append(row)
    return AccuracyReport(rows=rows, manifest_hash=manifest_hash, wall_time=time.perf_counter() - started,
                          sample_count=len(split), title='Attack-setting matrix')


def sweep(checkpoint: Checkpoint, key: Optional[SecretKey], epsilons: Iterable[float], template: AttackConfig,
          split: DatasetSplit, condition: str = 'attack', batch_size: int = 128, workers: int = 1,
          manifest_hash: str = '', progress: bool = False) -> AccuracyReport:
    """
    Evaluate one attack template across budgets; rows sorted by epsilon.

    An epsilon of 0 reproduces the clean accuracy.
    """
    started = time.perf_counter()
    budgets = sorted(parse_epsilon(eps) for eps in epsilons)
    # single-step templates (FGSM) take a step as large as the budget
    single_step = template.iterations == 1 and template.step_size == template.epsilon
    configs = [dataclasses.replace(template, epsilon=eps, step_size=eps if single_step else template.step_size)
               for eps in budgets]
    checkpoint.model.eval().freeze()

    def run(cfg: AttackConfig) -> AccuracyRow:
        return evaluate(checkpoint, key, split, cfg, condition=condition, batch_size=batch_size,
                        allow_key_mismatch=False, progress=progress and workers == 1)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, configs))
    else:
        rows = [run(cfg) for cfg in configs]
    return AccuracyReport(rows=rows, manifest_hash=manifest_hash, wall_time=time.perf_counter() - started,
                          sample_count=len(split), title=f'Accuracy vs. perturbation budget ({condition})')


def ablate_block_size(manifest: ExperimentManifest, block_sizes: Sequence[int],
                      data: Optional[Tuple[DatasetSplit, DatasetSplit]] = None,
                      progress: bool = False) -> AccuracyReport:
    """
    Train one model per block size and report clean and attacked accuracy.

    Requires a defended manifest (key_file set).
    """
    if not manifest.defended:
        raise ConfigError("Block-size ablation needs a key_file.")
    started = time.perf_counter()
    data = load_data(manifest.replace(train_subset=0, test_subset=0), data)
    key = manifest.load_key()
    condition = parse_condition(manifest.ablation_attack)
    epsilon = parse_epsilon(manifest.ablation_epsilon)
    rows = []
    for block_size in block_sizes:
        run_manifest = manifest.replace(block_size=int(block_size))
        result = train(run_manifest, data, progress=progress)
        checkpoint = load_checkpoint(result.checkpoint_path)
        _, test_split = load_data(run_manifest, data)
        grid = run_manifest.grid()
        rows.append(evaluate(checkpoint, key, test_split, None, condition='clean'))
        cfg = condition.attack_config(epsilon, key, grid, parse_epsilon(manifest.step_size),
                                      manifest.seed, manifest.bpda_backward)
        rows.append(evaluate(checkpoint, key, test_split, cfg, condition=condition.name))
    return AccuracyReport(rows=rows, manifest_hash=manifest.manifest_hash(),
                          wall_time=time.perf_counter() - started,
                          sample_count=rows[-1].samples if rows else 0, title='Block-size ablation')


def run_pipeline(manifest: ExperimentManifest, data: Optional[Tuple[DatasetSplit, DatasetSplit]] = None,
                 progress: bool = False) -> Tuple[TrainingResult, AccuracyReport]:
    """Train, then evaluate the manifest's attack matrix on the test subset."""
    result = train(manifest, data, progress=progress)
    checkpoint = load_checkpoint(result.checkpoint_path)
    _, test_split = load_data(manifest, data)
    report = evaluate_matrix(checkpoint, manifest.load_key(), test_split, manifest.conditions,
                             manifest.epsilon_values, parse_epsilon(manifest.step_size), manifest.seed,
                             manifest.bpda_backward, manifest.batch_size, manifest.manifest_hash(), progress)
    return result, report
