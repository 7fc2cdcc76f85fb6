"""
Report writers: CSV tables, JSON provenance and the accuracy-vs-epsilon plot.
"""

import csv
import io
import json
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402

from services.attack_engine import format_epsilon  # noqa: E402

CSV_COLUMNS = ['condition', 'block_size', 'epsilon', 'iterations', 'random_init', 'key_match',
               'clean_acc', 'attacked_acc', 'samples']


@dataclass
class AccuracyRow:
    """One evaluated condition."""

    condition: str
    clean_acc: float
    attacked_acc: float
    epsilon: float = 0.0
    iterations: int = 0
    random_init: bool = False
    key_match: Optional[bool] = None
    block_size: int = 0
    samples: int = 0

    def as_csv(self) -> List[str]:
        key_match = '' if self.key_match is None else str(self.key_match).lower()
        return [self.condition, str(self.block_size), format_epsilon(self.epsilon), str(self.iterations),
                str(self.random_init).lower(), key_match, f'{self.clean_acc:.6f}',
                f'{self.attacked_acc:.6f}', str(self.samples)]


@dataclass
class AccuracyReport:
    """Rows for a set of conditions plus provenance."""

    rows: List[AccuracyRow] = field(default_factory=list)
    manifest_hash: str = ''
    wall_time: float = 0.0
    sample_count: int = 0
    title: str = ''

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(CSV_COLUMNS)
        for row in self.rows:
            writer.writerow(row.as_csv())
        return buffer.getvalue()

    def to_dict(self, provenance: Optional[Dict] = None) -> Dict:
        return {
            'title': self.title,
            'manifest_hash': self.manifest_hash,
            'wall_time': round(self.wall_time, 3),
            'sample_count': self.sample_count,
            'git_revision': git_revision(),
            'provenance': provenance or {},
            'rows': [asdict(row) for row in self.rows],
        }


def git_revision() -> str:
    try:
        result = subprocess.run(['git', 'rev-parse', 'HEAD'], capture_output=True, text=True, timeout=5,
                                cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return 'unknown'
    return result.stdout.strip() if result.returncode == 0 else 'unknown'


def write_csv(report: AccuracyReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_csv(), encoding='utf-8')
    return path


def write_json(report: AccuracyReport, path: Union[str, Path], provenance: Optional[Dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(provenance), indent=2, sort_keys=True), encoding='utf-8')
    return path


def plot_accuracy_vs_epsilon(report: AccuracyReport, path: Union[str, Path], label: str = 'attacked') -> Path:
    """Attacked accuracy against the budget in units of 1/255, as an SVG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = sorted(report.rows, key=lambda row: row.epsilon)
    budgets = [row.epsilon * 255 for row in rows]

    plt.rcParams['svg.hashsalt'] = 'shuffleguard'
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(budgets, [row.attacked_acc for row in rows], marker='o', label=label)
    if rows:
        ax.axhline(rows[0].clean_acc, linestyle='--', color='gray', label='clean')
    ax.set_xlabel('epsilon (x/255)')
    ax.set_ylabel('accuracy')
    ax.set_ylim(0, 1)
    ax.set_title(report.title or 'Accuracy vs. perturbation budget')
    ax.grid(True)
    ax.legend()
    fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)
    return path
