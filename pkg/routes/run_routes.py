"""
Run Routes - browse the run registry
"""

from flask import Blueprint, jsonify

from database import get_all_runs, get_report_rows, get_run_by_id

runs_bp = Blueprint('runs', __name__, url_prefix='/api/runs')


@runs_bp.route('')
def list_runs():
    """All recorded runs, newest first."""
    runs = get_all_runs()
    return jsonify({'runs': runs, 'count': len(runs)})


@runs_bp.route('/<int:run_id>')
def run_detail(run_id):
    """One run with its report rows."""
    run = get_run_by_id(run_id)
    if not run:
        return jsonify({'error': 'Run not found'}), 404
    return jsonify({'run': run, 'rows': get_report_rows(run_id)})
