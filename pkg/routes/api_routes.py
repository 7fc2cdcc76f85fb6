"""
API Routes - JSON API endpoints
"""

from flask import Blueprint, jsonify

from errors import InvalidArgumentError
from services.keyed_permutation import key_space_report

api_bp = Blueprint('api', __name__, url_prefix='/api')


@api_bp.route('/keyspace/<int(signed=True):block>')
def get_key_space(block):
    """
    Key space of one M x M x 3 block next to the seed space.
    """
    try:
        report = key_space_report(block)
    except InvalidArgumentError as error:
        return jsonify({'error': str(error)}), 400
    return jsonify(report)
