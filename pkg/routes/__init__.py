"""
Routes Package - Initialize all route blueprints
"""

from .api_routes import api_bp
from .run_routes import runs_bp


def register_blueprints(app):
    """Register all route blueprints with the Flask app."""
    app.register_blueprint(api_bp)
    app.register_blueprint(runs_bp)
