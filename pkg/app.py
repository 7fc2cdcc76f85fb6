"""
Main Flask application entry point for the ShuffleGuard workbench.

This module provides the application factory pattern for creating Flask app instances.
Routes are organized in blueprint modules in the routes package; the workbench
commands (keygen, transform, train, attack, ...) are attached to ``app.cli``.
"""

from flask import Flask

from cli import register_commands
from database import init_database
from routes import register_blueprints


def create_app():
    """
    Application factory function to create and configure Flask app.

    Returns:
        Flask: Configured Flask application instance
    """
    app = Flask(__name__)

    # Initialize the run registry
    init_database()

    # Register all route blueprints and CLI commands
    register_blueprints(app)
    register_commands(app)

    return app


if __name__ == '__main__':
    app = create_app()
    app.run(debug=True, host='127.0.0.1', port=5000)
