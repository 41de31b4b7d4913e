"""Navigation agents that learn from masked exploration paths in synthetic graph worlds."""

__version__ = "0.1.0"
