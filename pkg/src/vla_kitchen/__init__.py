"""Language-driven two-arm kitchen: recipe retrieval, perception, plan/code generation and simulated execution."""

__version__ = "0.1.0"
