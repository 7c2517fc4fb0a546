"""Bundled data files: fixture recipes, prompt templates, mock scenarios, scenes and calibrations."""
from __future__ import annotations

from importlib import resources
from pathlib import Path


def asset_path(*parts: str) -> Path:
    """Filesystem path of a bundled asset."""
    return Path(str(resources.files(__name__).joinpath(*parts)))
