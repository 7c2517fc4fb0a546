"""Exception hierarchy shared across the package."""
from __future__ import annotations


class VlaKitchenError(Exception):
    """Base class for every error raised by vla_kitchen."""


class ParseError(VlaKitchenError, ValueError):
    """A structured document (calibration, scene, recipe, config) is malformed."""

    def __init__(self, message: str, source: str | None = None) -> None:
        self.source = source
        super().__init__(f"{source}: {message}" if source else message)
