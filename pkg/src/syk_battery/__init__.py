"""Charging of complex-SYK quantum batteries and scrambling diagnostics."""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import SykBatteryError  # noqa: E402

__all__ = ["SykBatteryError", "__version__"]
