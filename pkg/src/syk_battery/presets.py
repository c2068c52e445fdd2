"""Named parameter sets, one per standard data product.

Sizes are capped at what a single workstation handles in minutes; the
realization counts follow ``ensemble.realization_schedule`` scaled by
``realization_factor``. Override anything from a config file or the CLI.
"""

from __future__ import annotations

from typing import Any

from .errors import ConfigError

PRESETS: dict[str, dict[str, Any]] = {
    # OTOC of the unregularized charger, with optimal-time markers
    "fig2": {
        "command": "otoc",
        "N_list": [4, 5, 6, 7, 8, 9, 10],
        "variants": ["raw"],
        "energy": True,
        "otoc": True,
    },
    # regularized charger: energy, power, OTOC, Lyapunov fits and scalings
    "fig3": {
        "command": "sweep",
        "N_list": [4, 5, 6, 7, 8, 9, 10, 11, 12],
        "variants": ["regularized"],
        "energy": True,
        "otoc": True,
        "otoc_max_N": 10,
        "discard_smallest": 3,
    },
    # level populations and distance to the binomial at the end of the window
    "fig4": {
        "command": "charge",
        "N_list": [10],
        "variants": ["regularized"],
        "hellinger_times": [16.0],
    },
    # population snapshots at a few intermediate times
    "fig5": {
        "command": "charge",
        "N_list": [10],
        "variants": ["regularized"],
        "hellinger_times": [2.0, 5.0, 8.0, 12.0],
    },
    # nested-commutator norms of the regularized charger
    "fig6": {
        "command": "commutators",
        "N_list": [6, 7, 8, 9, 10],
        "variants": ["regularized"],
        "energy": False,
        "commutators": True,
        "k_max": 6,
    },
    # variance decomposition and power bounds in both frames
    "figS7": {
        "command": "sweep",
        "N_list": [4, 5, 6, 7, 8, 9, 10, 11, 12],
        "variants": ["raw", "regularized"],
        "energy": True,
        "discard_smallest": 3,
    },
    # bandwidth scaling
    "figS8": {
        "command": "sweep",
        "N_list": [4, 5, 6, 7, 8, 9, 10, 11, 12],
        "variants": ["regularized"],
        "energy": False,
        "discard_smallest": 3,
    },
}


def preset(name: str) -> dict[str, Any]:
    """Config overrides of a preset, without its ``command`` entry."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    d = dict(PRESETS[name])
    d.pop("command")
    return d
