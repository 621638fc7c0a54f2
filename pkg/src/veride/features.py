"""Canonical fiducial feature set and physiological range table."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

# Fixed feature order; every feature vector in the toolkit follows it.
FEATURE_NAMES = (
    "VentricularRate",
    "PRInterval",
    "QRSDuration",
    "QTInterval",
    "QTCorrected",
    "PAxis",
    "RAxis",
    "TAxis",
    "QOnset",
    "QOffset",
    "POnset",
    "POffset",
    "TOffset",
)

N_FEATURES = len(FEATURE_NAMES)

FEATURE_UNITS = {
    "VentricularRate": "bpm",
    "PRInterval": "ms",
    "QRSDuration": "ms",
    "QTInterval": "ms",
    "QTCorrected": "ms",
    "PAxis": "deg",
    "RAxis": "deg",
    "TAxis": "deg",
    "QOnset": "ms",
    "QOffset": "ms",
    "POnset": "ms",
    "POffset": "ms",
    "TOffset": "ms",
}


@dataclass(frozen=True)
class RangeTable:
    """Per-feature inclusive (min, max) bounds used for outlier cleaning."""

    bounds: dict[str, tuple[float, float]]

    def __post_init__(self):
        missing = [f for f in FEATURE_NAMES if f not in self.bounds]
        if missing:
            raise ConfigError(f"range table missing features: {missing}")
        for name, (lo, hi) in self.bounds.items():
            if not lo < hi:
                raise ConfigError(f"range for {name} has min >= max: ({lo}, {hi})")

    def lows(self) -> np.ndarray:
        return np.array([self.bounds[f][0] for f in FEATURE_NAMES], dtype=float)

    def highs(self) -> np.ndarray:
        return np.array([self.bounds[f][1] for f in FEATURE_NAMES], dtype=float)


# Extended physiological ranges for the 13 fiducial features.
DEFAULT_RANGES = RangeTable(
    bounds={
        "VentricularRate": (40.0, 120.0),
        "PRInterval": (100.0, 240.0),
        "QRSDuration": (60.0, 150.0),
        "QTInterval": (300.0, 500.0),
        "QTCorrected": (300.0, 500.0),
        "PAxis": (-30.0, 90.0),
        "RAxis": (-90.0, 120.0),
        "TAxis": (-30.0, 120.0),
        "QOnset": (200.0, 650.0),
        "QOffset": (300.0, 750.0),
        "POnset": (50.0, 500.0),
        "POffset": (150.0, 550.0),
        "TOffset": (500.0, 1200.0),
    }
)

# Calendar-free month length used for all window arithmetic.
DAYS_PER_MONTH = 30.4375
