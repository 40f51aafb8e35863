"""Scalar summaries used to compare explanation maps."""
from __future__ import annotations

from itertools import combinations
from typing import Sequence

import numpy as np


def top_decile(values: np.ndarray, q: float = 0.9) -> tuple[np.ndarray, np.ndarray]:
    """Magnitudes and the boolean selection of pixels at or above the ``q`` quantile."""
    mag = np.abs(np.asarray(values, dtype=np.float64))
    return mag, mag >= np.quantile(mag, q)


def localization_mass(values: np.ndarray, mask: np.ndarray, q: float = 0.9) -> float:
    """Fraction of top-decile attribution magnitude that falls inside ``mask``."""
    mag, top = top_decile(values, q)
    total = mag[top].sum()
    if total == 0:
        return 0.0
    return float(mag[top & np.asarray(mask, dtype=bool)].sum() / total)


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a, b = a - a.mean(), b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 0 else 0.0


def mean_pairwise_correlation(maps: Sequence[np.ndarray]) -> float:
    pairs = list(combinations(range(len(maps)), 2))
    if not pairs:
        return float("nan")
    return float(np.mean([pearson(maps[i], maps[j]) for i, j in pairs]))
