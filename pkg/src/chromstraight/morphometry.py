"""Size measurements of a chromosome mask: smoothed midline length and width."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

DEFAULT_TAU = 0.04
DEFAULT_WINDOW = 5


@dataclass
class MorphometryProfile:
    midpoints: list[tuple[int, float]] = field(default_factory=list)
    smoothed_midpoints: list[tuple[int, float]] = field(default_factory=list)
    length: float = 0.0
    width: float = 0.0

    def to_record(self) -> dict:
        return {"length": self.length, "width": self.width, "rows": len(self.midpoints)}


def binarize(image: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    return np.asarray(image) > tau


def midpoint_scan(mask: np.ndarray) -> list[tuple[int, float]]:
    """(row, (min_col + max_col) / 2) for every row holding foreground."""
    mask = np.asarray(mask, dtype=bool)
    out = []
    for r in np.flatnonzero(mask.any(axis=1)):
        cols = np.flatnonzero(mask[r])
        out.append((int(r), (cols[0] + cols[-1]) / 2.0))
    return out


def _moving_average(values: np.ndarray, window: int) -> np.ndarray:
    if window < 1 or window % 2 == 0:
        raise ConfigurationError(f"smoothing window must be a positive odd integer, got {window}")
    if window == 1 or values.size == 0:
        return values.astype(np.float64, copy=True)
    half = window // 2
    padded = np.pad(values.astype(np.float64), half, mode="edge")
    return np.convolve(padded, np.ones(window) / window, mode="valid")


def smooth_midpoints(points, window: int = DEFAULT_WINDOW) -> list[tuple[int, float]]:
    """Centred moving average of the midpoint columns with edge replication."""
    if window < 1 or window % 2 == 0:
        raise ConfigurationError(f"smoothing window must be a positive odd integer, got {window}")
    if not points:
        return []
    rows = [r for r, _ in points]
    cols = _moving_average(np.array([c for _, c in points], dtype=np.float64), window)
    return [(r, float(c)) for r, c in zip(rows, cols)]


def polyline_length(points) -> float:
    if len(points) < 2:
        return 0.0
    arr = np.asarray(points, dtype=np.float64)
    return float(np.sum(np.hypot(np.diff(arr[:, 0]), np.diff(arr[:, 1]))))


def measure(image: np.ndarray, tau: float = DEFAULT_TAU, window: int = DEFAULT_WINDOW,
            width_mode: str = "span") -> MorphometryProfile:
    """Midline length and width of the thresholded chromosome.

    ``width_mode="span"`` uses max_col - min_col + 1 over the whole mask;
    ``"count"`` uses the number of columns holding any foreground.
    """
    if width_mode not in ("span", "count"):
        raise ConfigurationError(f"width_mode must be 'span' or 'count', got {width_mode!r}")
    mask = binarize(image, tau)
    mids = midpoint_scan(mask)
    if not mids:
        return MorphometryProfile()
    smoothed = smooth_midpoints(mids, window)
    # length from offsets relative to the first midpoint keeps it exactly translation invariant
    base_row, base_col = mids[0]
    rel = [(r - base_row, c - base_col) for r, c in mids]
    length = polyline_length(smooth_midpoints(rel, window))
    occupied = np.flatnonzero(mask.any(axis=0))
    if width_mode == "span":
        width = float(occupied[-1] - occupied[0] + 1)
    else:
        width = float(occupied.size)
    return MorphometryProfile(midpoints=mids, smoothed_midpoints=smoothed, length=length, width=width)
