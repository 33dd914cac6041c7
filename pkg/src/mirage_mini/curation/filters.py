"""Clip filters over precomputed detector outputs.

Every threshold is strict on the reject side: a value sitting exactly on a
threshold is kept.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

KEEP, REJECT = "keep", "reject"


def static_frame_verdict(p_frame_mean_size: float, threshold: float) -> str:
    if p_frame_mean_size < 0 or threshold < 0:
        raise ValueError("P-frame size and threshold must be nonnegative")
    return REJECT if p_frame_mean_size < threshold else KEEP


def screen_split_verdict(row_density, col_density, line_threshold: float = 0.5,
                         persistence: float = 0.5) -> str:
    """Reject when a fixed row or column is an edge line (> line_threshold) in more than ``persistence`` of frames."""
    frac = []
    for name, dens in (("row", row_density), ("column", col_density)):
        d = np.asarray(dens, dtype=np.float64)
        if d.ndim != 2 or d.size == 0:
            raise ValueError(f"{name} densities must be a non-empty [frames, {name}s] array")
        if (d < 0).any() or (d > 1).any():
            raise ValueError(f"{name} densities must lie in [0, 1]")
        frac.append((d > line_threshold).mean(axis=0))
    return REJECT if max(f.max() for f in frac) > persistence else KEEP


def union_area(boxes: Sequence[Sequence[float]]) -> float:
    """Exact area of a union of axis-aligned ``[x0, y0, x1, y1]`` rectangles."""
    boxes = [b for b in boxes if b[2] > b[0] and b[3] > b[1]]
    if not boxes:
        return 0.0
    xs = sorted({b[0] for b in boxes} | {b[2] for b in boxes})
    area = 0.0
    for x0, x1 in zip(xs, xs[1:]):
        spans = sorted((b[1], b[3]) for b in boxes if b[0] <= x0 and b[2] >= x1)
        covered, cur_lo, cur_hi = 0.0, None, None
        for lo, hi in spans:
            if cur_hi is None or lo > cur_hi:
                if cur_hi is not None:
                    covered += cur_hi - cur_lo
                cur_lo, cur_hi = lo, hi
            else:
                cur_hi = max(cur_hi, hi)
        if cur_hi is not None:
            covered += cur_hi - cur_lo
        area += covered * (x1 - x0)
    return area


def text_area_verdict(boxes_per_frame, frame_w: float, frame_h: float, max_fraction: float = 0.01) -> str:
    if frame_w <= 0 or frame_h <= 0:
        raise ValueError(f"degenerate frame {frame_w}x{frame_h}")
    limit = max_fraction * frame_w * frame_h
    for boxes in boxes_per_frame:
        for b in boxes:
            if len(b) != 4 or b[0] < 0 or b[1] < 0 or b[2] > frame_w or b[3] > frame_h:
                raise ValueError(f"text box {b} outside {frame_w}x{frame_h} frame")
        if union_area(boxes) > limit:
            return REJECT
    return KEEP


def sync_verdict(offset: float, confidence: float, max_offset: float = 2, min_confidence: float = 3.0) -> str:
    return KEEP if abs(offset) <= max_offset and confidence >= min_confidence else REJECT


def overlay_verdict(score: float, max_score: float = 0.5) -> str:
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"overlay score {score} outside [0, 1]")
    return REJECT if score > max_score else KEEP
