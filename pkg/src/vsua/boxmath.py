"""Axis-aligned box geometry: IoU, distances, and per-object / per-pair cues.

Boxes are stored in center form ``(cx, cy, w, h)`` in pixels.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np


class Box(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def validate(self) -> "Box":
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive width and height, got {tuple(self)}")
        return self


class ImageSize(NamedTuple):
    w: float
    h: float


def iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # rounding in the corner arithmetic can push the ratio past 1
    return min(1.0, inter / (a.area + b.area - inter))


def center_distance_norm(a: Box, b: Box, img: ImageSize) -> float:
    """Center-to-center distance divided by the image diagonal."""
    return math.hypot(b.cx - a.cx, b.cy - a.cy) / math.hypot(img.w, img.h)


def object_geometry_cue(box: Box, img: ImageSize) -> np.ndarray:
    return np.array([box.cx / img.w, box.cy / img.h, box.w / img.w, box.h / img.h,
                     box.w * box.h / (img.w * img.h)])


def relative_angle(subj: Box, obj: Box) -> float:
    dx, dy = obj.cx - subj.cx, obj.cy - subj.cy
    if dx == 0 and dy == 0:
        return 0.0
    theta = math.atan2(dy, dx)
    # atan2 gives [-pi, pi]; fold -pi onto pi
    return math.pi if theta == -math.pi else theta


def relation_geometry_cue(subj: Box, obj: Box, img: ImageSize) -> np.ndarray:
    """8-d pair cue: translation (2), size ratios (3), IoU, distance, angle."""
    dx, dy = obj.cx - subj.cx, obj.cy - subj.cy
    s = math.sqrt(subj.w * subj.h)
    return np.array([
        dx / s, dy / s,
        obj.w / subj.w, obj.h / subj.h, (obj.w * obj.h) / (subj.w * subj.h),
        iou(subj, obj),
        center_distance_norm(subj, obj, img),
        relative_angle(subj, obj),
    ])
