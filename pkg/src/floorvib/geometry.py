"""Axis-aligned floor rectangles used for floor bounds, proposals and grids."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InputError


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle [x0, x1] x [y0, y1] in floor meters."""

    x0: float
    x1: float
    y0: float
    y1: float

    def __post_init__(self) -> None:
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise InputError(f"empty rectangle {self!r}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def dilate(self, margin: float) -> "Rect":
        return Rect(self.x0 - margin, self.x1 + margin,
                    self.y0 - margin, self.y1 + margin)

    def intersect(self, other: "Rect") -> "Rect":
        """Intersection; raises InputError when empty."""
        return Rect(max(self.x0, other.x0), min(self.x1, other.x1),
                    max(self.y0, other.y0), min(self.y1, other.y1))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.x1, self.y0, self.y1)
