"""Per-frame parameter records shared by every stage."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .bodymodel import GlobalPlacement, ShapeParams


@dataclass(frozen=True)
class FrameRecord:
    """One frame's body parameters; invalid frames carry no parameters."""

    index: int
    valid: bool
    pose: np.ndarray | None = None         # (3J,) axis-angle per joint
    beta: np.ndarray | None = None
    scale: float | None = None
    rotation: np.ndarray | None = None     # global rotation, axis-angle
    translation: np.ndarray | None = None  # camera-frame translation
    mask: str | None = None

    @classmethod
    def invalid(cls, index: int, mask: str | None = None) -> "FrameRecord":
        return cls(index, False, mask=mask)

    @property
    def shape(self) -> ShapeParams:
        return ShapeParams(self.beta, self.scale)

    @property
    def placement(self) -> GlobalPlacement:
        return GlobalPlacement(self.rotation, self.translation)

    def with_(self, **changes) -> "FrameRecord":
        return replace(self, **changes)

    def params_equal(self, other: "FrameRecord", tol: float = 0.0) -> bool:
        if self.valid != other.valid:
            return False
        if not self.valid:
            return True
        pairs = [(self.pose, other.pose), (self.beta, other.beta),
                 (self.rotation, other.rotation), (self.translation, other.translation),
                 ([self.scale], [other.scale])]
        return all(np.abs(np.asarray(a) - np.asarray(b)).max(initial=0.0) <= tol for a, b in pairs)
