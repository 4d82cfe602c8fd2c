"""Geometric predicates for the four relation classes over axis-aligned boxes."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .parse import Relation, RelationClass
from .scene import CameraView

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        if np.any(self.lo > self.hi):
            raise ValueError("box min must not exceed max")

    @classmethod
    def around(cls, points) -> "Box":
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        return cls(p.min(axis=0), p.max(axis=0))

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2.0

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def to_json(self) -> list:
        return [[float(x) for x in self.lo], [float(x) for x in self.hi]]


@dataclass
class RelationConfig:
    eps_contact: float = 0.05
    eps_lat: float = 0.05
    min_overlap: float = 0.2


def footprint_overlap(a: Box, b: Box) -> float:
    """Intersection area of the xy footprints over the smaller footprint area."""
    inter = np.clip(np.minimum(a.hi[:2], b.hi[:2]) - np.maximum(a.lo[:2], b.lo[:2]), 0.0, None)
    area_a = np.prod(a.hi[:2] - a.lo[:2])
    area_b = np.prod(b.hi[:2] - b.lo[:2])
    small = min(area_a, area_b)
    return float(np.prod(inter) / small) if small > 0 else 0.0


def horizontal_distance(a: Box, b: Box) -> float:
    return float(np.linalg.norm(a.center[:2] - b.center[:2]))


def check_relation(target: Box, anchor: Box, relation: Relation, frame: CameraView | None = None,
                   competitors: Iterable[Box] = (), config: RelationConfig | None = None) -> bool:
    """Whether ``target`` stands in ``relation`` to ``anchor``.

    Proximity subtypes are comparative: Near holds when no competitor is
    horizontally closer to the anchor, Far when none is farther. Allocentric
    subtypes are evaluated in the coordinates of ``frame``.
    """
    cfg = config or RelationConfig()
    if target.volume <= 0 or anchor.volume <= 0:
        log.warning("degenerate zero-volume box in relation check")
        return False
    kind, sub = relation.kind, relation.subtype
    if kind is RelationClass.SUPPORT:
        upper, lower = (target, anchor) if sub == "SupportedBy" else (anchor, target)
        return (abs(upper.lo[2] - lower.hi[2]) <= cfg.eps_contact
                and footprint_overlap(upper, lower) >= cfg.min_overlap)
    if kind is RelationClass.VERTICAL:
        if footprint_overlap(target, anchor) < cfg.min_overlap:
            return False
        if sub == "Above":
            return target.lo[2] >= anchor.hi[2] - cfg.eps_contact
        return target.hi[2] <= anchor.lo[2] + cfg.eps_contact
    if kind is RelationClass.HORIZONTAL:
        d = horizontal_distance(target, anchor)
        others = [horizontal_distance(c, anchor) for c in competitors]
        if sub == "Near":
            return all(d <= o for o in others)
        return all(d >= o for o in others)
    if frame is None:
        raise ValueError("allocentric relations need a reference camera")
    t = frame.pose.to_local(target.center)
    a = frame.pose.to_local(anchor.center)
    if sub == "Left":
        return t[0] <= a[0] - cfg.eps_lat
    if sub == "Right":
        return t[0] >= a[0] + cfg.eps_lat
    if sub == "Front":
        return t[2] <= a[2] - cfg.eps_lat
    return t[2] >= a[2] + cfg.eps_lat
