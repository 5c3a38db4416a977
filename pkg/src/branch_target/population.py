"""Finite antichain-labelled point configurations and the branching update."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .labels import Label, is_ancestor


class InconsistentEventError(ValueError):
    """A branching event refers to a particle that is not alive."""


@dataclass(frozen=True)
class PointMeasure:
    """Sum of Dirac masses ``delta_(label, point)``, entries sorted by label.

    ``points`` has shape ``(n, dim)``. Construction never rejects a
    configuration; use :func:`validate` to check the antichain invariant.
    """

    labels: tuple[Label, ...]
    points: np.ndarray
    dim: int

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[Label, Sequence[float]]], dim: int | None = None) -> "PointMeasure":
        entries = [(Label(lab), np.atleast_1d(np.asarray(pt, dtype=float))) for lab, pt in entries]
        if dim is None:
            if not entries:
                raise ValueError("dim is required for an empty measure")
            dim = entries[0][1].shape[0]
        entries.sort(key=lambda e: e[0])
        labels = tuple(e[0] for e in entries)
        # wrong-sized points become NaN rows so that validate() reports them
        points = np.full((len(entries), dim), np.nan)
        for k, (_, pt) in enumerate(entries):
            if pt.shape == (dim,):
                points[k] = pt
        points.setflags(write=False)
        return cls(labels, points, dim)

    @classmethod
    def single(cls, label: Label, point: Sequence[float]) -> "PointMeasure":
        return cls.from_entries([(label, point)])

    @classmethod
    def empty(cls, dim: int) -> "PointMeasure":
        return cls((), np.zeros((0, dim)), dim)

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(zip(self.labels, self.points))

    def __contains__(self, label) -> bool:
        return Label(label) in self.labels

    def point(self, label: Label) -> np.ndarray:
        return self.points[self.labels.index(Label(label))]

    def entries(self) -> list[tuple[Label, np.ndarray]]:
        return list(zip(self.labels, self.points))

    def extend_dim(self, values: Sequence[float] | float) -> "PointMeasure":
        """Append one coordinate to every point (e.g. the target level y)."""
        col = np.broadcast_to(np.asarray(values, dtype=float), (len(self),))
        pts = np.column_stack([self.points, col]) if len(self) else np.zeros((0, self.dim + 1))
        return PointMeasure.from_entries(zip(self.labels, pts), dim=self.dim + 1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointMeasure):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.labels == other.labels
            and np.array_equal(self.points, other.points)
        )

    def __hash__(self):
        return hash((self.labels, self.points.tobytes(), self.dim))

    def to_rows(self, time: float) -> list[list]:
        """CSV rows ``time, label, point components``."""
        return [[time, str(lab), *pt.tolist()] for lab, pt in self]


def validate(mu: PointMeasure) -> bool:
    labels = mu.labels
    if len(set(labels)) != len(labels):
        return False
    if mu.points.shape != (len(labels), mu.dim) or not np.all(np.isfinite(mu.points)):
        return False
    # sorted order puts every ancestor directly before some descendant run,
    # so checking neighbours suffices
    for a, b in zip(labels, labels[1:]):
        if is_ancestor(a, b, strict=True):
            return False
    return True


def branch(mu: PointMeasure, parent: Label, k: int) -> PointMeasure:
    """Replace ``parent`` by ``k`` children carrying the parent's point."""
    parent = Label(parent)
    if parent not in mu.labels:
        raise InconsistentEventError(f"particle {parent} is not alive")
    if k < 0:
        raise ValueError("offspring count must be >= 0")
    pt = mu.point(parent)
    entries = [(lab, p) for lab, p in mu if lab != parent]
    entries += [(parent.child(ell), pt) for ell in range(k)]
    return PointMeasure.from_entries(entries, dim=mu.dim)


@dataclass(frozen=True)
class PopulationEvent:
    time: float
    parent: Label
    offspring_count: int

    def to_row(self) -> list:
        return [self.time, str(self.parent), self.offspring_count]
