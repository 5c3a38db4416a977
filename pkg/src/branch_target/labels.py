"""Genealogical labels: finite words of natural numbers.

The empty word is the ancestor ("root"). A particle labelled ``i`` that
branches into ``k`` offspring produces ``i0, ..., i(k-1)``.
"""
from __future__ import annotations

from typing import Iterable


class Label(tuple):
    """A finite word of non-negative integers, compared lexicographically."""

    __slots__ = ()

    def __new__(cls, digits: Iterable[int] = ()):
        digits = tuple(int(d) for d in digits)
        if any(d < 0 for d in digits):
            raise ValueError(f"label digits must be >= 0, got {digits}")
        return super().__new__(cls, digits)

    @classmethod
    def parse(cls, text: str) -> "Label":
        text = text.strip()
        if text in ("root", ""):
            return ROOT
        return cls(int(tok) for tok in text.split("."))

    @property
    def generation(self) -> int:
        return len(self)

    def child(self, digit: int) -> "Label":
        return Label(tuple(self) + (digit,))

    def parent(self) -> "Label":
        if not self:
            raise ValueError("the root has no parent")
        return Label(self[:-1])

    def __add__(self, other):  # concatenation stays a Label
        return Label(tuple(self) + tuple(other))

    def __str__(self) -> str:
        return ".".join(str(d) for d in self) if self else "root"

    def __repr__(self) -> str:
        return f"Label({str(self)!r})"


ROOT = Label()


def concat(i: Label, j: Label) -> Label:
    return Label(tuple(i) + tuple(j))


def is_ancestor(j: Label, i: Label, strict: bool = False) -> bool:
    """True iff ``i = j l`` for some word ``l`` (non-empty when ``strict``)."""
    if len(j) > len(i) or tuple(i[: len(j)]) != tuple(j):
        return False
    return len(i) > len(j) if strict else True


def common_prefix_length(i: Label, j: Label) -> int:
    p = 0
    for a, b in zip(i, j):
        if a != b:
            break
        p += 1
    return p


def label_distance(i: Label, j: Label) -> int:
    # p is the longest common prefix; later coincidences are ignored so that
    # the result is a metric.
    p = common_prefix_length(i, j)
    return sum(d + 1 for d in i[p:]) + sum(d + 1 for d in j[p:])


def norm(i: Label) -> int:
    """Distance to the root: sum of (digit + 1)."""
    return sum(d + 1 for d in i)


def digit_sum(i: Label) -> int:
    """Plain digit sum (the size functional used on the control space)."""
    return sum(i)


def tree_labels(depth: int, width: int, root: Label = ROOT) -> list[Label]:
    """All labels below ``root`` with at most ``depth`` extra digits, each < ``width``.

    Ordered breadth first, so every parent precedes its children.
    """
    out = [Label(root)]
    frontier = [Label(root)]
    for _ in range(depth):
        frontier = [lab.child(k) for lab in frontier for k in range(width)]
        out.extend(frontier)
    return out
