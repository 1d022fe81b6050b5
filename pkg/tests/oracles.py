"""Brute-force reference implementations kept independent of the package code."""

from __future__ import annotations

import itertools
from fractions import Fraction


def brute_axis(dim: int, size: int = 16000, stride: int = 15200) -> list[int]:
    """Slide a window from 0 by ``stride``; once it would overhang, clamp it to the edge and stop."""
    if dim <= size:
        return [0]
    out, x = [], 0
    while True:
        if x + size >= dim:
            out.append(dim - size)
            return out
        out.append(x)
        x += stride


def brute_regions(w: int, h: int, size: int = 16000, stride: int = 15200):
    xs, ys = brute_axis(w, size, stride), brute_axis(h, size, stride)
    return [((x, y), (min(w, size), min(h, size))) for y in ys for x in xs]


def pass_at_k_enum(n: int, c: int, k: int) -> Fraction:
    """Fraction of k-subsets of n attempts (first c correct) containing a correct one."""
    hit = total = 0
    for subset in itertools.combinations(range(n), k):
        total += 1
        hit += any(i < c for i in subset)
    return Fraction(hit, total)


def balanced_accuracy_from_confusion(cm) -> float:
    recalls = [row[i] / sum(row) for i, row in enumerate(cm) if sum(row)]
    return sum(recalls) / len(recalls)
