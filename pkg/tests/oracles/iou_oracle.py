"""Brute-force IoU oracle for integer-coordinate boxes.

Counts unit grid cells covered by each box and takes the exact cell-count
ratio via Fraction, so results carry no accumulated float error.
"""

from fractions import Fraction


def _cells(box):
    x0, y0, x1, y1 = (int(v) for v in box)
    return {(x, y) for x in range(x0, x1) for y in range(y0, y1)}


def iou_unit_grid(a, b):
    cells_a, cells_b = _cells(a), _cells(b)
    union = cells_a | cells_b
    if not union:
        return 0.0
    return float(Fraction(len(cells_a & cells_b), len(union)))
