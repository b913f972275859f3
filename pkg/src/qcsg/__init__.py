"""Quadric CSG abstraction from sparse posed views.

A shape is a union of convexes; each convex is the intersection of convex
quadric primitives selected by a learnable matrix. The package fits that
assembly to masked images by differentiable volume rendering.
"""

from qcsg.assembly import (
    FieldSample,
    PrimitiveBank,
    QueryBatch,
    distance_matrix,
    evaluate_field,
    intersect,
    lift_points,
    overlap_indicator,
    union_hard,
    union_soft,
)

__version__ = "0.1.0"

__all__ = [
    "FieldSample",
    "PrimitiveBank",
    "QueryBatch",
    "distance_matrix",
    "evaluate_field",
    "intersect",
    "lift_points",
    "overlap_indicator",
    "union_hard",
    "union_soft",
]
