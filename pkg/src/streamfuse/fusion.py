"""Spatial fusion of multi-stream feature maps.

Five ways to merge S1 same-shape maps [H, W, D] into one: elementwise sum or
max, or concatenation along the channel, width, or height axis in stream
order.  Concatenation fusions change exactly one extent, to S1 times its
input value; sum and max preserve the shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .autodiff import ShapeError, Tensor, add, concat, maximum_of

FUSION_KINDS = ("sum", "max", "channel", "width", "height")

# concatenation axis counted from the end so batched [N,H,W,D] maps work too
_CONCAT_AXIS = {"channel": -1, "width": -2, "height": -3}


@dataclass
class FusionKind:
    kind: str

    def __post_init__(self):
        if self.kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {self.kind!r}, expected one of {FUSION_KINDS}")


@dataclass
class FusedMap:
    """Result of one fusion: the merged map, the method, and the arity S1."""

    y: Tensor
    kind: str
    arity: int


def fuse(kind, maps: Sequence[Tensor]) -> FusedMap:
    """Merge 2 <= S1 <= S stream maps of identical shape into one map.

    sum:     y[i,j,d] = sum_s x_s[i,j,d]
    max:     y[i,j,d] = max_s x_s[i,j,d]   (ties favor the earliest stream)
    channel: block s occupies channels [(s-1) D, s D)
    width:   block s occupies columns  [(s-1) W, s W)
    height:  block s occupies rows     [(s-1) H, s H)

    Stream order is the declaration order of ``maps``.
    """
    name = kind.kind if isinstance(kind, FusionKind) else kind
    if name not in FUSION_KINDS:
        raise ValueError(f"unknown fusion kind {name!r}, expected one of {FUSION_KINDS}")
    maps = list(maps)
    if len(maps) < 2:
        raise ShapeError(f"fusion needs at least two streams, got {len(maps)}")
    shape = maps[0].shape
    if maps[0].data.ndim < 3:
        raise ShapeError(f"fusion expects [H,W,D] maps, got shape {list(shape)}")
    for i, m in enumerate(maps[1:], start=2):
        if m.shape != shape:
            raise ShapeError(
                f"fusion: stream 1 has shape {list(shape)} but stream {i} has {list(m.shape)}"
            )

    if name == "sum":
        y = maps[0]
        for m in maps[1:]:
            y = add(y, m)
    elif name == "max":
        y = maximum_of(maps)
    else:
        y = concat(maps, axis=_CONCAT_AXIS[name])
    return FusedMap(y=y, kind=name, arity=len(maps))
