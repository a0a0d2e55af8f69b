"""Flat parameter vectors and the layout that maps them back onto a model.

The layout is an ordered list of (layer id, parameter name, offset, length)
entries covering every trainable parameter. BatchNorm running statistics are
non-trainable state and are deliberately excluded: they stay local to each
model and never travel through aggregation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class LayoutEntry:
    layer: str
    name: str
    offset: int
    length: int
    shape: tuple[int, ...]


class ParameterLayout:
    def __init__(self, entries: list[LayoutEntry]):
        self.entries = tuple(entries)
        self.total = sum(e.length for e in self.entries)
        expected = 0
        for e in self.entries:
            if e.offset != expected:
                raise LayoutError(f"non-contiguous layout at {e.layer}.{e.name}")
            expected += e.length
        canon = "\n".join(f"{e.layer}|{e.name}|{e.offset}|{e.length}|{e.shape}" for e in self.entries)
        self.hash_bytes = hashlib.sha256(canon.encode()).digest()[:8]

    def __eq__(self, other):
        return isinstance(other, ParameterLayout) and self.entries == other.entries

    def __hash__(self):
        return hash(self.entries)

    def layer_ids(self) -> list[str]:
        seen: list[str] = []
        for e in self.entries:
            if e.layer not in seen:
                seen.append(e.layer)
        return seen

    def slices_for_layer(self, layer: str) -> list[slice]:
        return [slice(e.offset, e.offset + e.length) for e in self.entries if e.layer == layer]


@dataclass
class ParameterVector:
    """Flat float64 view of all trainable parameters of one model."""

    values: np.ndarray
    layout: ParameterLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.total,):
            raise LayoutError(
                f"vector length {self.values.shape} does not match layout total {self.layout.total}"
            )

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)


# A gradient vector shares the representation; the layout contract is identical.
GradientVector = ParameterVector


def model_layout(model) -> ParameterLayout:
    entries = []
    offset = 0
    for name, layer in model.nodes:
        for pname in layer.param_order:
            arr = layer.params[pname]
            entries.append(LayoutEntry(name, pname, offset, arr.size, arr.shape))
            offset += arr.size
    return ParameterLayout(entries)


def flatten(model) -> ParameterVector:
    """Concatenate all trainable parameters into one flat vector."""
    layout = model.layout()
    values = np.empty(layout.total)
    for entry in layout.entries:
        arr = model.layer(entry.layer).params[entry.name]
        values[entry.offset : entry.offset + entry.length] = arr.ravel()
    return ParameterVector(values, layout)


def assign_parameters(model, vector: ParameterVector) -> None:
    """Write a flat vector back into the model's parameter arrays, in place."""
    layout = model.layout()
    if vector.layout != layout:
        raise LayoutError("parameter vector layout does not match model layout")
    for entry in layout.entries:
        chunk = vector.values[entry.offset : entry.offset + entry.length]
        model.layer(entry.layer).params[entry.name] = chunk.reshape(entry.shape).copy()


def unflatten(model, vector: ParameterVector):
    """Return a copy of the model carrying the given parameters.

    Non-trainable state (BN running statistics) is copied over unchanged.
    """
    clone = model.copy()
    assign_parameters(clone, vector)
    return clone


def flatten_per_sample_grads(model, batch: int) -> np.ndarray:
    """Stack per-sample gradients into a (batch, total) matrix."""
    layout = model.layout()
    out = np.empty((batch, layout.total))
    for entry in layout.entries:
        g = model.layer(entry.layer).grads[entry.name]
        out[:, entry.offset : entry.offset + entry.length] = g.reshape(batch, entry.length)
    return out
