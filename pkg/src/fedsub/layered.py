"""Layerwise matrix algebra.

A model (and every update, gradient and dual variable attached to it) is a
collection of per-layer dense matrices ``x = {x_l}``. All arithmetic is
layerwise and every operation returns a new value; inputs are never mutated.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when two layered values disagree on a layer's shape."""

    def __init__(self, layer, expected, got):
        self.layer = layer
        self.expected = expected
        self.got = got
        super().__init__(f"layer {layer}: expected shape {expected}, got {got}")


@dataclass(frozen=True)
class LayerShape:
    rows: int
    cols: int

    def __post_init__(self):
        if int(self.rows) < 1 or int(self.cols) < 1:
            raise ValueError(f"layer shape must be positive, got {self.rows}x{self.cols}")

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def as_tuple(self) -> tuple[int, int]:
        return (self.rows, self.cols)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, order="C", copy=True, ndmin=2)
    if a.ndim != 2:
        raise ValueError(f"layer must be a 2-d matrix, got ndim={a.ndim}")
    a.flags.writeable = False
    return a


def _owned(a: np.ndarray) -> np.ndarray:
    # freshly computed array: freeze in place without copying
    a.flags.writeable = False
    return a


class LayeredMatrix:
    """Immutable ordered collection of float64 matrices, one per layer.

    Supports ``+``, ``-``, unary ``-`` and multiplication by a scalar; shape
    disagreements raise :class:`ShapeMismatchError` naming the layer.
    """

    __slots__ = ("layers",)
    # numpy scalars defer to our reflected operators instead of broadcasting
    __array_ufunc__ = None

    def __init__(self, layers: Iterable, *, _trusted: bool = False):
        if _trusted:
            object.__setattr__(self, "layers", tuple(layers))
        else:
            layers = tuple(_frozen(a) for a in layers)
            if not layers:
                raise ValueError("a LayeredMatrix needs at least one layer")
            object.__setattr__(self, "layers", layers)

    def __setattr__(self, name, value):
        raise AttributeError("LayeredMatrix is immutable")

    @classmethod
    def zeros(cls, shapes: Sequence) -> "LayeredMatrix":
        return cls([np.zeros(_shape_tuple(s)) for s in shapes])

    @classmethod
    def _wrap(cls, arrays) -> "LayeredMatrix":
        return cls([_owned(a) for a in arrays], _trusted=True)

    @property
    def shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple(a.shape for a in self.layers)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, l) -> np.ndarray:
        return self.layers[l]

    def __iter__(self):
        return iter(self.layers)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __neg__(self):
        return LayeredMatrix._wrap([-a for a in self.layers])

    def __mul__(self, s):
        if isinstance(s, LayerScalars):
            return scale_layerwise(s, self)
        s = float(s)
        return LayeredMatrix._wrap([s * a for a in self.layers])

    __rmul__ = __mul__

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.layers])

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.layers)

    def allclose(self, other, rtol=1e-12, atol=0.0) -> bool:
        check_same_shapes(self, other)
        return all(np.allclose(a, b, rtol=rtol, atol=atol) for a, b in zip(self.layers, other.layers))

    def array_equal(self, other) -> bool:
        return self.shapes == other.shapes and all(
            np.array_equal(a, b) for a, b in zip(self.layers, other.layers)
        )

    def __repr__(self):
        dims = ", ".join(f"{r}x{c}" for r, c in self.shapes)
        return f"LayeredMatrix([{dims}])"


@dataclass(frozen=True)
class LayerScalars:
    """One real per layer, e.g. ``m_l / r_l``."""

    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("layer scalars must be finite")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def __iter__(self):
        return iter(self.values)


def _shape_tuple(s) -> tuple[int, int]:
    if isinstance(s, LayerShape):
        return s.as_tuple()
    r, c = s
    return (int(r), int(c))


def check_same_shapes(a: LayeredMatrix, b: LayeredMatrix) -> None:
    if len(a.layers) != len(b.layers):
        raise ShapeMismatchError(min(len(a.layers), len(b.layers)), len(a.layers), len(b.layers))
    for l, (x, y) in enumerate(zip(a.layers, b.layers)):
        if x.shape != y.shape:
            raise ShapeMismatchError(l, x.shape, y.shape)


def add(a: LayeredMatrix, b: LayeredMatrix) -> LayeredMatrix:
    check_same_shapes(a, b)
    return LayeredMatrix._wrap([x + y for x, y in zip(a.layers, b.layers)])


def subtract(a: LayeredMatrix, b: LayeredMatrix) -> LayeredMatrix:
    check_same_shapes(a, b)
    return LayeredMatrix._wrap([x - y for x, y in zip(a.layers, b.layers)])


def scale_layerwise(s: LayerScalars | Sequence[float], x: LayeredMatrix) -> LayeredMatrix:
    """Multiply layer ``l`` of ``x`` by ``s[l]``."""
    vals = tuple(s.values) if isinstance(s, LayerScalars) else tuple(float(v) for v in s)
    if len(vals) != len(x.layers):
        raise ValueError(f"need {len(x.layers)} layer scalars, got {len(vals)}")
    return LayeredMatrix._wrap([v * a for v, a in zip(vals, x.layers)])


def average(xs: Sequence[LayeredMatrix]) -> LayeredMatrix:
    """Layerwise mean ``(1/n) sum_i x_i``.

    The sum runs in ascending list order so the result does not depend on how
    the inputs were produced (serial or parallel).
    """
    xs = list(xs)
    if not xs:
        raise ValueError("cannot average an empty list")
    first = xs[0]
    for x in xs[1:]:
        check_same_shapes(first, x)
    n = len(xs)
    out = []
    for l in range(len(first.layers)):
        acc = first.layers[l].copy()
        for x in xs[1:]:
            acc += x.layers[l]
        acc /= n
        out.append(acc)
    return LayeredMatrix._wrap(out)


def sum_layered(xs: Sequence[LayeredMatrix]) -> LayeredMatrix:
    """Layerwise sum in ascending list order."""
    xs = list(xs)
    if not xs:
        raise ValueError("cannot sum an empty list")
    first = xs[0]
    out = [a.copy() for a in first.layers]
    for x in xs[1:]:
        check_same_shapes(first, x)
        for acc, a in zip(out, x.layers):
            acc += a
    return LayeredMatrix._wrap(out)


def norm_sq(x: LayeredMatrix) -> float:
    """``sum_l ||x_l||_F^2``."""
    return float(sum(np.vdot(a, a) for a in x.layers))


def norm(x: LayeredMatrix) -> float:
    return float(np.sqrt(norm_sq(x)))
