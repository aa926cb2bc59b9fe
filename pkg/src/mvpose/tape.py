"""Minimal reverse-mode tape for the pipeline's primitives.

Each primitive records its output value, its inputs and a vector-Jacobian
product closure. Constants (alignment transforms, confidences, grids) are
plain arrays captured by the closures, so no gradient can reach them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteGradient


class Var:
    __slots__ = ("value", "index", "tape", "name")

    def __init__(self, value, index, tape, name):
        self.value = value
        self.index = index
        self.tape = tape
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var({self.name}, shape={self.shape})"


@dataclass
class _Node:
    name: str
    out: int
    inputs: tuple
    vjp: Callable


@dataclass
class GradientTape:
    nodes: list = field(default_factory=list)
    visit_log: list = field(default_factory=list)
    _count: int = 0

    def _new(self, value, name):
        v = Var(value, self._count, self, name)
        self._count += 1
        return v

    def watch(self, value, name: str = "param") -> Var:
        return self._new(np.asarray(value, dtype=float), name)

    def record(self, name: str, inputs: Sequence[Var], value, vjp: Callable) -> Var:
        out = self._new(value, name)
        self.nodes.append(_Node(name, out.index, tuple(inputs), vjp))
        return out

    def gradient(self, output: Var, sources: Sequence[Var]) -> list[np.ndarray]:
        """Gradient of a scalar ``output`` with respect to each of ``sources``."""
        grads = {output.index: np.ones_like(np.asarray(output.value, dtype=float))}
        self.visit_log = []
        for node in reversed(self.nodes):
            g = grads.pop(node.out, None)
            if g is None:
                continue
            self.visit_log.append(node.out)
            in_grads = node.vjp(g)
            for var, gi in zip(node.inputs, in_grads):
                if gi is None:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NonFiniteGradient(node.name)
                prev = grads.get(var.index)
                grads[var.index] = gi if prev is None else prev + gi
        return [grads.get(s.index, np.zeros_like(s.value)) for s in sources]
