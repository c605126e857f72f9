"""Minimal layer container: named parameters, buffers, train/eval state."""

from __future__ import annotations

from typing import Iterator, Tuple

import numpy as np

from .tensor import Tensor


class Module:
    """Base for layers holding Tensor parameters and ndarray buffers.

    Attribute discovery follows insertion order, so parameter naming is
    deterministic: Tensor attributes are parameters, ndarray attributes
    are buffers (running stats), Module / list-of-Module attributes
    recurse with dotted names.
    """

    def __init__(self):
        self.training = True

    def _entries(self):
        for key, val in vars(self).items():
            if key == "training":
                continue
            yield key, val

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, val in self._entries():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> Iterator[Tensor]:
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for key, val in self._entries():
            name = f"{prefix}{key}"
            if isinstance(val, np.ndarray):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in self._entries():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())
