"""Tiny parameter-container base class and weight initializers."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Module:
    """Base for components that own trainable tensors and sub-components.

    Assigning a ``Tensor`` or ``Module`` attribute registers it; parameters
    are then reachable by dotted name for the optimizer, checkpoints and
    gradient checks.
    """

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self.__dict__.setdefault("_params", {})[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        """Yield (dotted_name, tensor) for every registered parameter."""
        for name, p in self.__dict__.get("_params", {}).items():
            yield prefix + name, p
        for name, child in self.__dict__.get("_children", {}).items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self, trainable_only: bool = True):
        for _, p in self.named_parameters():
            if p.requires_grad or not trainable_only:
                yield p

    def parameter_count(self, trainable_only: bool = True) -> int:
        return sum(p.size for p in self.parameters(trainable_only))

    def zero_grad(self) -> None:
        for p in self.parameters(trainable_only=False):
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All parameter buffers (trainable and frozen) by dotted name."""
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(arrays)
        extra = set(arrays) - set(own)
        if missing or extra:
            raise ValueError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"state mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int,
           shape=None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def scalar_param(value: float) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
