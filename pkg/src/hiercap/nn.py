"""Parameter containers shared by the encoder, decoder and explainer."""
from __future__ import annotations

import numpy as np

from .tensor import GruParams, Tensor


class Module:
    """Holds named parameter tensors and child modules.

    Attribute order defines parameter order, which checkpoints rely on.
    """

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, GruParams):
                for k, t in value.tensors().items():
                    yield f"{full}.{k}", t
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, GruParams):
                        for k, t in item.tensors().items():
                            yield f"{full}.{i}.{k}", t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        extra = state.keys() - own.keys()
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, t in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {t.shape}")
            t.data = arr.copy()

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())


def param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-limit, limit, shape))
