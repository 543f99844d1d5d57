"""Parameter containers in the style of ``nn.Module``."""

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from packages.helpers.errors import DimensionError
from packages.numerics import functional as F
from packages.numerics.tensor import DEFAULT_DTYPE, Tensor


def uniform_fan_in(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype=DEFAULT_DTYPE) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def constant(shape: Tuple[int, ...], value: float, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True, dtype=dtype)


class Module:
    """Base class; parameters are Tensor attributes, children are Module attributes or lists of them."""

    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for index, child in enumerate(value):
                    yield f"{key}.{index}", child

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            else:
                yield from value.named_parameters(prefix=f"{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise DimensionError(f"state dict mismatch: missing {missing[:3]}, unexpected {unexpected[:3]}")
        for name, param in own.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise DimensionError(f"parameter {name}: expected shape {param.shape}, got {value.shape}")
            param.data = np.ascontiguousarray(value.astype(param.dtype))

    def astype(self, dtype) -> "Module":
        """Convert every parameter in place to ``dtype`` (f32 or f64)."""
        for _, param in self.named_parameters():
            param.data = np.ascontiguousarray(param.data.astype(dtype))
            param.grad = None
        return self

    @property
    def dtype(self) -> np.dtype:
        params = self.parameters()
        return params[0].dtype if params else np.dtype(DEFAULT_DTYPE)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_fan_in(rng, (out_dim, in_dim), in_dim)
        self.bias: Optional[Tensor] = uniform_fan_in(rng, (out_dim,), in_dim) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = constant((dim,), 1.0)
        self.beta = constant((dim,), 0.0)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)
