"""Module containers and the standard layers built on the autodiff ops."""

from __future__ import annotations

import hashlib
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, get_dtype


class Module:
    """Tree of parameters, buffers, and child modules.

    Parameter names are the dotted attribute paths from the root module,
    so they are unique and stable for a given architecture.
    """

    def __init__(self) -> None:
        self.training = True

    # -- traversal --------------------------------------------------------
    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Parameter):
                value.name = name
                yield name, value
            else:
                yield from value.named_parameters(name)

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> Dict[str, Parameter]:
        return {n: p for n, p in self.named_parameters() if p.trainable}

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for key, arr in getattr(self, "_buffers", {}).items():
            yield (f"{prefix}.{key}" if prefix else key), arr
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}.{key}" if prefix else key)

    # -- modes ------------------------------------------------------------
    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.trainable = False
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.trainable = True
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- state ------------------------------------------------------------
    def state_dict(self, buffers: bool = True) -> Dict[str, np.ndarray]:
        state = {n: p.data.copy() for n, p in self.named_parameters()}
        if buffers:
            state.update({n: b.copy() for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = [n for n in list(params) + list(bufs) if n not in state]
        unknown = [n for n in state if n not in params and n not in bufs]
        if strict and (missing or unknown):
            raise KeyError(f"state mismatch: missing={missing[:5]} unknown={unknown[:5]}")
        for name, arr in state.items():
            if name in params:
                p = params[name]
                if p.shape != arr.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
                p.data = np.array(arr, dtype=p.data.dtype, copy=True)
            elif name in bufs:
                bufs[name][...] = arr

    def param_hash(self, names=None) -> str:
        """SHA-256 over the raw bytes of the selected parameters (name-sorted)."""
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            if names is not None and name not in names:
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def num_parameters(self, trainable_only: bool = False) -> int:
        return int(sum(p.size for p in self.parameters() if p.trainable or not trainable_only))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _init(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape).astype(get_dtype())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        super().__init__()
        w = np.zeros((d_in, d_out), dtype=get_dtype()) if zero else _init(rng, (d_in, d_out), d_in ** -0.5)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, dtype=get_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(d, dtype=get_dtype()))
        self.beta = Parameter(np.zeros(d, dtype=get_dtype()))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, std: float = 0.02):
        super().__init__()
        self.weight = Parameter(_init(rng, (n, d), std))

    def forward(self, ids: np.ndarray) -> Tensor:
        return ops.embedding(ids, self.weight)


class BatchNorm1d(Module):
    """Batch norm with running statistics kept as buffers (not parameters)."""

    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(c, dtype=get_dtype()))
        self.beta = Parameter(np.zeros(c, dtype=get_dtype()))
        self._buffers = {
            "running_mean": np.zeros(c, dtype=get_dtype()),
            "running_var": np.ones(c, dtype=get_dtype()),
        }
        self.momentum = momentum
        self.eps = eps

    @property
    def running_mean(self) -> np.ndarray:
        return self._buffers["running_mean"]

    @property
    def running_var(self) -> np.ndarray:
        return self._buffers["running_var"]

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm1d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class Dropout(Module):
    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def forward(self, x: Tensor, rng: Optional[np.random.Generator]) -> Tensor:
        return ops.dropout(x, self.p, self.training, rng)


class FeedForward(Module):
    """d -> d_ff -> d with GELU; ``zero_out`` zero-initialises the output layer."""

    def __init__(self, d: int, d_ff: int, rng: np.random.Generator, zero_out: bool = False, d_in: Optional[int] = None):
        super().__init__()
        self.fc1 = Linear(d_in or d, d_ff, rng)
        self.fc2 = Linear(d_ff, d, rng, zero=zero_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))
