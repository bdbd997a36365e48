"""Parameterised building blocks shared by the PAR and compact networks."""
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Registry of Parameters and sub-Modules found on instance attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> Parameter:
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = _uniform(rng, (n_out, n_in), bound, dtype)
        self.bias = _uniform(rng, (n_out,), bound, dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k_freq: int, k_time: int, rng: np.random.Generator, dtype=np.float32):
        bound = 1.0 / np.sqrt(c_in * k_freq * k_time)
        self.weight = _uniform(rng, (c_out, c_in, k_freq, k_time), bound, dtype)
        self.bias = _uniform(rng, (c_out,), bound, dtype)

    @property
    def k_time(self) -> int:
        return self.weight.shape[3]

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)


class MLP(Module):
    """Stack of Linear layers with ReLU between them and a linear output."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, dtype=np.float32, out_bias: Optional[float] = None):
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(sizes[:-1], sizes[1:])]
        if out_bias is not None:
            self.layers[-1].bias.data[...] = out_bias

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


def relative_heights(n_freq: int, dtype=np.float32) -> np.ndarray:
    return (np.arange(n_freq, dtype=np.float64) / n_freq).astype(dtype)[:, None]


def film_modulate(feature_map: Tensor, gamma_net, beta_net) -> Tensor:
    """gamma(k/F) * x + beta(k/F) per channel and frequency row k.

    Works on [C,F,T] and [B,C,F,T]; the condition vector is rebuilt for the
    map's own height, so one pair of nets serves any resolution.
    """
    n_freq = feature_map.shape[-2]
    cond = Tensor(relative_heights(n_freq, feature_map.dtype))
    gamma = gamma_net(cond).transpose(1, 0).reshape(-1, n_freq, 1)
    beta = beta_net(cond).transpose(1, 0).reshape(-1, n_freq, 1)
    return feature_map * gamma + beta


class FiLM(Module):
    def __init__(self, channels: int, hidden: int, n_hidden_layers: int, rng: np.random.Generator, dtype=np.float32):
        sizes = [1] + [hidden] * n_hidden_layers + [channels]
        self.gamma = MLP(sizes, rng, dtype, out_bias=1.0)
        self.beta = MLP(sizes, rng, dtype, out_bias=0.0)

    def coefficients(self, n_freq: int, dtype) -> Tuple[np.ndarray, np.ndarray]:
        """(gamma, beta) as [C, F] arrays, evaluated without a graph."""
        with T.no_grad():
            cond = Tensor(relative_heights(n_freq, dtype))
            return self.gamma(cond).data.T.copy(), self.beta(cond).data.T.copy()

    def __call__(self, x: Tensor) -> Tensor:
        return film_modulate(x, self.gamma, self.beta)


class LSTMCell(Module):
    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator, dtype=np.float32, forget_bias: float = 1.0):
        bound = 1.0 / np.sqrt(n_hidden)
        self.w_ih = _uniform(rng, (4 * n_hidden, n_in), bound, dtype)
        self.w_hh = _uniform(rng, (4 * n_hidden, n_hidden), bound, dtype)
        self.bias = _uniform(rng, (4 * n_hidden,), bound, dtype)
        self.bias.data[n_hidden:2 * n_hidden] = forget_bias
        self.n_hidden = n_hidden

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> Tuple[Tensor, Tensor]:
        return T.lstm_step(x, h, c, self.w_ih, self.w_hh, self.bias)


class LSTMStack(Module):
    def __init__(self, n_in: int, n_hidden: int, n_layers: int, rng: np.random.Generator, dtype=np.float32):
        self.cells = [LSTMCell(n_in if i == 0 else n_hidden, n_hidden, rng, dtype) for i in range(n_layers)]
        self.n_hidden = n_hidden

    def step(self, x: Tensor, hs: List[Tensor], cs: List[Tensor]) -> Tuple[Tensor, List[Tensor], List[Tensor]]:
        new_h, new_c = [], []
        for cell, h, c in zip(self.cells, hs, cs):
            x, c_next = cell(x, h, c)
            new_h.append(x)
            new_c.append(c_next)
        return x, new_h, new_c

    def sequence(self, x: Tensor) -> Tensor:
        """Whole-sequence pass over x [T,N,D] from a zero state; returns [T,N,H]."""
        for cell in self.cells:
            zeros = Tensor(np.zeros((x.shape[1], cell.n_hidden), dtype=x.dtype))
            x = T.lstm_sequence(x, zeros, zeros, cell.w_ih, cell.w_hh, cell.bias)
        return x

    def zero_state(self, n_rows: int, dtype) -> Tuple[List[Tensor], List[Tensor]]:
        zeros = lambda: Tensor(np.zeros((n_rows, self.n_hidden), dtype=dtype))
        return [zeros() for _ in self.cells], [zeros() for _ in self.cells]
