"""Small module system on top of the autodiff tensors: layers and Adam."""

from __future__ import annotations

import math
from typing import Dict, Iterator, List, Tuple

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Tensor, matmul, no_grad, relu, softplus


def Parameter(data, name=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, np.ndarray):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"checkpoint lacks entries: {', '.join(missing)}")
        for name, arr in own.items():
            src = np.asarray(state[name], dtype=np.float64)
            if src.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {src.shape}, model {arr.shape}")
            arr[...] = src

    def _children(self) -> Iterator["Module"]:
        for val in vars(self).values():
            if isinstance(val, Module):
                yield val
            elif isinstance(val, (list, tuple)):
                yield from (m for m in val if isinstance(m, Module))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class BatchNorm(Module):
    """Feature-wise batch normalization for [n, c] or [n, c, h, w] inputs."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int, rng: np.random.Generator):
        std = math.sqrt(2.0 / (c_in * k * k))
        self.weight = Parameter(rng.normal(0.0, std, size=(c_out, c_in, k, k)))
        self.stride = stride
        self.pad = k // 2

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.stride, self.pad)


class ConvBlock(Module):
    """conv3x3 -> batch norm -> ReLU."""

    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        self.conv = Conv2d(c_in, c_out, 3, stride, rng)
        self.bn = BatchNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def __len__(self) -> int:
        return len(self.layers)


def conv_stack(channels: List[int], strides: List[int], rng: np.random.Generator) -> Sequential:
    return Sequential(*[ConvBlock(ci, co, s, rng)
                        for ci, co, s in zip(channels[:-1], channels[1:], strides)])


class Linear(Module):
    """Bias-free linear layer ``x @ W.T`` (identity classifier behind the neck)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float = 0.01):
        self.weight = Parameter(rng.normal(0.0, std, size=(d_out, d_in)))

    def forward(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight.T)


def inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class CosineClassifier(Module):
    """Class weights ``W_CC`` [b, d] and a positive learnable scale ``gamma``.

    ``gamma`` is stored through a softplus reparameterization so it stays positive.
    """

    def __init__(self, d: int, b: int, rng: np.random.Generator, gamma_init: float = 10.0):
        self.weight = Parameter(rng.normal(0.0, 1.0, size=(b, d)))
        self.gamma_raw = Parameter(np.array([inverse_softplus(gamma_init)]))

    @property
    def gamma(self) -> Tensor:
        return softplus(self.gamma_raw)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, f: Tensor) -> Tensor:
        from .losses import cosine_logits
        return cosine_logits(f, self)


class Adam:
    """Adam with decoupled weight decay on parameters of rank >= 2.

    Parameters without a gradient are skipped, including their decay.
    """

    def __init__(self, params: List[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 5e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        with no_grad():
            for p, m, v in zip(self.params, self.m, self.v):
                if p.grad is None:
                    continue  # not reached by this loss: leave untouched
                if self.weight_decay and p.ndim >= 2:
                    p.data -= self.lr * self.weight_decay * p.data
                g = p.grad
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> Dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])
        for i in range(len(self.params)):
            self.m[i][...] = state[f"m.{i}"]
            self.v[i][...] = state[f"v.{i}"]
