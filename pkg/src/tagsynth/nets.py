"""Small dense network building blocks shared by the classifier and the
generative model: plain MLPs and two-headed Gaussian output stacks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

ACTIVATIONS = {
    "tanh": ad.tanh,
    "leaky_relu": lambda t: ad.leaky_relu(t, 0.2),
}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return scale * rng.standard_normal((fan_in, fan_out))


@dataclass
class DenseLayer:
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias

    def parameters(self, prefix: str) -> list[Parameter]:
        return [Parameter(f"{prefix}/weight", self.weight),
                Parameter(f"{prefix}/bias", self.bias)]


def init_dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> DenseLayer:
    return DenseLayer(
        weight=Tensor(glorot(rng, fan_in, fan_out), requires_grad=True),
        bias=Tensor(np.zeros(fan_out), requires_grad=True),
    )


@dataclass
class Mlp:
    """Dense stack; nonlinearity on hidden layers, last layer linear unless
    ``activate_last`` is set (used for trunks that feed further heads)."""

    layers: list[DenseLayer]
    activation: str = "tanh"
    activate_last: bool = False

    def __call__(self, x) -> Tensor:
        act = ACTIVATIONS[self.activation]
        h = x if isinstance(x, Tensor) else Tensor(x)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < last or self.activate_last:
                h = act(h)
        return h

    def parameters(self, prefix: str) -> list[Parameter]:
        out: list[Parameter] = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.parameters(f"{prefix}/{i}"))
        return out

    def detached(self) -> "Mlp":
        return Mlp(
            layers=[DenseLayer(l.weight.detach(), l.bias.detach()) for l in self.layers],
            activation=self.activation,
            activate_last=self.activate_last,
        )


def init_mlp(rng: np.random.Generator, dims: list[int], activation: str = "tanh",
             activate_last: bool = False) -> Mlp:
    if len(dims) < 2:
        raise ValueError(f"an MLP needs at least [in, out] dims, got {dims}")
    layers = [init_dense(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
    return Mlp(layers=layers, activation=activation, activate_last=activate_last)


@dataclass
class GaussianHead:
    """Trunk plus (mu, half-log-variance) heads; sigma = exp(clamped hlv)."""

    trunk: Mlp
    mu_head: DenseLayer
    half_log_var_head: DenseLayer

    def __call__(self, x) -> tuple[Tensor, Tensor]:
        h = self.trunk(x)
        mu = self.mu_head(h)
        half_log_var = ad.clamp(
            self.half_log_var_head(h), ad.HALF_LOG_VAR_MIN, ad.HALF_LOG_VAR_MAX
        )
        return mu, ad.exp(half_log_var)

    def parameters(self, prefix: str) -> list[Parameter]:
        return (
            self.trunk.parameters(f"{prefix}/trunk")
            + self.mu_head.parameters(f"{prefix}/mu")
            + self.half_log_var_head.parameters(f"{prefix}/half_log_var")
        )


def init_gaussian_head(rng: np.random.Generator, in_dim: int,
                       hidden: tuple[int, ...], out_dim: int,
                       activation: str = "tanh") -> GaussianHead:
    dims = [in_dim, *hidden]
    trunk = init_mlp(rng, dims, activation=activation, activate_last=True) \
        if len(dims) > 1 else Mlp(layers=[], activation=activation)
    feat = dims[-1]
    return GaussianHead(
        trunk=trunk,
        mu_head=init_dense(rng, feat, out_dim),
        half_log_var_head=init_dense(rng, feat, out_dim),
    )
