"""Parameterized building blocks shared by the network builder and the LoRA adapter."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ConvSpec, Tensor


class ConvLayer:
    """A convolution or transposed convolution with an optional LoRA adapter attached."""

    kind_name = "conv"

    def __init__(self, name: str, spec: ConvSpec, weight: Tensor, bias: Optional[Tensor] = None,
                 depth_index: int = 0):
        if tuple(weight.shape) != spec.weight_shape:
            raise ad.DimensionError(f"{name}: weight shape {weight.shape} != {spec.weight_shape}")
        self.name = name
        self.spec = spec
        self.weight = weight
        self.bias = bias
        self.depth_index = depth_index
        self.lora = None
        weight.name = f"{name}.weight"
        if bias is not None:
            bias.name = f"{name}.bias"

    @property
    def kind(self) -> str:
        return "transposed_conv" if self.spec.transposed else "conv"

    @classmethod
    def create(cls, name: str, spec: ConvSpec, rng: np.random.Generator, bias: bool = True,
               depth_index: int = 0, dtype=np.float32) -> "ConvLayer":
        # He-normal over the fan-in seen by one output voxel
        fan_in = (spec.out_channels if spec.transposed else spec.in_channels) * int(np.prod(spec.kernel))
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=spec.weight_shape).astype(dtype)
        b = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True) if bias else None
        return cls(name, spec, Tensor(w, requires_grad=True), b, depth_index)

    def forward(self, x: Tensor) -> Tensor:
        if self.lora is not None:
            from .lora import adapted_forward

            return adapted_forward(self.lora, x, bias=self.bias)
        return self.plain_forward(x)

    def plain_forward(self, x: Tensor, weight: Optional[Tensor] = None) -> Tensor:
        op = ad.conv_transpose_nd if self.spec.transposed else ad.conv_nd
        return op(x, self.spec, self.weight if weight is None else weight, self.bias)

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        if self.lora is None:
            params[f"{self.name}.weight"] = self.weight
        else:
            params[f"{self.name}.lora_A"] = self.lora.A
            params[f"{self.name}.lora_B"] = self.lora.B
        if self.bias is not None:
            params[f"{self.name}.bias"] = self.bias
        return params

    def __repr__(self) -> str:
        extra = f", lora(r={self.lora.rank})" if self.lora is not None else ""
        return f"ConvLayer({self.name!r}, {self.kind}, weight={self.weight.shape}{extra})"


class NormLayer:
    """Instance or batch normalization with per-channel affine parameters."""

    kind = "norm"

    def __init__(self, name: str, mode: str, channels: int, depth_index: int = 0, dtype=np.float32,
                 eps: float = 1e-5):
        if mode not in ("instance", "batch"):
            raise ValueError(f"unknown norm mode {mode!r}")
        self.name = name
        self.mode = mode
        self.eps = eps
        self.depth_index = depth_index
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if self.mode == "instance":
            return ad.instance_norm(x, self.gamma, self.beta, self.eps)
        return ad.batch_norm(x, self.gamma, self.beta, self.eps,
                             running=(self.running_mean, self.running_var), training=training)

    def parameters(self) -> dict[str, Tensor]:
        return {self.gamma.name: self.gamma, self.beta.name: self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        if self.mode != "batch":
            return {}
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}


class ActivationLayer:
    kind = "activation"

    def __init__(self, name: str, fn: str = "leaky_relu", slope: float = 0.01, depth_index: int = 0):
        self.name = name
        self.fn = fn
        self.slope = slope
        self.depth_index = depth_index

    def forward(self, x: Tensor) -> Tensor:
        return ad.activation(x, self.fn, self.slope)

    def parameters(self) -> dict[str, Tensor]:
        return {}
