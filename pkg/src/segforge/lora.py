"""Low-rank adaptation for N-D convolution and transposed-convolution layers.

The weight update is factorized per kernel position: for every spatial
offset ``k`` of the kernel, ``dW[k] = (alpha / r) * A[k] @ B[k]`` with
``A[k]`` of shape ``(C_out, r)`` and ``B[k]`` of shape ``(r, C_in)``.  The
stacked result ``[*kernel, C_out, C_in]`` is permuted into the layer's
native weight layout, ``[C_out, C_in, *kernel]`` for a plain convolution and
``[C_in, C_out, *kernel]`` for a transposed one.

Because convolution is linear in its weight, the adapted layer computes
``conv(x, W) + conv(x, dW)`` with ``W`` frozen; only ``A``, ``B`` (and the
bias) receive gradients.
"""

from __future__ import annotations

import fnmatch
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ConvSpec, Tensor, _needs_graph, _result
from .layers import ConvLayer

logger = logging.getLogger(__name__)


class AdapterError(RuntimeError):
    pass


@dataclass(frozen=True)
class LoraConfig:
    """Rank/scale of the adapters and which layers receive one.

    ``exclude`` holds glob patterns matched against layer names; an empty
    tuple adapts every conv and transposed-conv layer.
    """

    rank: int = 8
    alpha: float = 8.0
    exclude: tuple = ()

    def __post_init__(self):
        if int(self.rank) != self.rank or self.rank < 1:
            raise ValueError(f"LoRA rank must be a positive integer, got {self.rank}")
        if not (self.alpha > 0 and np.isfinite(self.alpha)):
            raise ValueError(f"LoRA alpha must be positive and finite, got {self.alpha}")
        object.__setattr__(self, "exclude", tuple(self.exclude))

    @property
    def scale(self) -> float:
        return float(self.alpha) / int(self.rank)

    def selects(self, layer_name: str) -> bool:
        return not any(fnmatch.fnmatchcase(layer_name, pat) for pat in self.exclude)

    def to_dict(self) -> dict:
        return {"rank": int(self.rank), "alpha": float(self.alpha), "exclude": list(self.exclude)}

    @classmethod
    def from_dict(cls, d: dict) -> "LoraConfig":
        return cls(int(d["rank"]), float(d["alpha"]), tuple(d.get("exclude", ())))


@dataclass
class LoraState:
    A: Tensor  # [*kernel, C_out, r]
    B: Tensor  # [*kernel, r, C_in]
    frozen_weight: Tensor
    spec: ConvSpec
    rank: int
    alpha: float
    layer_name: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def trainable_count(self) -> int:
        return self.A.size + self.B.size


def lora_param_count(cfg: LoraConfig, spec: ConvSpec) -> int:
    """Number of trainable scalars one adapter adds: ``prod(kernel) * r * (C_out + C_in)``."""
    return int(np.prod(spec.kernel)) * int(cfg.rank) * (spec.out_channels + spec.in_channels)


def _delta_op(A: Tensor, B: Tensor, scale: float, transposed: bool) -> Tensor:
    """Differentiable ``scale * A @ B`` per kernel position, permuted to the weight layout."""
    nk = A.ndim - 2
    prod = np.matmul(A.data, B.data) * A.dtype.type(scale)  # [*k, C_out, C_in]
    lead = (nk, nk + 1) if not transposed else (nk + 1, nk)
    perm = lead + tuple(range(nk))
    out = np.ascontiguousarray(np.transpose(prod, perm))
    inverse = np.argsort(perm)

    def bw(g):
        gk = np.transpose(g, inverse) * A.dtype.type(scale)  # [*k, C_out, C_in]
        grads = []
        if _needs_graph(A):
            grads.append(np.matmul(gk, np.swapaxes(B.data, -1, -2)))
        if _needs_graph(B):
            grads.append(np.matmul(np.swapaxes(A.data, -1, -2), gk))
        return tuple(grads)

    return _result(out, (A, B), bw)


def compose_delta(state: LoraState) -> Tensor:
    """Compose the weight update in the layer's native layout."""
    return _delta_op(state.A, state.B, state.scale, state.spec.transposed)


def adapted_forward(state: LoraState, x: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``conv(x, W_frozen) + conv(x, dW)``; bias is applied once, on the frozen branch."""
    op = ad.conv_transpose_nd if state.spec.transposed else ad.conv_nd
    base = op(x, state.spec, state.frozen_weight, bias)
    if not _needs_graph(state.A, state.B) and not state.A.data.any():
        return base
    return ad.add(base, op(x, state.spec, compose_delta(state)))


def inject(layer: ConvLayer, cfg: LoraConfig, rng: np.random.Generator) -> ConvLayer:
    """Attach an adapter to ``layer`` in place and freeze its original weight.

    ``A`` starts at zero so the adapted layer initially reproduces the
    frozen one; ``B`` is Gaussian with std ``1 / sqrt(C_in * prod(kernel))``.

    Raises:
        AdapterError: if the layer already carries an adapter.
    """
    if layer.lora is not None:
        raise AdapterError(f"layer {layer.name!r} is already adapted")
    spec = layer.spec
    c_in, c_out = spec.in_channels, spec.out_channels
    if cfg.rank >= min(c_in, c_out):
        warnings.warn(f"{layer.name}: LoRA rank {cfg.rank} >= min(C_in, C_out) = {min(c_in, c_out)}; "
                      "no parameter compression", stacklevel=2)
    k = tuple(spec.kernel)
    dtype = layer.weight.dtype
    std = 1.0 / np.sqrt(c_in * int(np.prod(k)))
    A = Tensor(np.zeros(k + (c_out, cfg.rank), dtype=dtype), requires_grad=True,
               name=f"{layer.name}.lora_A")
    B = Tensor(rng.normal(0.0, std, size=k + (cfg.rank, c_in)).astype(dtype), requires_grad=True,
               name=f"{layer.name}.lora_B")
    layer.weight.requires_grad = False
    layer.weight.grad = None
    layer.lora = LoraState(A, B, layer.weight, spec, int(cfg.rank), float(cfg.alpha), layer.name)
    return layer


def merge(layer: ConvLayer) -> ConvLayer:
    """Return a plain layer whose weight is ``W_frozen + dW``; the input layer is left untouched."""
    if layer.lora is None:
        raise AdapterError(f"layer {layer.name!r} has no adapter to merge")
    state = layer.lora
    delta = compose_delta(state).data
    w = Tensor(state.frozen_weight.data + delta, requires_grad=True)
    b = Tensor(layer.bias.data, requires_grad=True) if layer.bias is not None else None
    return ConvLayer(layer.name, layer.spec, w, b, layer.depth_index)


def inject_network(network, cfg: LoraConfig, rng: np.random.Generator) -> list[str]:
    """Adapt every selected conv/transposed-conv layer; returns the adapted names."""
    names = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for layer in network.conv_layers():
            if cfg.selects(layer.name):
                inject(layer, cfg, rng)
                names.append(layer.name)
    low_gain = [str(w.message).split(":")[0] for w in caught]
    if low_gain:
        logger.warning("LoRA rank %d gives no compression on %d layer(s): %s", cfg.rank,
                       len(low_gain), ", ".join(low_gain))
    return names


def merge_network(network) -> None:
    """Replace every adapted layer of ``network`` with its merged plain equivalent."""
    for layer in network.conv_layers():
        if layer.lora is not None:
            network.replace_layer(merge(layer))
