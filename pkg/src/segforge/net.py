"""Encoder-decoder network plans and their instantiation.

Two ways to obtain a :class:`NetworkPlan`:

* :func:`build_unet` takes user-defined kernels/strides/channels (the manual
  2D/3D U-Nets).
* :func:`plan_dynunet` derives them from a dataset fingerprint and an
  abstract memory budget (the self-configuring network).

A plan with ``L`` levels has ``L`` kernel entries (one per resolution level)
and ``L - 1`` stride entries (one per downsampling step between levels).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ConvSpec, Tensor
from .errors import ConfigurationError, FormatError
from .layers import ActivationLayer, ConvLayer, NormLayer

FULL_SLICE = "full-slice"
MAX_LEVELS = 6
# bottleneck floor: an axis is only halved while the halved extent stays >= this
MIN_BOTTLENECK = 8
ANISOTROPY_THRESHOLD = 2.0
ACTIVATIONS_PER_VOXEL = 8


@dataclass
class NetworkPlan:
    dims: int
    kernels: list  # L entries, each a per-axis tuple
    strides: list  # L - 1 entries, each a per-axis tuple
    channels: list
    in_channels: int = 1
    num_classes: int = 2
    norm: str = "instance"
    patch_size: Union[tuple, str] = FULL_SLICE
    batch_size: int = 2
    activation: str = "leaky_relu"

    def __post_init__(self):
        self.kernels = [tuple(int(v) for v in k) for k in self.kernels]
        self.strides = [tuple(int(v) for v in s) for s in self.strides]
        self.channels = [int(c) for c in self.channels]
        if not isinstance(self.patch_size, str):
            self.patch_size = tuple(int(v) for v in self.patch_size)

    @property
    def levels(self) -> int:
        return len(self.kernels)

    def cumulative_stride(self) -> tuple:
        cum = [1] * self.dims
        for s in self.strides:
            cum = [c * v for c, v in zip(cum, s)]
        return tuple(cum)

    def validate(self) -> None:
        """Check the structural invariants; raises :class:`ConfigurationError`."""
        if self.dims not in (2, 3):
            raise ConfigurationError(f"dims must be 2 or 3, got {self.dims}")
        L = self.levels
        if L < 1:
            raise ConfigurationError("a plan needs at least one level")
        if len(self.strides) != L - 1:
            raise ConfigurationError(f"{L} levels need {L - 1} stride entries, got {len(self.strides)}")
        if len(self.channels) != L:
            raise ConfigurationError(f"{L} levels need {L} channel widths, got {len(self.channels)}")
        for name, entries in (("kernel", self.kernels), ("stride", self.strides)):
            for lvl, e in enumerate(entries):
                if len(e) != self.dims or any(v < 1 for v in e):
                    raise ConfigurationError(f"{name} at level {lvl} must be {self.dims} entries >= 1, got {e}")
        for lvl, k in enumerate(self.kernels):
            if any(v % 2 == 0 for v in k):
                raise ConfigurationError(f"kernel at level {lvl} must be odd per axis, got {k}")
        if any(b < a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigurationError(f"channel widths must be non-decreasing, got {self.channels}")
        if self.norm not in ("instance", "batch"):
            raise ConfigurationError(f"unknown norm {self.norm!r}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2 (background + foreground)")
        if not isinstance(self.patch_size, str):
            if len(self.patch_size) != self.dims:
                raise ConfigurationError(f"patch_size needs {self.dims} entries, got {self.patch_size}")
            cum = self.cumulative_stride()
            for ax, (p, c) in enumerate(zip(self.patch_size, cum)):
                if p % c:
                    raise ConfigurationError(
                        f"patch axis {ax}: extent {p} is not divisible by cumulative stride {c}")
        elif self.patch_size != FULL_SLICE:
            raise ConfigurationError(f"patch_size must be a tuple or {FULL_SLICE!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernels"] = [list(k) for k in self.kernels]
        d["strides"] = [list(s) for s in self.strides]
        d["patch_size"] = self.patch_size if isinstance(self.patch_size, str) else list(self.patch_size)
        d["levels"] = self.levels
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkPlan":
        required = ("dims", "kernels", "strides", "channels", "in_channels", "num_classes", "norm",
                    "patch_size", "batch_size")
        missing = [k for k in required if k not in d]
        if missing:
            raise FormatError(f"network plan is missing field(s): {', '.join(missing)}")
        try:
            plan = cls(int(d["dims"]), d["kernels"], d["strides"], d["channels"], int(d["in_channels"]),
                       int(d["num_classes"]), d["norm"], d["patch_size"], int(d["batch_size"]),
                       d.get("activation", "leaky_relu"))
        except (TypeError, ValueError) as exc:
            raise FormatError(f"malformed network plan: {exc}") from exc
        return plan


class Network:
    """A U-Net instance: ordered layers plus the plan that wires them."""

    def __init__(self, plan: NetworkPlan, layers: list):
        self.plan = plan
        self.layers = layers
        self._by_name = {layer.name: layer for layer in layers}

    def __getitem__(self, name: str):
        return self._by_name[name]

    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def conv_layers(self) -> list[ConvLayer]:
        return [layer for layer in self.layers if isinstance(layer, ConvLayer)]

    def norm_layers(self) -> list[NormLayer]:
        return [layer for layer in self.layers if isinstance(layer, NormLayer)]

    def replace_layer(self, layer) -> None:
        idx = self.layer_names().index(layer.name)
        self.layers[idx] = layer
        self._by_name[layer.name] = layer

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for layer in self.layers:
            params.update(layer.parameters())
        return params

    def layer_of_param(self) -> dict[str, str]:
        return {pname: layer.name for layer in self.layers for pname in layer.parameters()}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.norm_layers():
            out.update(layer.buffers())
        return out

    def astype(self, dtype) -> "Network":
        for layer in self.layers:
            for p in layer.parameters().values():
                p.data = p.data.astype(dtype)
            if isinstance(layer, ConvLayer):
                layer.weight.data = layer.weight.data.astype(dtype)
                if layer.lora is not None:
                    layer.lora.A.data = layer.lora.A.data.astype(dtype)
                    layer.lora.B.data = layer.lora.B.data.astype(dtype)
            if isinstance(layer, NormLayer):
                layer.running_mean = layer.running_mean.astype(dtype)
                layer.running_var = layer.running_var.astype(dtype)
        return self

    def _block(self, prefix: str, h: Tensor, training: bool) -> Tensor:
        for j in (0, 1):
            h = self[f"{prefix}.conv{j}"].forward(h)
            h = self[f"{prefix}.norm{j}"].forward(h, training)
            h = self[f"{prefix}.act{j}"].forward(h)
        return h

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        """Logits ``[N, num_classes, *spatial]`` for an input ``[N, in_channels, *spatial]``."""
        plan = self.plan
        if x.ndim != plan.dims + 2 or x.shape[1] != plan.in_channels:
            raise ad.DimensionError(
                f"network expects [N, {plan.in_channels}, {plan.dims} spatial], got {x.shape}")
        cum = plan.cumulative_stride()
        for ax, (s, c) in enumerate(zip(x.shape[2:], cum)):
            if s % c:
                raise ad.DimensionError(f"spatial axis {ax}: extent {s} not divisible by cumulative stride {c}")
        skips = []
        h = x
        for lvl in range(plan.levels):
            h = self._block(f"enc{lvl}", h, training)
            skips.append(h)
        for lvl in range(plan.levels - 2, -1, -1):
            h = self[f"up{lvl}"].forward(h)
            h = ad.concat([h, skips[lvl]], axis=1)
            h = self._block(f"dec{lvl}", h, training)
        return self["head"].forward(h)

    __call__ = forward

    def state_dict(self) -> dict[str, np.ndarray]:
        """Every stored array: weights (LoRA-frozen ones included), adapters, norm buffers."""
        out = {}
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                out[f"{layer.name}.weight"] = layer.weight.data
                if layer.bias is not None:
                    out[f"{layer.name}.bias"] = layer.bias.data
            elif isinstance(layer, NormLayer):
                out[f"{layer.name}.gamma"] = layer.gamma.data
                out[f"{layer.name}.beta"] = layer.beta.data
        out.update(self.buffers())
        return out

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = sorted(set(expected) - set(arrays))
        if missing:
            raise FormatError(f"weights missing for: {', '.join(missing[:5])}")
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                layer.weight.data = _checked(arrays, f"{layer.name}.weight", layer.weight.shape)
                if layer.bias is not None:
                    layer.bias.data = _checked(arrays, f"{layer.name}.bias", layer.bias.shape)
            elif isinstance(layer, NormLayer):
                layer.gamma.data = _checked(arrays, f"{layer.name}.gamma", layer.gamma.shape)
                layer.beta.data = _checked(arrays, f"{layer.name}.beta", layer.beta.shape)
                if layer.mode == "batch":
                    layer.running_mean = _checked(arrays, f"{layer.name}.running_mean", layer.running_mean.shape)
                    layer.running_var = _checked(arrays, f"{layer.name}.running_var", layer.running_var.shape)


def _checked(arrays, key, shape):
    arr = np.ascontiguousarray(arrays[key])
    if arr.shape != tuple(shape):
        raise FormatError(f"{key}: stored shape {arr.shape} != expected {tuple(shape)}")
    return arr.copy()


def instantiate(plan: NetworkPlan, rng: Optional[np.random.Generator] = None, dtype=np.float32) -> Network:
    """Create layers with freshly initialized parameters for ``plan``."""
    plan.validate()
    rng = rng if rng is not None else np.random.default_rng(0)
    L, d = plan.levels, plan.dims
    layers: list = []
    top = 2 * (L - 1)

    def block(prefix, c_in, c_out, kernel, stride, depth):
        for j in (0, 1):
            spec = ConvSpec(d, c_in if j == 0 else c_out, c_out, kernel,
                            stride if j == 0 else (1,) * d, tuple((k - 1) // 2 for k in kernel))
            layers.append(ConvLayer.create(f"{prefix}.conv{j}", spec, rng, bias=False, depth_index=depth,
                                           dtype=dtype))
            layers.append(NormLayer(f"{prefix}.norm{j}", plan.norm, c_out, depth, dtype=dtype))
            layers.append(ActivationLayer(f"{prefix}.act{j}", plan.activation, depth_index=depth))

    for lvl in range(L):
        c_in = plan.in_channels if lvl == 0 else plan.channels[lvl - 1]
        stride = (1,) * d if lvl == 0 else plan.strides[lvl - 1]
        block(f"enc{lvl}", c_in, plan.channels[lvl], plan.kernels[lvl], stride, lvl)
    for lvl in range(L - 2, -1, -1):
        depth = top - lvl
        s = plan.strides[lvl]
        up = ConvSpec(d, plan.channels[lvl + 1], plan.channels[lvl], s, s, (0,) * d, transposed=True)
        layers.append(ConvLayer.create(f"up{lvl}", up, rng, bias=True, depth_index=depth, dtype=dtype))
        block(f"dec{lvl}", 2 * plan.channels[lvl], plan.channels[lvl], plan.kernels[lvl], (1,) * d, depth)
    head = ConvSpec(d, plan.channels[0], plan.num_classes, (1,) * d, (1,) * d, (0,) * d)
    layers.append(ConvLayer.create("head", head, rng, bias=True, depth_index=top, dtype=dtype))
    return Network(plan, layers)


def build_unet(dims: int, hyper: dict, in_channels: int = 1, num_classes: int = 2,
               rng: Optional[np.random.Generator] = None, dtype=np.float32) -> Network:
    """Manually configured U-Net.

    ``hyper`` keys: ``kernels`` (per level), ``strides`` (per downsampling),
    ``channels`` (per level), and optionally ``patch_size`` (3D; defaults to
    ``(16, 96, 96)``; 2D always uses whole slices), ``batch_size``, ``norm``.
    """
    if dims not in (2, 3):
        raise ConfigurationError(f"dims must be 2 or 3, got {dims}")
    for key in ("kernels", "strides", "channels"):
        if key not in hyper:
            raise ConfigurationError(f"U-Net hyperparameters need {key!r}")
    if dims == 3:
        patch = tuple(hyper.get("patch_size", (16, 96, 96)))
    else:
        patch = FULL_SLICE
    plan = NetworkPlan(
        dims=dims,
        kernels=[_per_axis(k, dims) for k in hyper["kernels"]],
        strides=[_per_axis(s, dims) for s in hyper["strides"]],
        channels=list(hyper["channels"]),
        in_channels=in_channels,
        num_classes=num_classes,
        norm=hyper.get("norm", "instance" if dims == 3 else "batch"),
        patch_size=patch,
        batch_size=int(hyper.get("batch_size", 2)),
        activation=hyper.get("activation", "leaky_relu"),
    )
    plan.validate()
    return instantiate(plan, rng, dtype)


def default_unet3d_hyper() -> dict:
    return {
        "patch_size": [16, 96, 96],
        "kernels": [[3, 3, 3]] * 4,
        "strides": [[1, 2, 2], [2, 2, 2], [2, 2, 2]],
        "channels": [16, 32, 64, 128],
        "batch_size": 2,
    }


def _per_axis(v, dims):
    if isinstance(v, int):
        return (v,) * dims
    return tuple(v)


@dataclass
class MemoryBudget:
    units: float


def estimate_memory(plan: NetworkPlan, spatial: Optional[Sequence[int]] = None) -> float:
    """Abstract activation-memory cost of one training step.

    ``sum_l(voxels_l * channels_l * ACTIVATIONS_PER_VOXEL) * batch_size``
    where ``voxels_l`` is the feature-map volume at level ``l``.  ``spatial``
    overrides the plan's patch (needed for full-slice 2D plans).
    """
    patch = spatial if spatial is not None else plan.patch_size
    if isinstance(patch, str):
        raise ConfigurationError("a full-slice plan needs an explicit spatial extent to estimate memory")
    extents = [float(p) for p in patch]
    total = 0.0
    for lvl in range(plan.levels):
        if lvl > 0:
            extents = [e / s for e, s in zip(extents, plan.strides[lvl - 1])]
        total += math.prod(extents) * plan.channels[lvl] * ACTIVATIONS_PER_VOXEL
    return total * plan.batch_size


def plan_topology(spacing: Sequence[float], shape: Sequence[int], max_levels: int = MAX_LEVELS):
    """Kernels and strides from spacing/shape using the anisotropy and bottleneck rules.

    At each level an axis gets kernel 1 (and is not downsampled) while its
    current spacing exceeds ``ANISOTROPY_THRESHOLD`` times the finest axis.
    Other axes get kernel 3 and are halved as long as the halved extent stays
    at or above ``MIN_BOTTLENECK``.  Levels stop when no axis can be halved
    or ``max_levels`` is reached.
    """
    sp = [float(s) for s in spacing]
    ext = [int(s) for s in shape]
    kernels, strides = [], []
    while True:
        finest = min(sp)
        coarse = [s > ANISOTROPY_THRESHOLD * finest for s in sp]
        kernels.append(tuple(1 if c else 3 for c in coarse))
        if len(kernels) == max_levels:
            break
        stride = tuple(2 if (not c and e // 2 >= MIN_BOTTLENECK) else 1 for c, e in zip(coarse, ext))
        if all(s == 1 for s in stride):
            break
        strides.append(stride)
        sp = [s * st for s, st in zip(sp, stride)]
        ext = [e // st for e, st in zip(ext, stride)]
    return kernels, strides


def plan_dynunet(fp, mem: Union[MemoryBudget, float], in_channels: int = 1, num_classes: int = 2,
                 base_channels: int = 16, max_channels: int = 320, max_levels: int = MAX_LEVELS,
                 max_batch: int = 8) -> NetworkPlan:
    """Self-configure a network plan from a dataset fingerprint and memory budget.

    The patch starts at one cumulative-stride multiple per axis and grows,
    one multiple at a time on the physically smallest axis, while the cost at
    batch size 2 fits the budget and the patch stays within the median shape
    (rounded up to a stride multiple).  Batch size is then the largest
    ``b >= 2`` that fits (capped at ``max_batch``), else 1.

    Raises:
        ConfigurationError: when even the minimal patch at batch size 1 exceeds the budget.
    """
    budget = float(mem.units if isinstance(mem, MemoryBudget) else mem)
    spacing = list(fp.target_spacing)
    shape = list(fp.median_shape)
    dims = len(shape)
    kernels, strides = plan_topology(spacing, shape, max_levels)
    L = len(kernels)
    channels = [min(base_channels * 2 ** lvl, max_channels) for lvl in range(L)]
    plan = NetworkPlan(dims, kernels, strides, channels, in_channels, num_classes,
                       norm="instance", patch_size=(1,) * dims, batch_size=1)
    cum = plan.cumulative_stride()
    limit = [max(c, -(-s // c) * c) for s, c in zip(shape, cum)]

    def cost(patch, batch):
        plan.patch_size, plan.batch_size = tuple(patch), batch
        return estimate_memory(plan)

    patch = list(cum)
    minimal = cost(patch, 1)
    if minimal > budget:
        raise ConfigurationError(
            f"memory budget {budget:g} is below the minimal requirement {minimal:g} "
            f"(patch {tuple(patch)}, batch 1)")
    while True:
        candidates = [a for a in range(dims) if patch[a] + cum[a] <= limit[a]]
        if not candidates:
            break
        axis = min(candidates, key=lambda a: (patch[a] * spacing[a], a))
        trial = list(patch)
        trial[axis] += cum[axis]
        if cost(trial, 2) > budget:
            break
        patch = trial
    batch = 1
    for b in range(max_batch, 1, -1):
        if cost(patch, b) <= budget:
            batch = b
            break
    plan.patch_size, plan.batch_size = tuple(patch), batch
    plan.validate()
    return plan


def inherit_plan(artifact) -> NetworkPlan:
    """The plan a fine-tuning run must reuse verbatim (accepts an artifact or its arch dict)."""
    arch = artifact if isinstance(artifact, dict) else getattr(artifact, "arch", None)
    if not isinstance(arch, dict):
        raise FormatError("artifact carries no architecture section")
    return NetworkPlan.from_dict(arch)


def group_depths(network: Network) -> list[int]:
    """Distinct depth indices of parameterized layers, input-most first."""
    return sorted({layer.depth_index for layer in network.layers if layer.parameters()})
