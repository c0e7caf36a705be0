"""Training loop: Dice loss, AdamW, cosine schedule, freezing schedules, sliding-window inference."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .artifact import ModelArtifact
from .autodiff import NumericError, Tensor
from .data import (AugmentPolicy, PreprocessRecord, VolumeBundle, augment, draw_centers, extract_patch,
                   preprocess, restore_labels, select_slices)
from .errors import ConfigurationError, DataError, UsageError
from .layers import ConvLayer, NormLayer
from .lora import LoraConfig, inject_network
from .metrics import dice_per_label, summarize
from .net import FULL_SLICE, Network, NetworkPlan, instantiate

logger = logging.getLogger(__name__)

DICE_EPS = 1e-5


# --------------------------------------------------------------------------
# loss


def one_hot(labels: np.ndarray, k: int, dtype=np.float32) -> np.ndarray:
    """``[N, *S]`` integer labels -> ``[N, K, *S]`` one-hot."""
    if labels.size and int(labels.max()) >= k:
        raise DataError(f"label id {int(labels.max())} >= number of classes {k}")
    eye = np.eye(k, dtype=dtype)
    return np.ascontiguousarray(np.moveaxis(eye[labels.astype(np.int64)], -1, 1))


def dice_loss(logits: Tensor, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """Soft Dice loss averaged over foreground classes.

    ``1 - mean_k (2 sum(p_k t_k) + eps) / (sum(p_k) + sum(t_k) + eps)`` for
    ``k >= 1``, with ``p = softmax(logits)`` over the channel axis and sums
    taken over the batch and all spatial positions.
    """
    k = logits.shape[1]
    if k < 2:
        raise DataError("dice_loss needs at least two classes (background + foreground)")
    t = one_hot(np.asarray(target), k, dtype=logits.dtype)
    p = ad.softmax(logits, axis=1)
    axes = (0,) + tuple(range(2, logits.ndim))
    inter = ad.sum(ad.mul(p, Tensor(t, dtype=logits.dtype)), axis=axes)
    psum = ad.sum(p, axis=axes)
    tsum = t.sum(axis=axes)
    dice = ad.div(ad.add(ad.mul(inter, 2.0), eps), ad.add(psum, Tensor(tsum + eps, dtype=logits.dtype)))
    return ad.sub(1.0, ad.mean(dice[1:]))


def soft_dice_value(probs: np.ndarray, target: np.ndarray, eps: float = DICE_EPS) -> float:
    """Graph-free value of :func:`dice_loss` given probabilities ``[N, K, *S]``."""
    t = one_hot(target, probs.shape[1], dtype=np.float64)
    axes = (0,) + tuple(range(2, probs.ndim))
    inter = (probs * t).sum(axis=axes)
    d = (2 * inter + eps) / (probs.sum(axis=axes) + t.sum(axis=axes) + eps)
    return float(1.0 - d[1:].mean())


# --------------------------------------------------------------------------
# optimizer and schedule


class AdamW:
    """Adam with decoupled weight decay; state is kept per parameter name.

    ``w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * w)``
    """

    def __init__(self, weight_decay: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state: dict[str, dict] = {}

    def step(self, params: dict, lr: float, trainable: Optional[set] = None) -> None:
        for name, p in params.items():
            if trainable is not None and name not in trainable:
                continue
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            adamw_step(p.data, g, st, lr, self.weight_decay, self.beta1, self.beta2, self.eps)

    def zero_grad(self, params: dict) -> None:
        for p in params.values():
            p.grad = None


def adamw_step(w: np.ndarray, g: np.ndarray, state: dict, lr: float, weight_decay: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place AdamW update of ``w`` with moment buffers in ``state``."""
    state["t"] += 1
    t = state["t"]
    m, v = state["m"], state["v"]
    m *= beta1
    m += (1 - beta1) * g
    v *= beta2
    v += (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    w -= (lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * w)).astype(w.dtype)


def cosine_lr(t: float, lr0: float, lr_min: float, t_max: int, schedule: str = "cosine") -> float:
    """``lr_min + (lr0 - lr_min) * (1 + cos(pi * t / t_max)) / 2``; constant mode returns ``lr0``."""
    if schedule == "constant":
        return lr0
    return lr_min + (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / t_max)) / 2.0


# --------------------------------------------------------------------------
# freezing


@dataclass(frozen=True)
class FreezePolicy:
    """``mode`` is ``none``, ``static`` (with ``frozen_fraction``) or ``gradual``."""

    mode: str = "none"
    frozen_fraction: float = 0.0
    interval_fraction: float = 0.10
    full_unfreeze_fraction: float = 0.75
    norm_always_trainable: bool = True

    def __post_init__(self):
        if self.mode not in ("none", "static", "gradual"):
            raise ConfigurationError(f"unknown freeze mode {self.mode!r}")
        if not 0.0 <= self.frozen_fraction <= 1.0:
            raise ConfigurationError(f"frozen_fraction must be in [0, 1], got {self.frozen_fraction}")
        if not 0.0 < self.interval_fraction <= 1.0 or not 0.0 <= self.full_unfreeze_fraction <= 1.0:
            raise ConfigurationError("interval/full-unfreeze fractions must lie in (0, 1]")

    @classmethod
    def parse(cls, text: str) -> "FreezePolicy":
        """``gu`` / ``gradual``, ``static:<f>``, or ``none``."""
        text = text.strip().lower()
        if text in ("gu", "gradual"):
            return cls("gradual")
        if text == "none":
            return cls("none")
        if text.startswith("static:"):
            try:
                return cls("static", float(text.split(":", 1)[1]))
            except ValueError as exc:
                raise ConfigurationError(f"bad static fraction in {text!r}") from exc
        raise ConfigurationError(f"unknown freezing strategy {text!r}")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "frozen_fraction": self.frozen_fraction,
                "interval_fraction": self.interval_fraction,
                "full_unfreeze_fraction": self.full_unfreeze_fraction,
                "norm_always_trainable": self.norm_always_trainable}

    @classmethod
    def from_dict(cls, d: dict) -> "FreezePolicy":
        return cls(**d)


class FreezeSchedule:
    """Epoch -> number of trainable layer groups, independent of any concrete network.

    Groups are ordered output-most first.  Gradual mode starts with one
    group, adds one every ``ceil(interval_fraction * T_max)`` epochs and
    opens everything from ``floor(full_unfreeze_fraction * T_max)`` on.
    """

    def __init__(self, policy: FreezePolicy, n_groups: int, t_max: int):
        if n_groups < 1:
            raise ConfigurationError("need at least one layer group")
        self.policy = policy
        self.n_groups = n_groups
        self.t_max = t_max
        self.interval = max(1, math.ceil(policy.interval_fraction * t_max))
        self.full_at = math.floor(policy.full_unfreeze_fraction * t_max)

    def open_groups(self, epoch: int) -> int:
        p = self.policy
        if p.mode == "none":
            return self.n_groups
        if p.mode == "static":
            return self.n_groups - math.ceil(p.frozen_fraction * self.n_groups)
        if epoch >= self.full_at:
            return self.n_groups
        return min(self.n_groups, 1 + epoch // self.interval)

    def unfreeze_epochs(self) -> list[int]:
        """Epochs at which the open group count grows (gradual mode), epoch 0 included."""
        if self.policy.mode != "gradual":
            return [0]
        events, prev = [], 0
        for e in range(self.t_max + 1):
            n = self.open_groups(e)
            if n > prev:
                events.append(e)
                prev = n
            if n == self.n_groups:
                break
        return events


class FreezePlan:
    """A :class:`FreezeSchedule` bound to a network's layer groups (by depth index)."""

    def __init__(self, network: Network, policy: FreezePolicy, t_max: int):
        self.policy = policy
        param_layers = [layer for layer in network.layers if layer.parameters()]
        depths = sorted({layer.depth_index for layer in param_layers}, reverse=True)
        self.groups = [[layer.name for layer in param_layers if layer.depth_index == d] for d in depths]
        self.norm_names = [layer.name for layer in network.norm_layers()]
        self.schedule = FreezeSchedule(policy, len(depths), t_max)

    def trainable_layers(self, epoch: int) -> set[str]:
        n = self.schedule.open_groups(epoch)
        names = {name for group in self.groups[:n] for name in group}
        if self.policy.norm_always_trainable:
            names.update(self.norm_names)
        return names

    def __call__(self, epoch: int) -> set[str]:
        return self.trainable_layers(epoch)


def freeze_plan(network: Network, policy: FreezePolicy, t_max: int) -> FreezePlan:
    return FreezePlan(network, policy, t_max)


def apply_trainable(network: Network, layer_names: set[str]) -> set[str]:
    """Set ``requires_grad`` on every parameter; returns the trainable parameter names.

    LoRA-adapted layers keep their base weight frozen at all times and
    train ``A``/``B`` (plus bias) only while the layer is open.
    """
    trainable = set()
    for layer in network.layers:
        open_ = layer.name in layer_names
        for pname, p in layer.parameters().items():
            p.requires_grad = open_
            if open_:
                trainable.add(pname)
        if isinstance(layer, ConvLayer) and layer.lora is not None:
            layer.weight.requires_grad = False
    return trainable


# --------------------------------------------------------------------------
# inference


def window_starts(extent: int, patch: int, overlap: float) -> list[int]:
    """Regular grid of window starts covering ``[0, extent)`` with the last window flush."""
    if extent <= patch:
        return [0]
    step = max(1, int(patch * (1.0 - overlap)))
    starts = list(range(0, extent - patch + 1, step))
    if starts[-1] + patch < extent:
        starts.append(extent - patch)
    return starts


def _pad_to_multiple(image: np.ndarray, multiple: Sequence[int], mode: str):
    spatial = image.shape[-len(multiple):]
    pads = [(0, (-s) % m) for s, m in zip(spatial, multiple)]
    if not any(p for _, p in pads):
        return image, spatial
    lead = [(0, 0)] * (image.ndim - len(multiple))
    if mode == "reflect" and any(p >= s for (_, p), s in zip(pads, spatial)):
        mode = "symmetric" if all(p <= s for (_, p), s in zip(pads, spatial)) else "edge"
    return np.pad(image, lead + pads, mode=mode), spatial


def _forward_probs(network: Network, batch: np.ndarray) -> np.ndarray:
    x = Tensor(batch, dtype=network.layers[0].weight.dtype)
    return ad.softmax(network.forward(x, training=False), axis=1).data


def sliding_window_infer(network: Network, image: np.ndarray, patch_size, overlap: float = 0.5,
                         batch_size: int = 4) -> np.ndarray:
    """Class probabilities ``[K, *spatial]`` for ``image`` ``[C, *spatial]``.

    Windows on a regular grid with fractional ``overlap`` are averaged with
    uniform weights.  Volumes smaller than the patch are zero padded.  A 2D
    network applied to a 3D image runs slice by slice along the first axis,
    each slice reflect-padded to the cumulative-stride multiple.
    """
    plan = network.plan
    spatial = image.shape[1:]
    if plan.dims == 2 and len(spatial) == 3:
        return np.stack([sliding_window_infer(network, image[:, i], patch_size, overlap, batch_size)
                         for i in range(spatial[0])], axis=1)
    if patch_size == FULL_SLICE or patch_size is None:
        padded, orig = _pad_to_multiple(image, plan.cumulative_stride(), "reflect")
        probs = _forward_probs(network, padded[None])[0]
        return probs[(slice(None),) + tuple(slice(0, s) for s in orig)]
    patch = tuple(patch_size)
    pads = [(0, max(0, p - s)) for s, p in zip(spatial, patch)]
    vol = np.pad(image, [(0, 0)] + pads) if any(p for _, p in pads) else image
    grid = [window_starts(s, p, overlap) for s, p in zip(vol.shape[1:], patch)]
    k = plan.num_classes
    acc = np.zeros((k,) + vol.shape[1:], dtype=np.float64)
    count = np.zeros(vol.shape[1:], dtype=np.float64)
    origins = list(np.array(np.meshgrid(*grid, indexing="ij")).reshape(len(grid), -1).T)
    for i in range(0, len(origins), batch_size):
        chunk = origins[i:i + batch_size]
        sls = [tuple(slice(int(o), int(o) + p) for o, p in zip(org, patch)) for org in chunk]
        batch = np.stack([vol[(slice(None),) + sl] for sl in sls])
        probs = _forward_probs(network, batch)
        for sl, pr in zip(sls, probs):
            acc[(slice(None),) + sl] += pr
            count[sl] += 1.0
    acc /= count
    return acc[(slice(None),) + tuple(slice(0, s) for s in spatial)]


def window_coverage(spatial: Sequence[int], patch: Sequence[int], overlap: float) -> np.ndarray:
    """How many windows cover each voxel (used to check the tiling)."""
    count = np.zeros(tuple(max(s, p) for s, p in zip(spatial, patch)), dtype=np.int64)
    grid = [window_starts(max(s, p), p, overlap) for s, p in zip(spatial, patch)]
    for org in np.array(np.meshgrid(*grid, indexing="ij")).reshape(len(grid), -1).T:
        count[tuple(slice(int(o), int(o) + p) for o, p in zip(org, patch))] += 1
    return count[tuple(slice(0, s) for s in spatial)]


def predict_preprocessed(network: Network, bundle: VolumeBundle, patch_size, overlap: float = 0.5) -> np.ndarray:
    probs = sliding_window_infer(network, bundle.image, patch_size, overlap)
    return np.argmax(probs, axis=0).astype(np.uint16)


def predict_bundle(network: Network, artifact: ModelArtifact, bundle: VolumeBundle,
                   overlap: float = 0.5) -> np.ndarray:
    """Preprocess with the artifact's settings, infer, and map back to the bundle's geometry."""
    pre = artifact.preprocess
    prepped, record = preprocess(bundle, pre["target_spacing"], int(pre.get("crop_margin", 0)))
    pred = predict_preprocessed(network, prepped, _patch_from(pre["patch_size"]), overlap)
    return restore_labels(pred, record)


def _patch_from(p):
    return p if isinstance(p, str) else tuple(p)


# --------------------------------------------------------------------------
# configuration and records


@dataclass
class TrainConfig:
    epochs: int = 200
    patience: int = 20
    lr0: float = 1e-3
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    lr_schedule: str = "cosine"
    batch_size: Optional[int] = None
    steps_per_epoch: Optional[int] = None
    max_steps_per_epoch: int = 50
    seed: int = 0
    augment: AugmentPolicy = field(default_factory=AugmentPolicy.scratch)
    freeze: FreezePolicy = field(default_factory=FreezePolicy)
    lora: Optional[LoraConfig] = None
    pos_fraction: float = 0.75
    overlap: float = 0.5
    slice_surround: int = 1
    crop_margin: int = 0
    dtype: str = "float32"
    remap_labels: bool = False

    def validate(self) -> None:
        if not self.lr0 > self.lr_min > 0:
            raise ConfigurationError(f"need lr0 > lr_min > 0, got lr0={self.lr0}, lr_min={self.lr_min}")
        if self.epochs < 1:
            raise ConfigurationError("epochs (T_max) must be >= 1")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigurationError("steps_per_epoch must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def fine_tuning(self) -> bool:
        return self.freeze.mode != "none" or self.lora is not None

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "patience": self.patience, "lr0": self.lr0, "lr_min": self.lr_min,
            "weight_decay": self.weight_decay, "lr_schedule": self.lr_schedule,
            "batch_size": self.batch_size, "steps_per_epoch": self.steps_per_epoch,
            "max_steps_per_epoch": self.max_steps_per_epoch, "seed": self.seed,
            "augment": self.augment.to_dict(), "freeze": self.freeze.to_dict(),
            "lora": self.lora.to_dict() if self.lora else None, "pos_fraction": self.pos_fraction,
            "overlap": self.overlap, "slice_surround": self.slice_surround, "crop_margin": self.crop_margin,
            "dtype": self.dtype, "remap_labels": self.remap_labels,
        }

    @classmethod
    def from_dict(cls, d: dict, fine_tune: bool = False) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        kwargs = {k: v for k, v in d.items() if k not in ("augment", "freeze", "lora")}
        try:
            if "augment" in d and d["augment"] is not None:
                kwargs["augment"] = AugmentPolicy.from_dict(d["augment"])
            elif fine_tune:
                kwargs["augment"] = AugmentPolicy.finetune()
            if d.get("freeze"):
                kwargs["freeze"] = FreezePolicy.from_dict(d["freeze"])
            if d.get("lora"):
                kwargs["lora"] = LoraConfig.from_dict(d["lora"])
            if "lr0" not in d and fine_tune:
                kwargs["lr0"] = 1e-4
            cfg = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from exc
        cfg.validate()
        return cfg


@dataclass
class MetricsRecord:
    """One entry per completed epoch; ``initial`` is the validation score before any update."""

    labels: list
    entries: list = field(default_factory=list)
    initial: Optional[dict] = None
    unfreeze_epochs: list = field(default_factory=list)
    stopped_early: bool = False

    @property
    def best_epoch(self) -> int:
        if not self.entries:
            return 0
        curve = self.mean_dsc_curve()
        return int(np.argmax(curve)) + 1

    @property
    def best_mean_dsc(self) -> float:
        return max(self.mean_dsc_curve()) if self.entries else float("nan")

    def mean_dsc_curve(self) -> list[float]:
        return [e["mean_dsc"] for e in self.entries]

    def columns(self) -> list[str]:
        return (["epoch", "lr", "train_loss", "val_loss"] + [f"dsc_{lbl}" for lbl in self.labels]
                + ["mean_dsc", "trainable_params"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        for e in self.entries:
            w.writerow([e["epoch"], repr(e["lr"]), repr(e["train_loss"]), repr(e["val_loss"])]
                       + [repr(e["dsc"][str(lbl)]) for lbl in self.labels]
                       + [repr(e["mean_dsc"]), e["trainable_params"]])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "entries": self.entries, "initial": self.initial,
                "best_epoch": self.best_epoch, "best_mean_dsc": self.best_mean_dsc,
                "unfreeze_epochs": self.unfreeze_epochs, "stopped_early": self.stopped_early,
                "mean_dsc": self.mean_dsc_curve()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        return cls(list(d["labels"]), list(d["entries"]), d.get("initial"), list(d.get("unfreeze_epochs", [])),
                   bool(d.get("stopped_early", False)))


# --------------------------------------------------------------------------
# batches


class BatchSource:
    """Draws training batches: 3:1 patches when the network is N-D on N-D data,
    labelled slices (plus neighbours) for a 2D network on 3D data."""

    def __init__(self, bundles: Sequence[VolumeBundle], plan: NetworkPlan, cfg: TrainConfig,
                 rng: np.random.Generator):
        self.bundles = list(bundles)
        self.plan = plan
        self.cfg = cfg
        self.rng = rng
        self.batch_size = cfg.batch_size or plan.batch_size
        data_dims = len(self.bundles[0].shape)
        self.slice_mode = plan.dims == 2 and data_dims == 3
        if self.slice_mode:
            self.slices = [select_slices(b, cfg.slice_surround) or list(range(b.shape[0])) for b in self.bundles]
        self.cum = plan.cumulative_stride()

    def default_steps(self) -> int:
        if self.slice_mode:
            total = sum(len(s) for s in self.slices)
        elif self.plan.patch_size == FULL_SLICE:
            total = len(self.bundles)
        else:
            pv = int(np.prod(self.plan.patch_size))
            total = sum(max(1, math.ceil(int((b.labels > 0).sum()) / pv)) for b in self.bundles)
        return max(1, min(self.cfg.max_steps_per_epoch, math.ceil(total / self.batch_size)))

    def _augment(self, img, lab):
        return augment(img, lab, self.cfg.augment, self.rng)

    def next(self):
        rng = self.rng
        if self.slice_mode:
            v = int(rng.integers(len(self.bundles)))
            b = self.bundles[v]
            idx = rng.choice(self.slices[v], size=self.batch_size, replace=True)
            pairs = [self._augment(b.image[:, i], b.labels[i]) for i in idx]
            imgs = np.stack([p[0] for p in pairs])
            labs = np.stack([p[1] for p in pairs])
            imgs, _ = _pad_to_multiple(imgs, self.cum, "reflect")
            labs, _ = _pad_to_multiple(labs, self.cum, "reflect")
            return imgs, labs
        if self.plan.patch_size == FULL_SLICE:
            v = int(rng.integers(len(self.bundles)))
            b = self.bundles[v]
            pairs = [self._augment(b.image, b.labels) for _ in range(self.batch_size)]
            imgs, _ = _pad_to_multiple(np.stack([p[0] for p in pairs]), self.cum, "reflect")
            labs, _ = _pad_to_multiple(np.stack([p[1] for p in pairs]), self.cum, "reflect")
            return imgs, labs
        patch = self.plan.patch_size
        imgs, labs = [], []
        vols = rng.integers(len(self.bundles), size=self.batch_size)
        for v in vols:
            b = self.bundles[int(v)]
            (center,), _ = draw_centers(b.labels, 1, rng, self.cfg.pos_fraction)
            img, lab = self._augment(extract_patch(b.image, center, patch), extract_patch(b.labels, center, patch))
            imgs.append(img)
            labs.append(lab)
        return np.stack(imgs), np.stack(labs)


# --------------------------------------------------------------------------
# training


@dataclass
class _Prepared:
    bundle: VolumeBundle
    record: PreprocessRecord
    raw_labels: np.ndarray


def _prepare(bundles, target_spacing, margin):
    out = []
    for b in bundles:
        pb, rec = preprocess(b, target_spacing, margin)
        out.append(_Prepared(pb, rec, b.labels))
    return out


def validate_network(network: Network, prepared: Sequence[_Prepared], patch_size, overlap: float,
                     labels: Sequence[int]):
    """Validation soft-Dice loss and per-label DSC scored in each volume's original geometry."""
    losses, scores = [], []
    for item in prepared:
        probs = sliding_window_infer(network, item.bundle.image, patch_size, overlap)
        losses.append(soft_dice_value(probs[None], item.bundle.labels[None].astype(np.int64)))
        pred = restore_labels(np.argmax(probs, axis=0).astype(np.uint16), item.record)
        scores.append(dice_per_label(pred, item.raw_labels, labels))
    report = summarize(scores, labels)
    return float(np.mean(losses)), report


def _snapshot(network: Network) -> dict:
    snap = {k: v.copy() for k, v in network.state_dict().items()}
    for layer in network.conv_layers():
        if layer.lora is not None:
            snap[f"{layer.name}.lora_A"] = layer.lora.A.data.copy()
            snap[f"{layer.name}.lora_B"] = layer.lora.B.data.copy()
    return snap


def _restore(network: Network, snap: dict) -> None:
    network.load_state_dict(snap)
    for layer in network.conv_layers():
        if layer.lora is not None:
            layer.lora.A.data = snap[f"{layer.name}.lora_A"].copy()
            layer.lora.B.data = snap[f"{layer.name}.lora_B"].copy()


def _label_space(bundles: Sequence[VolumeBundle]) -> dict:
    names: dict = {}
    for b in bundles:
        for k, v in b.label_names.items():
            names.setdefault(int(k), v)
    if not names:
        top = max(int(b.labels.max()) for b in bundles)
        names = {i: f"label_{i}" for i in range(top + 1)}
    return dict(sorted(names.items()))


def prepare_network(cfg: TrainConfig, plan: Optional[NetworkPlan], init: Optional[ModelArtifact],
                    num_classes: int, rng: np.random.Generator):
    """The starting network and its preprocessing settings (inherited when ``init`` is given)."""
    dtype = np.dtype(cfg.dtype)
    if init is None:
        if plan is None:
            raise UsageError("training from scratch needs a network plan")
        if plan.num_classes != num_classes:
            plan = copy.deepcopy(plan)
            plan.num_classes = num_classes
        return instantiate(plan, rng, dtype=dtype), None
    network = init.build_network(adapted=False, dtype=dtype)
    k_old = network.plan.num_classes
    if k_old != num_classes:
        if not cfg.remap_labels:
            raise DataError(f"label space mismatch: model predicts {k_old} classes, data has {num_classes}; "
                            "enable remap_labels to re-initialize the output head")
        network.plan = copy.deepcopy(network.plan)
        network.plan.num_classes = num_classes
        old = network["head"]
        spec = ad.ConvSpec(old.spec.dims, old.spec.in_channels, num_classes, old.spec.kernel,
                           old.spec.stride, old.spec.padding)
        head = ConvLayer.create("head", spec, rng, bias=True, depth_index=old.depth_index, dtype=dtype)
        # zero head: uniform logits at start, so early updates follow the inherited features instead of
        # a random projection that can park one class over the whole body under foreground-only Dice
        head.weight.data[...] = 0.0
        head.bias.data[...] = 0.0
        network.replace_layer(head)
    return network, dict(init.preprocess)


def train(cfg: TrainConfig, train_set: Sequence[VolumeBundle], val_set: Sequence[VolumeBundle],
          init: Optional[ModelArtifact] = None, plan: Optional[NetworkPlan] = None,
          target_spacing: Optional[Sequence[float]] = None,
          progress: Optional[Callable[[dict], None]] = None):
    """Train from scratch (``plan``) or fine-tune ``init``; returns ``(artifact, MetricsRecord)``.

    Fine-tuning inherits the artifact's plan, target spacing and patch size.
    The returned artifact holds the best-epoch weights (LoRA merged, adapter
    blocks kept alongside).

    Raises:
        UsageError: empty training set, or a freezing/LoRA strategy without ``init``.
        NumericError: non-finite loss, with epoch and step.
    """
    cfg.validate()
    if not train_set:
        raise UsageError("empty training set")
    if not val_set:
        raise UsageError("empty validation set")
    if cfg.fine_tuning and init is None:
        raise UsageError("freezing or LoRA need a pre-trained model to adapt")
    rng = np.random.default_rng(cfg.seed)
    label_names = _label_space(list(train_set) + list(val_set))
    k = max(label_names) + 1
    network, inherited = prepare_network(cfg, plan, init, k, rng)
    plan = network.plan
    if inherited is not None:
        pre = inherited
    else:
        if target_spacing is None:
            from .data import compute_fingerprint
            target_spacing = compute_fingerprint(train_set).target_spacing
        pre = {"target_spacing": [float(s) for s in target_spacing],
               "patch_size": plan.patch_size if isinstance(plan.patch_size, str) else list(plan.patch_size),
               "normalization": "nonzero-zscore", "crop_margin": cfg.crop_margin}
    patch = _patch_from(pre["patch_size"])
    train_prep = _prepare(train_set, pre["target_spacing"], int(pre.get("crop_margin", 0)))
    val_prep = _prepare(val_set, pre["target_spacing"], int(pre.get("crop_margin", 0)))
    fg = list(range(1, k))

    if cfg.lora is not None:
        inject_network(network, cfg.lora, rng)
    schedule = freeze_plan(network, cfg.freeze, cfg.epochs)
    record = MetricsRecord(labels=fg, unfreeze_epochs=schedule.schedule.unfreeze_epochs())

    if init is not None:
        v_loss, rep = validate_network(network, val_prep, patch, cfg.overlap, fg)
        record.initial = {"val_loss": v_loss, "mean_dsc": rep.mean, "dsc": {str(l): rep.per_label[l] for l in fg}}

    source = BatchSource([p.bundle for p in train_prep], plan, cfg, rng)
    steps = cfg.steps_per_epoch or source.default_steps()
    opt = AdamW(cfg.weight_decay)
    params = network.parameters()
    best, best_snap, since_best = -np.inf, _snapshot(network), 0
    for epoch in range(cfg.epochs):
        trainable = apply_trainable(network, schedule.trainable_layers(epoch))
        n_trainable = int(sum(params[n].size for n in trainable))
        lr = cosine_lr(epoch, cfg.lr0, cfg.lr_min, cfg.epochs, cfg.lr_schedule)
        losses = []
        for step in range(steps):
            imgs, labs = source.next()
            opt.zero_grad(params)
            logits = network.forward(Tensor(imgs, dtype=network.layers[0].weight.dtype), training=True)
            loss = dice_loss(logits, labs.astype(np.int64))
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, step {step + 1}")
            loss.backward()
            opt.step(params, lr, trainable)
            losses.append(value)
        v_loss, rep = validate_network(network, val_prep, patch, cfg.overlap, fg)
        entry = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses)), "val_loss": v_loss,
                 "dsc": {str(l): rep.per_label[l] for l in fg}, "mean_dsc": rep.mean,
                 "trainable_params": n_trainable}
        record.entries.append(entry)
        if rep.mean > best:
            best, best_snap, since_best = rep.mean, _snapshot(network), 0
        else:
            since_best += 1
        if progress is not None:
            progress({**entry, "best_mean_dsc": best})
        if since_best >= cfg.patience:
            record.stopped_early = True
            break
    _restore(network, best_snap)
    for p in params.values():
        p.grad = None
    training = {"config": cfg.to_dict(), "label_names": {str(i): n for i, n in label_names.items()},
                "best_epoch": record.best_epoch, "best_mean_dsc": record.best_mean_dsc,
                "epochs_run": len(record.entries)}
    artifact = ModelArtifact.from_network(network, pre, training,
                                          cfg.lora.to_dict() if cfg.lora is not None else None)
    return artifact, record
